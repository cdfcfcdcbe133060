//! The `ECIF` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ECIF" | version: u32 | meta_len: u32 | meta: JSON | count: u64 | record*
//! record = name_len: u32 | name | tag: u8 | requires_grad: u8
//!        | rank: u32 | dims: u64 * rank | payload
//! ```
//!
//! Tag 0 payloads are raw `f64` values. Tag 1 payloads hold an NF4 matrix:
//! block size, packed nibbles and the per-block scales (plain `f64` or the
//! double-quantized form).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ecibench_core::eci::{EciConfig, EciHead};
use ecibench_core::eval::{ScriptedStub, TrainedBackend};
use ecibench_core::lora::{LoraConfig, LoraModel};
use ecibench_core::params::{Param, ParamStore};
use ecibench_core::prompts::PromptStyle;
use ecibench_core::quant::{AbsmaxStore, QuantOptions, QuantizedTensor};
use ecibench_core::train::{AdamState, TrainConfig, Trainer};
use ecibench_core::{LanguageModel, Model, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"ECIF";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_NF4: u8 = 1;
const SCALES_PLAIN: u8 = 0;
const SCALES_DOUBLE: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"ECIF\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("version mismatch: file is version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: needed {needed} more bytes for {what}")]
    Truncated { what: String, needed: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("{0}")]
    Core(#[from] ecibench_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Trained,
    Scripted,
}

/// Everything besides tensors needed to rebuild a trainer or an evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub class_names: Vec<String>,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eci: Option<EciConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
    #[serde(default)]
    pub adam_t: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantOptions>,
    #[serde(default)]
    pub prompt_style: PromptStyle,
    #[serde(default)]
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub: Option<ScriptedStub>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub tensors: ParamStore,
}

/// Generation and prompt settings stored beside a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSettings {
    pub prompt_style: PromptStyle,
    pub max_new_tokens: usize,
}

/// A model ready to evaluate, as restored from a checkpoint.
pub enum LoadedBackend {
    Trained(Box<TrainedBackend<LoraModel>>),
    Scripted(ScriptedStub),
}

impl Checkpoint {
    /// Captures the full trainer state: weights, adapters, head and moments.
    pub fn from_trainer(trainer: &Trainer, settings: EvalSettings, quantization: Option<QuantOptions>) -> Self {
        let mut tensors = ParamStore::new();
        for (name, p) in trainer.model.base().params().iter() {
            tensors.insert(format!("model.{name}"), p.clone());
        }
        for (name, p) in trainer.model.adapters().iter() {
            tensors.insert(name, p.clone());
        }
        let head_cfg = trainer.head.config();
        for (name, p) in trainer.head.params().iter() {
            tensors.insert(name, p.clone());
        }
        let pool = Tensor::from_vec(vec![head_cfg.max_kernel as f64, head_cfg.avg_kernel as f64]);
        tensors.insert_dense("eci.pool", pool);
        for (name, m) in &trainer.optimizer.m {
            tensors.insert_dense(format!("adam.m.{name}"), Tensor::from_vec(m.clone()));
        }
        for (name, v) in &trainer.optimizer.v {
            tensors.insert_dense(format!("adam.v.{name}"), Tensor::from_vec(v.clone()));
        }
        Self {
            metadata: Metadata {
                kind: CheckpointKind::Trained,
                class_names: head_cfg.class_names.clone(),
                step: trainer.step,
                lambda: Some(trainer.config.lambda),
                model: Some(trainer.model.config().clone()),
                lora: Some(trainer.model.lora_config().clone()),
                eci: Some(head_cfg.clone()),
                training: Some(trainer.config.clone()),
                adam_t: trainer.optimizer.t,
                quantization,
                prompt_style: settings.prompt_style,
                max_new_tokens: settings.max_new_tokens,
                stub: None,
            },
            tensors,
        }
    }

    pub fn from_stub(stub: ScriptedStub) -> Self {
        Self {
            metadata: Metadata {
                kind: CheckpointKind::Scripted,
                class_names: stub.class_names.clone(),
                step: 0,
                lambda: None,
                model: None,
                lora: None,
                eci: None,
                training: None,
                adam_t: 0,
                quantization: None,
                prompt_style: PromptStyle::default(),
                max_new_tokens: 0,
                stub: Some(stub),
            },
            tensors: ParamStore::new(),
        }
    }

    fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| CheckpointError::Corrupt(format!("trained checkpoint lacks `{name}` metadata")))
    }

    /// Rebuilds the trainer exactly as it was when saved.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let meta = &self.metadata;
        if meta.kind != CheckpointKind::Trained {
            return Err(CheckpointError::Corrupt("a scripted checkpoint has no trainer state".into()));
        }
        let model_cfg = Self::require(&meta.model, "model")?.clone();
        let lora_cfg = Self::require(&meta.lora, "lora")?.clone();
        let eci_cfg = Self::require(&meta.eci, "eci")?.clone();
        let train_cfg = Self::require(&meta.training, "training")?.clone();
        if eci_cfg.class_names != meta.class_names {
            return Err(CheckpointError::Corrupt("class names disagree with the head config".into()));
        }

        let mut base = ParamStore::new();
        let mut adapters = ParamStore::new();
        let mut head = ParamStore::new();
        let mut optimizer = AdamState::new();
        optimizer.t = meta.adam_t;
        let mut pool = None;
        for (name, p) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix("model.") {
                base.insert(rest, p.clone());
            } else if name.starts_with("lora.") {
                adapters.insert(name, p.clone());
            } else if name == "eci.pool" {
                pool = Some(p.to_dense().into_data());
            } else if name.starts_with("eci.") {
                head.insert(name, p.clone());
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                optimizer.m.insert(rest.to_string(), p.to_dense().into_data());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                optimizer.v.insert(rest.to_string(), p.to_dense().into_data());
            } else {
                return Err(CheckpointError::Corrupt(format!("unexpected tensor `{name}`")));
            }
        }
        let expected_pool = [eci_cfg.max_kernel as f64, eci_cfg.avg_kernel as f64];
        if pool.as_deref() != Some(&expected_pool[..]) {
            return Err(CheckpointError::Corrupt(format!(
                "eci.pool is {pool:?}, metadata says {expected_pool:?}"
            )));
        }
        let model = Model::from_params(model_cfg, base)?;
        let model = LoraModel::from_parts(model, lora_cfg, adapters)?;
        let head = EciHead::from_params(eci_cfg, head)?;
        let mut trainer = Trainer::new(model, head, train_cfg)?;
        trainer.optimizer = optimizer;
        trainer.step = meta.step;
        Ok(trainer)
    }

    pub fn to_backend(&self) -> Result<LoadedBackend> {
        match self.metadata.kind {
            CheckpointKind::Scripted => {
                let stub = Self::require(&self.metadata.stub, "stub")?.clone();
                Ok(LoadedBackend::Scripted(stub))
            }
            CheckpointKind::Trained => {
                let t = self.to_trainer()?;
                Ok(LoadedBackend::Trained(Box::new(TrainedBackend {
                    model: t.model,
                    head: t.head,
                    style: self.metadata.prompt_style,
                    max_new_tokens: self.metadata.max_new_tokens,
                })))
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut w = Vec::new();
        w.extend_from_slice(&MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut w, meta.len())?;
        w.extend_from_slice(&meta);
        w.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, p) in self.tensors.iter() {
            put_u32(&mut w, name.len())?;
            w.extend_from_slice(name.as_bytes());
            match p {
                Param::Dense(t) => {
                    w.push(TAG_DENSE);
                    w.push(t.requires_grad() as u8);
                    put_shape(&mut w, t.shape())?;
                    for v in t.data() {
                        w.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Param::Nf4(q) => {
                    w.push(TAG_NF4);
                    w.push(0);
                    put_shape(&mut w, q.shape())?;
                    put_u64(&mut w, q.block_size());
                    put_bytes(&mut w, q.packed());
                    match q.absmax() {
                        AbsmaxStore::Plain(values) => {
                            w.push(SCALES_PLAIN);
                            put_f64s(&mut w, values);
                        }
                        AbsmaxStore::Double {
                            codes,
                            group_size,
                            means,
                            scales,
                        } => {
                            w.push(SCALES_DOUBLE);
                            put_u64(&mut w, *group_size);
                            put_bytes(&mut w, codes);
                            put_f64s(&mut w, means);
                            put_f64s(&mut w, scales);
                        }
                    }
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let found = r.u32("version")?;
        if found != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found,
                expected: VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u64("record count")?;
        let mut tensors = ParamStore::new();
        for i in 0..count {
            let name_len = r.u32("record name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| CheckpointError::Corrupt(format!("record {i} has a non-UTF-8 name")))?
                .to_string();
            let tag = r.u8("record tag")?;
            let requires_grad = match r.u8("record flags")? {
                0 => false,
                1 => true,
                f => return Err(CheckpointError::Corrupt(format!("`{name}` has flag byte {f}"))),
            };
            let shape = r.shape(&name)?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` has an overflowing shape")))?;
            let param = match tag {
                TAG_DENSE => {
                    let data = r.f64s(numel, &name)?;
                    Param::Dense(Tensor::new(shape, data)?.with_requires_grad(requires_grad))
                }
                TAG_NF4 => {
                    let block_size = r.u64("nf4 block size")? as usize;
                    let packed = r.bytes(&name)?;
                    let absmax = match r.u8("nf4 scale tag")? {
                        SCALES_PLAIN => {
                            let n = r.u64("nf4 scale count")? as usize;
                            AbsmaxStore::Plain(r.f64s(n, &name)?)
                        }
                        SCALES_DOUBLE => {
                            let group_size = r.u64("nf4 group size")? as usize;
                            let codes = r.bytes(&name)?;
                            let n = r.u64("nf4 group count")? as usize;
                            let means = r.f64s(n, &name)?;
                            let n = r.u64("nf4 group count")? as usize;
                            let scales = r.f64s(n, &name)?;
                            AbsmaxStore::Double {
                                codes,
                                group_size,
                                means,
                                scales,
                            }
                        }
                        t => return Err(CheckpointError::Corrupt(format!("`{name}` has scale tag {t}"))),
                    };
                    Param::Nf4(QuantizedTensor::from_parts(shape, block_size, packed, absmax)?)
                }
                t => return Err(CheckpointError::Corrupt(format!("`{name}` has layout tag {t}"))),
            };
            if tensors.contains(&name) {
                return Err(CheckpointError::Corrupt(format!("duplicate record `{name}`")));
            }
            tensors.insert(name, param);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Tensor names grouped by their first dotted component.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, p) in self.tensors.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(group).or_insert(0) += p.numel();
        }
        out
    }
}

fn put_u32(w: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| CheckpointError::Corrupt(format!("length {n} does not fit in u32")))?;
    w.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_u64(w: &mut Vec<u8>, n: usize) {
    w.extend_from_slice(&(n as u64).to_le_bytes());
}

fn put_shape(w: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    put_u32(w, shape.len())?;
    for &d in shape {
        put_u64(w, d);
    }
    Ok(())
}

fn put_bytes(w: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(w, bytes.len());
    w.extend_from_slice(bytes);
}

fn put_f64s(w: &mut Vec<u8>, values: &[f64]) {
    put_u64(w, values.len());
    for v in values {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                what: what.to_string(),
                needed: n - left,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn shape(&mut self, name: &str) -> Result<Vec<usize>> {
        let rank = self.u32("record rank")? as usize;
        (0..rank).map(|_| self.u64(name).map(|d| d as usize)).collect()
    }

    // Lengths are checked against the remaining input before allocating, so a
    // corrupt count reports truncation instead of exhausting memory.
    fn bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        let n = self.u64(name)?;
        let n = usize::try_from(n).unwrap_or(usize::MAX);
        Ok(self.take(n, name)?.to_vec())
    }

    fn f64s(&mut self, n: usize, name: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), name)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecibench_core::eval::StubEci;
    use ecibench_core::prompts::synthetic_records;

    fn tiny_trainer() -> Trainer {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 24,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg.clone(), 1).unwrap();
        let lora = ecibench_core::lora::inject_lora(
            model,
            LoraConfig {
                rank: 4,
                alpha: 4.0,
                ..LoraConfig::default()
            },
            2,
        )
        .unwrap();
        let mut eci = EciConfig::new(vec!["a".into(), "b".into()], cfg.max_seq_len, cfg.d_model);
        eci.hidden_widths = vec![8];
        let head = EciHead::init(eci, 3).unwrap();
        Trainer::new(lora, head, TrainConfig::new(5, 2)).unwrap()
    }

    fn settings() -> EvalSettings {
        EvalSettings {
            prompt_style: PromptStyle::Plain,
            max_new_tokens: 4,
        }
    }

    #[test]
    fn trainer_round_trips() {
        let t = tiny_trainer();
        let ck = Checkpoint::from_trainer(&t, settings(), None);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_trainer().unwrap(), t);
    }

    #[test]
    fn quantized_base_round_trips() {
        let mut t = tiny_trainer();
        let (mut base, lcfg, adapters) = t.model.clone().into_parts();
        base.quantize(QuantOptions {
            block_size: 16,
            double_quant: true,
        })
        .unwrap();
        t.model = LoraModel::from_parts(base, lcfg, adapters).unwrap();
        let ck = Checkpoint::from_trainer(&t, settings(), None);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(back.tensors.iter().any(|(_, p)| matches!(p, Param::Nf4(_))));
    }

    #[test]
    fn stub_round_trips() {
        let recs = synthetic_records(6, &["x", "y"], 0);
        let stub = ScriptedStub::scripted(&recs, vec!["x".into(), "y".into()], 0.5, 1, StubEci::Gold);
        let ck = Checkpoint::from_stub(stub);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(matches!(back.to_backend().unwrap(), LoadedBackend::Scripted(_)));
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = Checkpoint::from_trainer(&tiny_trainer(), settings(), None).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::VersionMismatch { found: 7, expected: 1 })
        ));

        for cut in [0, 3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated { .. })),
                "cut at {cut}"
            );
        }

        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Corrupt(_))));
    }
}
