//! Low-rank adapters on the decoder's projection matrices.
//!
//! An adapted matrix computes `h = W0·x + scale·B·(A·x)` with `W0` frozen,
//! `A: [r, in]`, `B: [out, r]` and `scale = alpha / r`. `B` starts at zero, so
//! a freshly adapted model is numerically the base model.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::eci::EciHead;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Model, ModelConfig};
use crate::params::{Bound, Param, ParamReport, ParamStore};
use crate::tensor::Tensor;

/// A projection site inside every decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    QProj,
    KProj,
    VProj,
    OProj,
    FfnUp,
    FfnDown,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::QProj => "q_proj",
            LoraTarget::KProj => "k_proj",
            LoraTarget::VProj => "v_proj",
            LoraTarget::OProj => "o_proj",
            LoraTarget::FfnUp => "ffn_up",
            LoraTarget::FfnDown => "ffn_down",
        }
    }

    /// `(out, in)` of the wrapped matrix.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            LoraTarget::FfnUp => (cfg.ff_dim(), cfg.d_model),
            LoraTarget::FfnDown => (cfg.d_model, cfg.ff_dim()),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "q_proj" => LoraTarget::QProj,
            "k_proj" => LoraTarget::KProj,
            "v_proj" => LoraTarget::VProj,
            "o_proj" => LoraTarget::OProj,
            "ffn_up" => LoraTarget::FfnUp,
            "ffn_down" => LoraTarget::FfnDown,
            other => return Err(Error::UnknownTarget(other.to_string())),
        })
    }
}

/// Checkpoint/bind name of an adapter factor: `lora.{layer}.{site}.{A|B}`.
pub fn adapter_name(layer: usize, site: &str, factor: &str) -> String {
    format!("lora.{layer}.{site}.{factor}")
}

fn default_targets() -> Vec<LoraTarget> {
    alloc::vec![LoraTarget::QProj, LoraTarget::VProj]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            targets: default_targets(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `W0·x + scale·B·(A·x)` for row-major `x: [n, in]`.
pub fn lora_forward(g: &mut Graph, x: Var, w0: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let base = g.linear(x, w0)?;
    let down = g.linear(x, a)?;
    let up = g.linear(down, b)?;
    let up = g.scale(up, scale)?;
    g.add(base, up)
}

/// A base model plus trainable adapters; every base weight is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModel {
    base: Model,
    config: LoraConfig,
    adapters: ParamStore,
}

/// Wraps `model` with adapters on `targets` in every layer.
///
/// `A ~ N(0, (1/r)²)`, `B = 0`; the base weights are frozen.
pub fn inject_lora(mut model: Model, config: LoraConfig, seed: u64) -> Result<LoraModel> {
    let cfg = model.config().clone();
    if config.rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    if !(config.alpha > 0.0 && config.alpha.is_finite()) {
        return Err(Error::Config("LoRA alpha must be positive".into()));
    }
    if config.targets.is_empty() {
        return Err(Error::Config("no LoRA targets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = ParamStore::new();
    for l in 0..cfg.n_layers {
        for &target in &config.targets {
            let (out, inp) = target.dims(&cfg);
            let min_dim = out.min(inp);
            if config.rank >= min_dim {
                return Err(Error::RankTooLarge {
                    rank: config.rank,
                    min_dim,
                });
            }
            let a = Tensor::randn(&[config.rank, inp], 1.0 / config.rank as f64, &mut rng)
                .with_requires_grad(true);
            let b = Tensor::zeros(&[out, config.rank]).with_requires_grad(true);
            adapters.insert_dense(adapter_name(l, target.as_str(), "A"), a);
            adapters.insert_dense(adapter_name(l, target.as_str(), "B"), b);
        }
    }
    model.set_trainable(false);
    Ok(LoraModel {
        base: model,
        config,
        adapters,
    })
}

/// Same as [`inject_lora`] but with target names as strings.
pub fn inject_lora_named(model: Model, targets: &[&str], rank: usize, alpha: f64, seed: u64) -> Result<LoraModel> {
    let targets = targets
        .iter()
        .map(|t| t.parse())
        .collect::<Result<Vec<LoraTarget>>>()?;
    inject_lora(model, LoraConfig { rank, alpha, targets }, seed)
}

impl LoraModel {
    /// Reassembles a model from stored parts (e.g. a checkpoint).
    pub fn from_parts(base: Model, config: LoraConfig, adapters: ParamStore) -> Result<Self> {
        let cfg = base.config();
        for l in 0..cfg.n_layers {
            for &t in &config.targets {
                let (out, inp) = t.dims(cfg);
                for (factor, shape) in [("A", [config.rank, inp]), ("B", [out, config.rank])] {
                    let name = adapter_name(l, t.as_str(), factor);
                    match adapters.get(&name) {
                        Some(p) if p.shape() == shape => {}
                        Some(p) => return Err(crate::error::shape_err("adapter", &shape, p.shape())),
                        None => return Err(Error::UnknownParam(name)),
                    }
                }
            }
        }
        Ok(Self {
            base,
            config,
            adapters,
        })
    }

    pub fn base(&self) -> &Model {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Model {
        &mut self.base
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &ParamStore {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut ParamStore {
        &mut self.adapters
    }

    /// Number of adapted matrices.
    pub fn adapter_count(&self) -> usize {
        self.adapters.len() / 2
    }

    pub fn into_parts(self) -> (Model, LoraConfig, ParamStore) {
        (self.base, self.config, self.adapters)
    }

    /// Folds every adapter into its base matrix (`W0 + scale·B·A`) and returns
    /// the resulting plain model. The adapters are consumed; a second call
    /// fails with [`Error::NoAdapters`].
    pub fn merge_adapters(&mut self) -> Result<Model> {
        if self.adapters.is_empty() {
            return Err(Error::NoAdapters);
        }
        let scale = self.config.scale();
        let cfg = self.base.config().clone();
        let mut merged = self.base.clone();
        for l in 0..cfg.n_layers {
            for &t in &self.config.targets {
                let a = self.adapters.dense(&adapter_name(l, t.as_str(), "A"))?;
                let b = self.adapters.dense(&adapter_name(l, t.as_str(), "B"))?;
                let name = format!("layers.{l}.{}", t.as_str());
                let w0 = merged
                    .params()
                    .get(&name)
                    .ok_or_else(|| Error::UnknownParam(name.clone()))?
                    .to_dense();
                let (out, inp) = (w0.shape()[0], w0.shape()[1]);
                let r = self.config.rank;
                let mut w = w0.into_data();
                for i in 0..out {
                    for j in 0..inp {
                        let mut delta = 0.0;
                        for p in 0..r {
                            delta += b.data()[i * r + p] * a.data()[p * inp + j];
                        }
                        w[i * inp + j] += scale * delta;
                    }
                }
                merged
                    .params_mut()
                    .insert(name, Param::Dense(Tensor::new(alloc::vec![out, inp], w)?));
            }
        }
        self.adapters = ParamStore::new();
        Ok(merged)
    }

    /// Exact trainable/frozen tallies for base, adapters and an optional head.
    pub fn trainable_parameter_report(&self, eci: Option<&EciHead>) -> ParamReport {
        let mut groups: Vec<(&str, &ParamStore)> = alloc::vec![("base", self.base.params()), ("lora", &self.adapters)];
        if let Some(head) = eci {
            groups.push(("eci", head.params()));
        }
        ParamReport::from_groups(&groups)
    }
}

impl LanguageModel for LoraModel {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn bind(&self, g: &mut Graph, track_grads: bool) -> Result<Bound> {
        let mut bound = self.base.bind(g, track_grads)?;
        self.adapters.bind(g, &mut bound, track_grads)?;
        Ok(bound)
    }

    fn lora_scale(&self) -> f64 {
        self.config.scale()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn desk() -> ModelConfig {
        ModelConfig {
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn injection_counts_and_freezes() {
        let lm = inject_lora(Model::init(desk(), 0).unwrap(), LoraConfig::default(), 1).unwrap();
        assert_eq!(lm.adapter_count(), 4);
        let a = lm.adapters().dense("lora.0.q_proj.A").unwrap();
        let b = lm.adapters().dense("lora.0.q_proj.B").unwrap();
        assert_eq!(a.numel() + b.numel(), 2048);
        let report = lm.trainable_parameter_report(None);
        assert_eq!(report.trainable_count, 4 * 2048);
        assert_eq!(report.total(), lm.base().param_count() + 4 * 2048);
    }

    #[test]
    fn injection_errors() {
        let m = Model::init(desk(), 0).unwrap();
        assert!(matches!(
            inject_lora_named(m.clone(), &["q_proj", "w_proj"], 4, 4.0, 0),
            Err(Error::UnknownTarget(t)) if t == "w_proj"
        ));
        assert!(matches!(
            inject_lora_named(m.clone(), &["q_proj"], 64, 64.0, 0),
            Err(Error::RankTooLarge { rank: 64, min_dim: 64 })
        ));
        assert!(inject_lora_named(m, &["q_proj"], 0, 1.0, 0).is_err());
    }

    #[test]
    fn zero_init_matches_base_exactly() {
        let m = Model::init(desk(), 5).unwrap();
        let ids = vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7, 6, 5]];
        let base = m.forward(&ids).unwrap();
        let lm = inject_lora(m, LoraConfig::default(), 9).unwrap();
        let adapted = lm.forward(&ids).unwrap();
        assert_eq!(base.logits.data(), adapted.logits.data());
        assert_eq!(base.last_hidden.data(), adapted.last_hidden.data());
    }

    #[test]
    fn merge_of_zero_adapters_is_bitwise_base() {
        let m = Model::init(desk(), 5).unwrap();
        let mut lm = inject_lora(m.clone(), LoraConfig::default(), 9).unwrap();
        let merged = lm.merge_adapters().unwrap();
        for (name, p) in m.params().iter() {
            let (Param::Dense(x), Some(Param::Dense(y))) = (p, merged.params().get(name)) else {
                panic!()
            };
            assert!(x.bitwise_eq(y), "{name}");
        }
        assert!(matches!(lm.merge_adapters(), Err(Error::NoAdapters)));
    }

    #[test]
    fn lora_forward_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap()).unwrap();
        let w0 = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap()).unwrap();
        let a = g.constant(Tensor::new(vec![1, 3], vec![0.3, 0.1, -0.2]).unwrap()).unwrap();
        let zero_b = g.constant(Tensor::zeros(&[2, 1])).unwrap();
        let h = lora_forward(&mut g, x, w0, a, zero_b, 1.0).unwrap();
        let base = g.linear(x, w0).unwrap();
        assert_eq!(g.value(h).data(), g.value(base).data());
    }
}
