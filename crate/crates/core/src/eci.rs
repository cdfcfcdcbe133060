//! Classification head over the whole last-layer hidden-state matrix.
//!
//! `[b, s, d]` is max-pooled along one axis and average-pooled along the other
//! (stride equal to kernel, no padding), flattened, then passed through
//! affine+SiLU layers and a final affine map to `C` class logits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{pooled_len, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, Param, ParamStore};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolAxis {
    Sequence,
    Embedding,
}

fn default_max_kernel() -> usize {
    5
}
fn default_avg_kernel() -> usize {
    8
}
fn default_max_axis() -> PoolAxis {
    PoolAxis::Sequence
}
fn default_avg_axis() -> PoolAxis {
    PoolAxis::Embedding
}
fn default_hidden_widths() -> Vec<usize> {
    alloc::vec![256, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EciConfig {
    #[serde(default = "default_max_kernel")]
    pub max_kernel: usize,
    #[serde(default = "default_avg_kernel")]
    pub avg_kernel: usize,
    #[serde(default = "default_max_axis")]
    pub max_axis: PoolAxis,
    #[serde(default = "default_avg_axis")]
    pub avg_axis: PoolAxis,
    #[serde(default = "default_hidden_widths")]
    pub hidden_widths: Vec<usize>,
    pub class_names: Vec<String>,
    pub seq_len: usize,
    pub d_model: usize,
}

impl EciConfig {
    pub fn new(class_names: Vec<String>, seq_len: usize, d_model: usize) -> Self {
        Self {
            max_kernel: default_max_kernel(),
            avg_kernel: default_avg_kernel(),
            max_axis: default_max_axis(),
            avg_axis: default_avg_axis(),
            hidden_widths: default_hidden_widths(),
            class_names,
            seq_len,
            d_model,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn axis_index(axis: PoolAxis) -> usize {
        match axis {
            PoolAxis::Sequence => 1,
            PoolAxis::Embedding => 2,
        }
    }

    /// Pooled `(sequence, embedding)` lengths.
    pub fn pooled_dims(&self) -> Result<(usize, usize)> {
        let (seq_k, emb_k) = match (self.max_axis, self.avg_axis) {
            (PoolAxis::Sequence, PoolAxis::Embedding) => (self.max_kernel, self.avg_kernel),
            (PoolAxis::Embedding, PoolAxis::Sequence) => (self.avg_kernel, self.max_kernel),
            _ => return Err(Error::Config("the two poolings must use different axes".into())),
        };
        Ok((pooled_len(self.seq_len, seq_k, seq_k)?, pooled_len(self.d_model, emb_k, emb_k)?))
    }

    pub fn flatten_width(&self) -> Result<usize> {
        let (p, q) = self.pooled_dims()?;
        Ok(p * q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut names = self.class_names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.class_names.len() {
            return Err(Error::Config("class names must be distinct".into()));
        }
        self.pooled_dims().map(|_| ())
    }

    /// `(in, out)` of every affine layer, hidden layers first.
    pub fn layer_dims(&self) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::new();
        let mut width = self.flatten_width()?;
        for &h in self.hidden_widths.iter().chain(core::iter::once(&self.num_classes())) {
            dims.push((width, h));
            width = h;
        }
        Ok(dims)
    }
}

/// Shape accounting for a head without allocating it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EciParamCount {
    pub pooled: (usize, usize),
    pub flatten_width: usize,
    /// `(in, out, in·out + out)` per affine layer.
    pub layers: Vec<(usize, usize, usize)>,
    pub total: usize,
}

/// Parameter count for max-pooling the sequence axis with kernel `n` and
/// average-pooling the embedding axis with kernel `k`.
pub fn eci_param_count(
    s: usize,
    d: usize,
    n: usize,
    k: usize,
    hidden_widths: &[usize],
    classes: usize,
) -> Result<EciParamCount> {
    let cfg = EciConfig {
        max_kernel: n,
        avg_kernel: k,
        max_axis: PoolAxis::Sequence,
        avg_axis: PoolAxis::Embedding,
        hidden_widths: hidden_widths.to_vec(),
        class_names: (0..classes).map(|c| format!("{c}")).collect(),
        seq_len: s,
        d_model: d,
    };
    cfg.validate()?;
    let layers: Vec<(usize, usize, usize)> = cfg
        .layer_dims()?
        .into_iter()
        .map(|(i, o)| (i, o, i * o + o))
        .collect();
    Ok(EciParamCount {
        pooled: cfg.pooled_dims()?,
        flatten_width: cfg.flatten_width()?,
        total: layers.iter().map(|l| l.2).sum(),
        layers,
    })
}

pub fn weight_name(layer: usize) -> String {
    format!("eci.mlp.{layer}.w")
}

pub fn bias_name(layer: usize) -> String {
    format!("eci.mlp.{layer}.b")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EciOutput {
    /// `[b, C]`
    pub logits: Tensor,
    pub predicted: Vec<usize>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EciHead {
    config: EciConfig,
    params: ParamStore,
}

impl EciHead {
    /// Weights `~ N(0, 1/in)`, biases zero; every tensor trainable.
    pub fn init(config: EciConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, (inp, out)) in config.layer_dims()?.into_iter().enumerate() {
            let std = 1.0 / libm::sqrt(inp as f64);
            params.insert_dense(weight_name(i), Tensor::randn(&[out, inp], std, &mut rng).with_requires_grad(true));
            params.insert_dense(bias_name(i), Tensor::zeros(&[out]).with_requires_grad(true));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: EciConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims()?;
        if params.len() != 2 * dims.len() {
            return Err(Error::Config(format!(
                "expected {} head tensors, found {}",
                2 * dims.len(),
                params.len()
            )));
        }
        for (i, (inp, out)) in dims.into_iter().enumerate() {
            for (name, shape) in [(weight_name(i), alloc::vec![out, inp]), (bias_name(i), alloc::vec![out])] {
                match params.get(&name) {
                    Some(p) if p.shape() == shape.as_slice() => {}
                    Some(p) => return Err(shape_err("eci parameter", &shape, p.shape())),
                    None => return Err(Error::UnknownParam(name)),
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EciConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, g: &mut Graph, bound: &mut Bound, track_grads: bool) -> Result<()> {
        self.params.bind(g, bound, track_grads)
    }

    /// Class logits `[b, C]` from `hidden` (`[b, s, d]`).
    ///
    /// With `prefix_lens`, row `i` keeps positions `< prefix_lens[i]` and the
    /// rest are zeroed before pooling.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, hidden: Var, prefix_lens: Option<&[usize]>) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.value(hidden).shape().to_vec();
        if shape.len() != 3 || shape[1] != cfg.seq_len || shape[2] != cfg.d_model {
            return Err(shape_err("eci_forward", &shape, &[0, cfg.seq_len, cfg.d_model]));
        }
        let b = shape[0];
        let mut x = hidden;
        if let Some(lens) = prefix_lens {
            if lens.len() != b {
                return Err(shape_err("eci mask", &shape, &[lens.len()]));
            }
            let mask = g.constant(prefix_mask(lens, cfg.seq_len, cfg.d_model))?;
            x = g.mul(x, mask)?;
        }
        let max_axis = EciConfig::axis_index(cfg.max_axis);
        let avg_axis = EciConfig::axis_index(cfg.avg_axis);
        x = g.max_pool_1d(x, max_axis, cfg.max_kernel, cfg.max_kernel)?;
        x = g.avg_pool_1d(x, avg_axis, cfg.avg_kernel, cfg.avg_kernel)?;
        x = g.flatten(x)?;
        let layers = cfg.hidden_widths.len() + 1;
        for i in 0..layers {
            x = g.linear(x, bound.get(&weight_name(i))?)?;
            x = g.add_bias(x, bound.get(&bias_name(i))?)?;
            if i + 1 < layers {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, hidden: &Tensor, prefix_lens: Option<&[usize]>) -> Result<EciOutput> {
        let mut g = Graph::new();
        let mut bound = Bound::new();
        self.bind(&mut g, &mut bound, false)?;
        let h = g.constant(hidden.clone())?;
        let logits = self.forward_graph(&mut g, &bound, h, prefix_lens)?;
        let logits = g.value(logits).clone();
        let predicted = predict(&logits);
        let labels = predicted.iter().map(|&i| self.config.class_names[i].clone()).collect();
        Ok(EciOutput {
            logits,
            predicted,
            labels,
        })
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.params.iter().filter(|(_, p)| matches!(p, Param::Dense(t) if t.rank() == 2)).count()
    }
}

/// `[b, s, d]` mask with ones at positions `< lens[row]`.
pub fn prefix_mask(lens: &[usize], s: usize, d: usize) -> Tensor {
    let mut data = alloc::vec![0.0; lens.len() * s * d];
    for (r, &len) in lens.iter().enumerate() {
        for t in 0..len.min(s) {
            data[(r * s + t) * d..(r * s + t + 1) * d].fill(1.0);
        }
    }
    Tensor::new(alloc::vec![lens.len(), s, d], data).expect("mask shape")
}

/// Row-wise first argmax of `[b, C]` logits.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(0);
    if c == 0 {
        return Vec::new();
    }
    logits.data().chunks(c).map(argmax).collect()
}

/// One class name per row.
pub fn predict_label(logits: &Tensor, class_names: &[String]) -> Result<Vec<String>> {
    if logits.shape().last() != Some(&class_names.len()) || class_names.is_empty() {
        return Err(shape_err("predict_label", logits.shape(), &[class_names.len()]));
    }
    Ok(predict(logits).into_iter().map(|i| class_names[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn classes() -> Vec<String> {
        ["yes", "no", "maybe"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pooled_dims_examples() {
        let cfg = EciConfig::new(classes(), 10, 16);
        assert_eq!(cfg.pooled_dims().unwrap(), (2, 2));
        assert_eq!(cfg.flatten_width().unwrap(), 4);
        assert_eq!(eci_param_count(128, 64, 5, 8, &[256, 64], 3).unwrap().flatten_width, 200);
        assert_eq!(eci_param_count(1900, 5120, 1, 1, &[], 3).unwrap().flatten_width, 9_728_000);
        let paper = eci_param_count(1900, 5120, 5, 8, &[256, 64], 3).unwrap();
        assert_eq!(paper.pooled, (380, 640));
        assert_eq!(paper.flatten_width, 243_200);
        assert!(eci_param_count(4, 64, 5, 8, &[8], 3).is_err());
    }

    #[test]
    fn count_matches_allocation() {
        let cfg = EciConfig::new(classes(), 128, 64);
        let head = EciHead::init(cfg, 3).unwrap();
        let count = eci_param_count(128, 64, 5, 8, &[256, 64], 3).unwrap();
        assert_eq!(head.param_count(), count.total);
        assert_eq!(count.total, 200 * 256 + 256 + 256 * 64 + 64 + 64 * 3 + 3);
        assert_eq!(head.depth(), 3);
    }

    #[test]
    fn zero_input_gives_uniform_logits() {
        let head = EciHead::init(EciConfig::new(classes(), 10, 16), 1).unwrap();
        let out = head.forward(&Tensor::zeros(&[2, 10, 16]), None).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.predicted, vec![0, 0]);
        assert_eq!(out.labels, vec!["yes".to_string(), "yes".to_string()]);
    }

    #[test]
    fn forward_checks_shape() {
        let head = EciHead::init(EciConfig::new(classes(), 10, 16), 1).unwrap();
        assert!(matches!(
            head.forward(&Tensor::zeros(&[1, 11, 16]), None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mask_hides_suffix() {
        let head = EciHead::init(EciConfig::new(classes(), 10, 16), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor::randn(&[1, 10, 16], 1.0, &mut rng);
        let mut h2 = h.clone();
        for v in &mut h2.data_mut()[6 * 16..] {
            *v += 3.0;
        }
        let a = head.forward(&h, Some(&[6])).unwrap();
        let b = head.forward(&h2, Some(&[6])).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        let c = head.forward(&h2, None).unwrap();
        assert_ne!(a.logits.data(), c.logits.data());
    }

    #[test]
    fn predictions() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 2.3, -1.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(predict(&logits), vec![1, 0]);
        assert_eq!(predict_label(&logits, &classes()).unwrap(), vec!["no", "yes"]);
        assert!(predict_label(&logits, &classes()[..2]).is_err());
    }
}
