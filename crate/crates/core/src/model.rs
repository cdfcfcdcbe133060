//! A small decoder-only transformer: learned positions, pre-RMS-norm blocks,
//! causal multi-head attention and a SiLU feed-forward.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamReport, ParamStore};
use crate::quant::{MemoryReport, QuantOptions};
use crate::tensor::{argmax, Tensor};

fn default_init_std() -> f64 {
    0.02
}

fn default_norm_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ff_mult: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::prompts::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 8,
            max_seq_len: 128,
            ff_mult: 4,
            init_std: default_init_std(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) || !(self.norm_eps >= 0.0) {
            return Err(Error::Config("init_std and norm_eps must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }

    /// `(name, shape)` of every base parameter, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ff_dim());
        let mut out = Vec::new();
        out.push(("tok_embed".into(), alloc::vec![v, d]));
        out.push(("pos_embed".into(), alloc::vec![self.max_seq_len, d]));
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.attn_norm"), alloc::vec![d]));
            for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                out.push((format!("layers.{l}.{proj}"), alloc::vec![d, d]));
            }
            out.push((format!("layers.{l}.ffn_norm"), alloc::vec![d]));
            out.push((format!("layers.{l}.ffn_up"), alloc::vec![f, d]));
            out.push((format!("layers.{l}.ffn_down"), alloc::vec![d, f]));
        }
        out.push(("final_norm".into(), alloc::vec![d]));
        out.push(("lm_head".into(), alloc::vec![v, d]));
        out
    }
}

/// Shapes `[b, s, vocab]` and `[b, s, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub last_hidden: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub hidden: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub eos: Option<usize>,
}

/// Anything that runs the decoder: a plain model or one carrying adapters.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;

    /// Records all parameters on `g`.
    fn bind(&self, g: &mut Graph, track_grads: bool) -> Result<Bound>;

    /// Multiplier applied to adapter outputs, if any adapters are bound.
    fn lora_scale(&self) -> f64 {
        1.0
    }

    fn forward_graph(&self, g: &mut Graph, bound: &Bound, ids: &[Vec<usize>]) -> Result<ForwardVars> {
        transformer_forward(self.config(), self.lora_scale(), g, bound, ids)
    }

    fn forward(&self, ids: &[Vec<usize>]) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let out = self.forward_graph(&mut g, &bound, ids)?;
        Ok(ForwardOutput {
            logits: g.value(out.logits).clone(),
            last_hidden: g.value(out.hidden).clone(),
        })
    }

    /// Greedy decoding; returns the prompt followed by the generated ids.
    fn generate(&self, prompt: &[usize], opts: GenerateOptions) -> Result<Vec<usize>> {
        self.generate_from(prompt, opts, None)
    }

    /// Greedy decoding where the next-token logits for `prompt` may already be
    /// known (from a forward pass shared with another consumer).
    fn generate_from(
        &self,
        prompt: &[usize],
        opts: GenerateOptions,
        first_logits: Option<&[f64]>,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must be nonempty".into()));
        }
        let max = self.config().max_seq_len;
        if prompt.len() + opts.max_new_tokens > max {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + opts.max_new_tokens,
                max,
            });
        }
        let vocab = self.config().vocab_size;
        let mut seq = prompt.to_vec();
        let mut pending = first_logits;
        for _ in 0..opts.max_new_tokens {
            let next = match pending.take() {
                Some(row) => argmax(row),
                None => {
                    let out = self.forward(core::slice::from_ref(&seq))?;
                    let s = seq.len();
                    argmax(&out.logits.data()[(s - 1) * vocab..s * vocab])
                }
            };
            seq.push(next);
            if Some(next) == opts.eos {
                break;
            }
        }
        Ok(seq)
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[Vec<usize>]) -> Result<(usize, usize)> {
    let b = ids.len();
    let s = ids.first().map(Vec::len).unwrap_or(0);
    if b == 0 || s == 0 {
        return Err(Error::InvalidArgument("token batch must be nonempty".into()));
    }
    if ids.iter().any(|r| r.len() != s) {
        return Err(Error::InvalidArgument("token batch rows differ in length".into()));
    }
    if s > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    for &id in ids.iter().flatten() {
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok((b, s))
}

/// `x · W0ᵀ`, plus `scale · (x · Aᵀ) · Bᵀ` when adapters for `site` are bound.
fn project(g: &mut Graph, bound: &Bound, layer: usize, site: &str, x: Var, scale: f64) -> Result<Var> {
    let w = bound.get(&format!("layers.{layer}.{site}"))?;
    let a = bound.try_get(&crate::lora::adapter_name(layer, site, "A"));
    let b = bound.try_get(&crate::lora::adapter_name(layer, site, "B"));
    match (a, b) {
        (Some(a), Some(b)) => crate::lora::lora_forward(g, x, w, a, b, scale),
        _ => g.linear(x, w),
    }
}

/// Runs the decoder on a rectangular batch of token ids.
///
/// `hidden` is taken after the final RMS norm, just before the LM head.
pub fn transformer_forward(
    cfg: &ModelConfig,
    lora_scale: f64,
    g: &mut Graph,
    bound: &Bound,
    ids: &[Vec<usize>],
) -> Result<ForwardVars> {
    let (b, s) = check_ids(cfg, ids)?;
    let d = cfg.d_model;
    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();

    let tok = g.gather(bound.get("tok_embed")?, &flat)?;
    let pos = g.gather(bound.get("pos_embed")?, &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..cfg.n_layers {
        let h = g.rms_norm(x, bound.get(&format!("layers.{l}.attn_norm"))?, cfg.norm_eps)?;
        let q = project(g, bound, l, "q_proj", h, lora_scale)?;
        let k = project(g, bound, l, "k_proj", h, lora_scale)?;
        let v = project(g, bound, l, "v_proj", h, lora_scale)?;
        let att = g.causal_attention(q, k, v, b, s, cfg.n_heads)?;
        let o = project(g, bound, l, "o_proj", att, lora_scale)?;
        x = g.add(x, o)?;

        let h = g.rms_norm(x, bound.get(&format!("layers.{l}.ffn_norm"))?, cfg.norm_eps)?;
        let up = project(g, bound, l, "ffn_up", h, lora_scale)?;
        let act = g.silu(up)?;
        let down = project(g, bound, l, "ffn_down", act, lora_scale)?;
        x = g.add(x, down)?;
    }
    let hidden = g.rms_norm(x, bound.get("final_norm")?, cfg.norm_eps)?;
    let logits = g.linear(hidden, bound.get("lm_head")?)?;
    Ok(ForwardVars {
        logits: g.reshape(logits, &[b, s, cfg.vocab_size])?,
        hidden: g.reshape(hidden, &[b, s, d])?,
    })
}

/// Base decoder weights. Freshly initialized weights are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Weights `~ N(0, init_std²)`, norm gains at one; deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with("norm") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::randn(&shape, config.init_std, &mut rng)
            };
            params.insert_dense(name, t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} base parameters, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(p) if p.shape() == shape.as_slice() => {}
                Some(p) => return Err(crate::error::shape_err("model parameter", shape, p.shape())),
                None => return Err(Error::UnknownParam(name.clone())),
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(trainable);
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn parameter_report(&self) -> ParamReport {
        ParamReport::from_groups(&[("base", &self.params)])
    }

    /// Stores every frozen matrix in 4-bit NormalFloat form.
    pub fn quantize(&mut self, opts: QuantOptions) -> Result<MemoryReport> {
        crate::quant::quantize_store(&mut self.params, opts)
    }
}

impl LanguageModel for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn bind(&self, g: &mut Graph, track_grads: bool) -> Result<Bound> {
        let mut bound = Bound::new();
        self.params.bind(g, &mut bound, track_grads)?;
        Ok(bound)
    }
}
