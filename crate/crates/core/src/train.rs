//! Joint text-generation and classification training with AdamW.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, IGNORE_INDEX};
use crate::eci::{predict, EciHead};
use crate::error::{Error, Result};
use crate::lora::LoraModel;
use crate::model::{LanguageModel, Model};
use crate::params::{Bound, Param, ParamStore};
use crate::prompts::{self, BenchmarkRecord, PromptStyle, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    5e-5
}
fn default_wd() -> f64 {
    0.01
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr_start: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub textgen_reduction: Reduction,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(total_steps: usize, batch_size: usize) -> Self {
        Self {
            lambda: default_lambda(),
            lr_start: default_lr(),
            total_steps,
            batch_size,
            weight_decay: default_wd(),
            betas: default_betas(),
            eps: default_eps(),
            seed: 0,
            textgen_reduction: Reduction::Mean,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if !(self.lr_start > 0.0 && self.lr_start.is_finite()) {
            return Err(Error::Config("lr_start must be positive".into()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear decay from `lr_start` at step 0 to zero at `total_steps`.
pub fn lr_at(step: usize, lr_start: f64, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past the schedule end {total_steps}"
        )));
    }
    Ok((lr_start * (1.0 - step as f64 / total_steps as f64)).max(0.0))
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub textgen: Var,
    pub eci: Var,
}

/// `(1 − λ)·CE_text + λ·CE_eci`.
///
/// `logits` is `[b, s, V]` with `textgen_targets` holding `b·s` entries
/// ([`IGNORE_INDEX`] where no token is predicted); `eci_logits` is `[b, C]`.
pub fn joint_loss(
    g: &mut Graph,
    logits: Var,
    textgen_targets: &[usize],
    eci_logits: Var,
    class_targets: &[usize],
    lambda: f64,
    reduction: Reduction,
) -> Result<JointLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} is outside [0, 1]")));
    }
    let mut textgen = g.cross_entropy(logits, textgen_targets, Some(IGNORE_INDEX))?;
    if reduction == Reduction::Sum {
        let n = textgen_targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        textgen = g.scale(textgen, n as f64)?;
    }
    let eci = g.cross_entropy(eci_logits, class_targets, None)?;
    let a = g.scale(textgen, 1.0 - lambda)?;
    let b = g.scale(eci, lambda)?;
    let total = g.add(a, b)?;
    Ok(JointLoss { total, textgen, eci })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_wd(),
        }
    }
}

/// First and second moments per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One decoupled-decay Adam update of every trainable parameter in `params`
/// that has an entry in `grads`; the step counter advances once per call.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} is negative")));
    }
    state.t += 1;
    apply_adamw(params, grads, state, lr, cfg)
}

/// Like [`adamw_step`] without advancing `state.t`, for updating several
/// stores within one optimizer step.
fn apply_adamw(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let (b1, b2) = cfg.betas;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (name, p) in params.iter_mut() {
        let Param::Dense(tensor) = p else { continue };
        if !tensor.requires_grad() {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        if g.len() != tensor.numel() {
            return Err(crate::error::shape_err("adamw", tensor.shape(), &[g.len()]));
        }
        let m = state.m.entry(name.into()).or_insert_with(|| alloc::vec![0.0; g.len()]);
        let v = state.v.entry(name.into()).or_insert_with(|| alloc::vec![0.0; g.len()]);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((w, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w * decay - lr * (mhat / (libm::sqrt(vhat) + cfg.eps));
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.values().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// A tokenized training item: prompt, completion and class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub class: usize,
}

impl TrainExample {
    /// Prompt tokens, left-truncated so the completion plus `EOS` fits in
    /// `max_len`.
    pub fn from_record(record: &BenchmarkRecord, class_names: &[String], style: PromptStyle, max_len: usize) -> Result<Self> {
        record.validate()?;
        let class = class_names
            .iter()
            .position(|c| *c == record.gold)
            .ok_or_else(|| Error::ClassMismatch {
                record: record.id.clone(),
                label: record.gold.clone(),
            })?;
        let mut completion = prompts::encode(&prompts::completion(record, style));
        completion.push(EOS);
        if completion.len() + 1 > max_len {
            return Err(Error::SequenceTooLong {
                len: completion.len() + 1,
                max: max_len,
            });
        }
        let mut prompt = prompts::encode(&prompts::build_prompt(record, style));
        let room = max_len - completion.len();
        if prompt.len() > room {
            prompt.drain(..prompt.len() - room);
        }
        Ok(Self {
            prompt,
            completion,
            class,
        })
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn examples_from_records(
    records: &[BenchmarkRecord],
    class_names: &[String],
    style: PromptStyle,
    max_len: usize,
) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| TrainExample::from_record(r, class_names, style, max_len))
        .collect()
}

/// Padded batch: `token_ids` is `[b, seq_len]`; `textgen_targets[i·s + t]` is
/// the token at `t + 1` when that token belongs to the completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub textgen_targets: Vec<usize>,
    pub class_targets: Vec<usize>,
    pub prompt_lens: Vec<usize>,
}

pub fn assemble_batch(examples: &[&TrainExample], seq_len: usize) -> Result<TrainBatch> {
    let mut batch = TrainBatch {
        token_ids: Vec::with_capacity(examples.len()),
        textgen_targets: Vec::with_capacity(examples.len() * seq_len),
        class_targets: Vec::with_capacity(examples.len()),
        prompt_lens: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        if ex.len() > seq_len {
            return Err(Error::SequenceTooLong {
                len: ex.len(),
                max: seq_len,
            });
        }
        let mut ids = ex.prompt.clone();
        ids.extend_from_slice(&ex.completion);
        let used = ids.len();
        ids.resize(seq_len, PAD);
        for t in 0..seq_len {
            let next = t + 1;
            batch.textgen_targets.push(if next >= ex.prompt.len() && next < used {
                ids[next]
            } else {
                IGNORE_INDEX
            });
        }
        batch.token_ids.push(ids);
        batch.class_targets.push(ex.class);
        batch.prompt_lens.push(ex.prompt.len());
    }
    Ok(batch)
}

/// Prompt-only batch for classification and generation, right-padded.
pub fn prompt_batch(prompts: &[&[usize]], seq_len: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut ids = Vec::with_capacity(prompts.len());
    let mut lens = Vec::with_capacity(prompts.len());
    for p in prompts {
        if p.is_empty() || p.len() > seq_len {
            return Err(Error::SequenceTooLong {
                len: p.len(),
                max: seq_len,
            });
        }
        let mut row = p.to_vec();
        row.resize(seq_len, PAD);
        ids.push(row);
        lens.push(p.len());
    }
    Ok((ids, lens))
}

/// Dataset indices used at `step`: the stream visits a fresh seeded
/// permutation every epoch.
pub fn batch_indices(n: usize, batch_size: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch_size)
        .map(|j| {
            let pos = step * batch_size + j;
            let epoch = pos / n;
            if epoch != perm_epoch {
                perm = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                perm_epoch = epoch;
            }
            perm[pos % n]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_textgen: f64,
    pub l_eci: f64,
}

/// Column header of the per-step CSV.
pub const CSV_HEADER: &str = "step,lr,loss,l_textgen,l_eci";

impl StepRecord {
    /// Shortest round-trip formatting of every float.
    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{:?},{:?}", self.step, self.lr, self.loss, self.l_textgen, self.l_eci)
    }
}

pub fn losses_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_accuracy: f64,
}

/// Gradients and losses of one joint step, before any update.
pub struct StepGrads {
    pub grads: BTreeMap<String, Vec<f64>>,
    pub loss: f64,
    pub l_textgen: f64,
    pub l_eci: f64,
}

/// Forward and backward for one batch.
pub fn joint_gradients(
    model: &LoraModel,
    head: &EciHead,
    batch: &TrainBatch,
    lambda: f64,
    reduction: Reduction,
) -> Result<StepGrads> {
    let mut g = Graph::new();
    let mut bound = model.bind(&mut g, true)?;
    head.bind(&mut g, &mut bound, true)?;
    let out = model.forward_graph(&mut g, &bound, &batch.token_ids)?;
    let eci_logits = head.forward_graph(&mut g, &bound, out.hidden, Some(&batch.prompt_lens))?;
    let loss = joint_loss(
        &mut g,
        out.logits,
        &batch.textgen_targets,
        eci_logits,
        &batch.class_targets,
        lambda,
        reduction,
    )?;
    let values = (
        g.value(loss.total).item()?,
        g.value(loss.textgen).item()?,
        g.value(loss.eci).item()?,
    );
    g.backward(loss.total)?;
    Ok(StepGrads {
        grads: bound.collect_grads(&mut g),
        loss: values.0,
        l_textgen: values.1,
        l_eci: values.2,
    })
}

/// The training loop state. Everything that affects future steps lives here,
/// so a restored trainer continues exactly where the original would have.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: LoraModel,
    pub head: EciHead,
    pub config: TrainConfig,
    pub optimizer: AdamState,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: LoraModel, head: EciHead, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if head.config().seq_len != model.config().max_seq_len || head.config().d_model != model.config().d_model {
            return Err(Error::Config(format!(
                "head expects [{}, {}] hidden states, model produces [{}, {}]",
                head.config().seq_len,
                head.config().d_model,
                model.config().max_seq_len,
                model.config().d_model
            )));
        }
        Ok(Self {
            model,
            head,
            config,
            optimizer: AdamState::new(),
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Runs one optimizer step on the batch the schedule assigns to it.
    pub fn step(&mut self, data: &[TrainExample]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let step = self.step;
        let lr = lr_at(step, self.config.lr_start, self.config.total_steps)?;
        let idx = batch_indices(data.len(), self.config.batch_size, step, self.config.seed);
        let picked: Vec<&TrainExample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = assemble_batch(&picked, self.model.config().max_seq_len)?;
        let mut sg = joint_gradients(
            &self.model,
            &self.head,
            &batch,
            self.config.lambda,
            self.config.textgen_reduction,
        )?;
        if !sg.loss.is_finite() || sg.grads.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut sg.grads, c);
        }
        let cfg = self.config.adamw();
        self.optimizer.t += 1;
        apply_adamw(self.model.adapters_mut(), &sg.grads, &mut self.optimizer, lr, &cfg)?;
        apply_adamw(self.head.params_mut(), &sg.grads, &mut self.optimizer, lr, &cfg)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss: sg.loss,
            l_textgen: sg.l_textgen,
            l_eci: sg.l_eci,
        })
    }

    /// Steps until `total_steps`, calling `on_step` after each one; stops
    /// early when it returns `false`.
    pub fn run<F>(&mut self, data: &[TrainExample], mut on_step: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&Self, &StepRecord) -> bool,
    {
        let mut records = Vec::new();
        while !self.is_done() {
            let r = self.step(data)?;
            records.push(r);
            if !on_step(self, &r) {
                break;
            }
        }
        Ok(records)
    }

    pub fn accuracy(&self, data: &[TrainExample]) -> Result<f64> {
        eci_accuracy(&self.model, &self.head, data)
    }
}

/// Classifies prompts in chunks; hidden states past each prompt are masked.
pub fn eci_predict<M: LanguageModel>(model: &M, head: &EciHead, prompts: &[&[usize]]) -> Result<Vec<usize>> {
    let s = model.config().max_seq_len;
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(16) {
        let (ids, lens) = prompt_batch(chunk, s)?;
        let mut g = Graph::new();
        let mut bound = model.bind(&mut g, false)?;
        head.bind(&mut g, &mut bound, false)?;
        let fw = model.forward_graph(&mut g, &bound, &ids)?;
        let logits = head.forward_graph(&mut g, &bound, fw.hidden, Some(&lens))?;
        out.extend(predict(g.value(logits)));
    }
    Ok(out)
}

pub fn eci_accuracy<M: LanguageModel>(model: &M, head: &EciHead, data: &[TrainExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prompts: Vec<&[usize]> = data.iter().map(|e| e.prompt.as_slice()).collect();
    let pred = eci_predict(model, head, &prompts)?;
    let hits = pred.iter().zip(data).filter(|(p, e)| **p == e.class).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Builds the trainer and runs it to completion.
pub fn train(model: LoraModel, head: EciHead, data: &[TrainExample], config: TrainConfig) -> Result<(Trainer, TrainReport)> {
    let mut trainer = Trainer::new(model, head, config)?;
    let records = trainer.run(data, |_, _| true)?;
    let final_accuracy = trainer.accuracy(data)?;
    Ok((trainer, TrainReport { records, final_accuracy }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Next-token training of every base weight on raw sequences (each at most
/// `max_seq_len` long). Returns the per-step losses.
pub fn pretrain(model: &mut Model, sequences: &[Vec<usize>], cfg: PretrainConfig) -> Result<Vec<f64>> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seq_len = model.config().max_seq_len;
    let examples: Vec<TrainExample> = sequences
        .iter()
        .map(|s| TrainExample {
            prompt: s[..1].to_vec(),
            completion: s[1..].to_vec(),
            class: 0,
        })
        .collect();
    model.set_trainable(true);
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batch_indices(examples.len(), cfg.batch_size, step, cfg.seed);
        let picked: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = assemble_batch(&picked, seq_len)?;
        let mut g = Graph::new();
        let bound: Bound = model.bind(&mut g, true)?;
        let out = model.forward_graph(&mut g, &bound, &batch.token_ids)?;
        let loss = g.cross_entropy(out.logits, &batch.textgen_targets, Some(IGNORE_INDEX))?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(loss)?;
        let grads = bound.collect_grads(&mut g);
        adamw_step(model.params_mut(), &grads, &mut state, cfg.lr, &adam)?;
        losses.push(value);
    }
    model.set_trainable(false);
    Ok(losses)
}
