#![allow(dead_code)]

use std::path::PathBuf;

use ecibench_core::eci::{EciConfig, EciHead};
use ecibench_core::lora::{inject_lora, LoraConfig};
use ecibench_core::prompts::{class_names, synthetic_records, BenchmarkRecord, PromptStyle};
use ecibench_core::train::{examples_from_records, TrainConfig, TrainExample, Trainer};
use ecibench_core::{Model, ModelConfig};

pub const CLASSES: [&str; 3] = ["yes", "no", "maybe"];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// d=64, 2 layers, 8 heads; 64 positions fit the plain prompt layout.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 8,
        max_seq_len: 64,
        ff_mult: 4,
        ..ModelConfig::default()
    }
}

pub fn desk_records(n: usize, seed: u64) -> Vec<BenchmarkRecord> {
    synthetic_records(n, &CLASSES, seed)
}

/// Settings used for desk runs: plain prompts, batch 8, lr 1e-3.
pub fn desk_train_config(total_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_start: 1e-3,
        seed,
        ..TrainConfig::new(total_steps, 8)
    }
}

/// A rank-16 LoRA model with a fresh head, ready for step 0.
pub fn desk_trainer(records: &[BenchmarkRecord], config: TrainConfig, seed: u64) -> (Trainer, Vec<TrainExample>) {
    let mcfg = desk_model_config();
    let classes = class_names(records);
    let data = examples_from_records(records, &classes, PromptStyle::Plain, mcfg.max_seq_len).unwrap();
    let base = Model::init(mcfg.clone(), seed).unwrap();
    let lora = inject_lora(base, LoraConfig::default(), seed + 1).unwrap();
    let head = EciHead::init(EciConfig::new(classes, mcfg.max_seq_len, mcfg.d_model), seed + 2).unwrap();
    (Trainer::new(lora, head, config).unwrap(), data)
}
