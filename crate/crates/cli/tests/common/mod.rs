#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lcco::backbone::BackboneSpec;
use lcco::harness::data::write_set_dir;
use lcco::harness::synthetic::toy_set;
use lcco::harness::ExperimentConfig;
use lcco::nn::OptimizerConfig;

/// Small stub-backbone configuration with synthesised fixture embeddings.
pub fn small_config(resolution: usize, dim: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.resolution = resolution;
    cfg.model.coarse_stride = 8;
    cfg.model.backbone = BackboneSpec::stub();
    cfg.clip.dim = dim;
    cfg.train.prompt_vocabulary = ["cow", "sheep", "car", "dog", "boat", "bird"].map(String::from).to_vec();
    cfg.train.k = 3;
    cfg.train.seed = seed;
    cfg.train.steps = 10;
    cfg.train.optimizer = OptimizerConfig::Adam {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    cfg
}

/// Writes toy class directories `class_<seed>` and a manifest listing them.
pub fn write_toy_dataset(root: &Path, seeds: &[u64], per_class: usize, size: usize) -> PathBuf {
    let mut lines = String::new();
    for &s in seeds {
        let name = format!("class_{s}");
        write_set_dir(&root.join(&name), &toy_set(per_class, size, s)).unwrap();
        lines.push_str(&name);
        lines.push('\n');
    }
    let manifest = root.join("manifest.txt");
    std::fs::write(&manifest, lines).unwrap();
    manifest
}

pub fn lcco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcco"))
        .args(args)
        .output()
        .expect("spawn lcco")
}
