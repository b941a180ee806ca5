#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sscl_harness::{ExperimentConfig, Method};

/// Two tasks, two seeds, small enough for debug builds.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::transform_reference();
    cfg.stream.num_tasks = 2;
    cfg.stream.num_classes = 4;
    cfg.stream.dim = 6;
    cfg.stream.samples_per_class = 30;
    cfg.stream.test_per_class = 10;
    cfg.stream.pool.size = 50;
    cfg.classifier.hidden = vec![8];
    cfg.learner.arch = vec![8];
    cfg.learner.warmup = 2;
    cfg.policy.p = 0.5;
    cfg.method = Method::GradLearner;
    cfg.seeds = vec![0, 1];
    cfg
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub fn sscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sscl")).args(args).output().unwrap()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
