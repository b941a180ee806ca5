//! Experiment configuration. JSON documents map onto these types directly;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sscl_core::continual::Strategy;
use sscl_core::learner::{LearnerConfig, NoiseKind};
use sscl_core::stream::{PoolConfig, SamplingPolicy, TransformKind};
use sscl_core::Activation;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub kind: TransformKind,
    pub num_tasks: usize,
    /// Size of the global label space. Split streams divide it evenly.
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Class means sit on a sphere of this radius (unit noise per feature).
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Passes over each task's training data; 1 is the one-pass protocol.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub pool: PoolConfig,
    /// Data seed; the run seed is used when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_test_per_class() -> usize {
    20
}

fn default_radius() -> f64 {
    3.0
}

fn default_epochs() -> usize {
    1
}

impl StreamConfig {
    pub fn classes_per_task(&self) -> usize {
        match self.kind {
            TransformKind::ClassSplit => self.num_classes / self.num_tasks.max(1),
            _ => self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// What happens to an unlabeled batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "grad-learner")]
    GradLearner,
    #[serde(rename = "1-pl")]
    OneHotPl,
    #[serde(rename = "p-pl")]
    ProbabilisticPl,
    #[serde(rename = "noise-uniform")]
    NoiseUniform,
    #[serde(rename = "noise-normal")]
    NoiseNormal,
    #[serde(rename = "noise-uniform-normalized")]
    NoiseUniformNormalized,
    #[serde(rename = "noise-normal-normalized")]
    NoiseNormalNormalized,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::GradLearner => "grad-learner",
            Method::OneHotPl => "1-pl",
            Method::ProbabilisticPl => "p-pl",
            Method::NoiseUniform => "noise-uniform",
            Method::NoiseNormal => "noise-normal",
            Method::NoiseUniformNormalized => "noise-uniform-normalized",
            Method::NoiseNormalNormalized => "noise-normal-normalized",
        }
    }

    /// Noise distribution and whether it goes through magnitude normalization.
    pub fn noise(self) -> Option<(NoiseKind, bool)> {
        match self {
            Method::NoiseUniform => Some((NoiseKind::Uniform, false)),
            Method::NoiseNormal => Some((NoiseKind::Normal, false)),
            Method::NoiseUniformNormalized => Some((NoiseKind::Uniform, true)),
            Method::NoiseNormalNormalized => Some((NoiseKind::Normal, true)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub strategy: Strategy,
    pub method: Method,
    pub learner: LearnerConfig,
    pub policy: SamplingPolicy,
    pub classifier: ClassifierConfig,
    /// Classifier learning rate; the teacher and (by default) `h` reuse it.
    pub eta: f64,
    /// Labeled samples per step.
    pub batch_size: usize,
    /// Episodic-memory samples kept per task.
    pub memory_budget: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Evaluate every this many labeled steps in addition to task ends.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// On class-split streams, restrict every training loss and surrogate
    /// gradient to the current task's classes. Evaluation is always masked
    /// on such streams.
    #[serde(default = "default_true")]
    pub train_masking: bool,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Feature-transform reference: 5 permuted tasks over 10 classes with the
    /// learner settings used for such streams.
    pub fn transform_reference() -> Self {
        ExperimentConfig {
            stream: StreamConfig {
                kind: TransformKind::FeaturePermutation,
                num_tasks: 5,
                num_classes: 10,
                dim: 20,
                samples_per_class: 100,
                test_per_class: default_test_per_class(),
                radius: default_radius(),
                epochs: 1,
                pool: PoolConfig::default(),
                seed: None,
            },
            strategy: Strategy::Gem { projection: Default::default() },
            method: Method::GradLearner,
            learner: LearnerConfig::transform_defaults(),
            policy: SamplingPolicy { p: 0.15, unlabeled_batch: 4 },
            classifier: ClassifierConfig { hidden: vec![64, 64], activation: Activation::Relu },
            eta: 0.1,
            batch_size: 10,
            memory_budget: 50,
            seeds: (0..5).collect(),
            output_dir: None,
            eval_every: None,
            train_masking: true,
        }
    }

    /// Class-split reference: 25 classes in 5 tasks of 5, with the learner
    /// settings used for split streams.
    pub fn split_reference() -> Self {
        let mut cfg = ExperimentConfig::transform_reference();
        cfg.stream.kind = TransformKind::ClassSplit;
        cfg.stream.num_classes = 25;
        cfg.learner = LearnerConfig::split_defaults();
        cfg.policy.p = 0.30;
        cfg.seeds = (0..10).collect();
        cfg
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = ExperimentConfig::from_json(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        format!("{digest:x}")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let s = &self.stream;
        if s.num_tasks < 2 {
            return bad(format!("need at least 2 tasks, got {}", s.num_tasks));
        }
        if s.num_classes == 0 || s.dim == 0 || s.samples_per_class == 0 || s.test_per_class == 0 {
            return bad("stream counts must be positive".into());
        }
        if s.kind == TransformKind::ClassSplit && !s.num_classes.is_multiple_of(s.num_tasks) {
            return bad(format!("{} classes do not split evenly into {} tasks", s.num_classes, s.num_tasks));
        }
        if s.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&s.pool.overlap) || s.pool.size == 0 {
            return bad("pool needs size >= 1 and overlap in [0,1]".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be >= 1".into());
        }
        if self.classifier.hidden.contains(&0) {
            return bad("zero-width classifier layer".into());
        }
        if matches!(self.method, Method::OneHotPl | Method::ProbabilisticPl) && self.classifier.hidden.is_empty() {
            return bad("pseudo-labeling needs a classifier with at least one hidden layer".into());
        }
        self.policy.validate()?;
        self.learner.validate()?;
        if let Strategy::Gem { projection } = &self.strategy {
            projection.validate()?;
        }
        if let Strategy::Dcl { gamma } = self.strategy {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return bad(format!("gamma must be in (0,1], got {gamma}"));
            }
        }
        Ok(())
    }
}

/// Hyperparameter swept by `run_sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    P,
    Alpha,
    Lambda,
    Arch,
    Batch,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Arch => "arch",
            SweepAxis::Batch => "batch",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "p" => Ok(SweepAxis::P),
            "alpha" => Ok(SweepAxis::Alpha),
            "lambda" => Ok(SweepAxis::Lambda),
            "arch" => Ok(SweepAxis::Arch),
            "batch" => Ok(SweepAxis::Batch),
            other => Err(HarnessError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }

    /// A copy of `base` with this axis set to `value`. Architectures are
    /// written as widths joined by `x`, e.g. `64x16`; `batch` is the
    /// unlabeled batch size.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let float = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("{v:?} is not a number")))
        };
        match self {
            SweepAxis::P => cfg.policy.p = float(value)?,
            SweepAxis::Alpha => cfg.learner.alpha = float(value)?,
            SweepAxis::Lambda => cfg.learner.lambda = float(value)?,
            SweepAxis::Arch => {
                cfg.learner.arch = value
                    .split('x')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| HarnessError::Config(format!("bad architecture {value:?}")))?;
            }
            SweepAxis::Batch => {
                cfg.policy.unlabeled_batch = value
                    .trim()
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("bad batch size {value:?}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
