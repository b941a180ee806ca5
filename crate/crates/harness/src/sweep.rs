//! Seed runs and hyperparameter sweeps on a small thread pool. Each worker
//! owns its whole run; finished records travel back over a channel.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{HarnessError, Result};
use crate::run::{run_experiment, RunRecord};

pub const THREADS_ENV: &str = "SSCL_THREADS";

/// Worker count: `SSCL_THREADS` when set to a positive integer, otherwise the
/// available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone)]
pub struct Job {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub label: Option<String>,
}

/// Runs every job and returns the outcomes in job order.
pub fn run_jobs(jobs: &[Job], threads: usize) -> Vec<Result<RunRecord>> {
    let workers = threads.max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let outcome = run_experiment(&job.config, job.seed)
                    .map(|mut r| {
                        r.label = job.label.clone();
                        r
                    })
                    .map_err(|source| HarnessError::Run { seed: job.seed, source });
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<RunRecord>>> = (0..jobs.len()).map(|_| None).collect();
    for (i, outcome) in rx {
        slots[i] = Some(outcome);
    }
    slots
        .into_iter()
        .map(|s| s.expect("every job reports exactly once"))
        .collect()
}

/// All seeds of one config; the first failure aborts.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .map(|&seed| Job { config: cfg.clone(), seed, label: None })
        .collect();
    run_jobs(&jobs, thread_count()).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MetricStats { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub config_hash: String,
    pub runs: usize,
    pub acc: Option<MetricStats>,
    pub bwt: Option<MetricStats>,
    pub fwt: Option<MetricStats>,
    #[serde(default)]
    pub failures: Vec<FailedRun>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Successful runs, labelled with their swept value.
    pub records: Vec<RunRecord>,
}

/// One run per (value, seed). Configs are built and validated up front;
/// individual run failures are recorded on their point and do not stop the
/// sweep.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let cfg = axis.apply(base, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<Job> = values
        .iter()
        .zip(&configs)
        .flat_map(|(v, cfg)| {
            cfg.seeds.iter().map(move |&seed| Job {
                config: cfg.clone(),
                seed,
                label: Some(v.clone()),
            })
        })
        .collect();
    let outcomes = run_jobs(&jobs, thread_count());

    let mut points: Vec<SweepPoint> = values
        .iter()
        .zip(&configs)
        .map(|(v, cfg)| SweepPoint {
            value: v.clone(),
            config_hash: cfg.hash(),
            runs: 0,
            acc: None,
            bwt: None,
            fwt: None,
            failures: Vec::new(),
        })
        .collect();
    let mut records = Vec::new();
    let mut per_value: Vec<Vec<RunRecord>> = vec![Vec::new(); values.len()];
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let idx = values.iter().position(|v| Some(v) == job.label.as_ref()).expect("label from values");
        match outcome {
            Ok(r) => per_value[idx].push(r),
            Err(e) => points[idx].failures.push(FailedRun { seed: job.seed, error: e.to_string() }),
        }
    }
    for (point, recs) in points.iter_mut().zip(per_value) {
        point.runs = recs.len();
        let col = |f: fn(&RunRecord) -> f64| recs.iter().map(f).collect::<Vec<_>>();
        point.acc = MetricStats::of(&col(|r| r.metrics.acc));
        point.bwt = MetricStats::of(&col(|r| r.metrics.bwt));
        point.fwt = MetricStats::of(&col(|r| r.metrics.fwt));
        records.extend(recs);
    }
    Ok(SweepReport { axis, points, records })
}
