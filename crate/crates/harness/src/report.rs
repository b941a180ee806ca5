//! Report files for a set of runs: `summary.json`, `metrics.csv`,
//! `R_matrix_*.csv`, `trace.jsonl`, `records.json`, `curves.svg` and, for
//! sweeps, `sweep.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sscl_core::metrics::{export_confusion, format_sig12};

use crate::error::{HarnessError, Result};
use crate::run::{RunRecord, StepKind, StepTrace};
use crate::svg::{self, LineChart, Series};
use crate::sweep::{MetricStats, SweepPoint};

pub const SUMMARY: &str = "summary.json";
pub const METRICS: &str = "metrics.csv";
pub const TRACE: &str = "trace.jsonl";
pub const RECORDS: &str = "records.json";
pub const CURVES: &str = "curves.svg";
pub const SWEEP: &str = "sweep.csv";

/// Bins per task for the loss and fitness curves.
const BINS_PER_TASK: usize = 10;

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub step: StepTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub config_hash: String,
    pub method: String,
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    pub config_hashes: Vec<String>,
    pub acc: MetricStats,
    pub bwt: MetricStats,
    pub fwt: MetricStats,
    /// Mean metrics in percent, for display.
    pub percent: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepPoint>>,
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Output { path: path.to_path_buf(), source }
}

/// Creates `dir` if needed and checks that a file can be written there.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(output_err(dir))?;
    let probe = dir.join(".sscl-write-check");
    fs::write(&probe, b"").map_err(output_err(dir))?;
    fs::remove_file(&probe).map_err(output_err(dir))?;
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(output_err(&path))?;
    Ok(path)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub fn r_matrix_name(record: &RunRecord) -> String {
    match &record.label {
        Some(l) => format!("R_matrix_{}_{}.csv", file_safe(l), record.seed),
        None => format!("R_matrix_{}.csv", record.seed),
    }
}

pub fn metrics_csv(records: &[RunRecord]) -> String {
    let labelled = records.iter().any(|r| r.label.is_some());
    let mut out = String::from(if labelled { "value,seed,acc,bwt,fwt\n" } else { "seed,acc,bwt,fwt\n" });
    for r in records {
        if labelled {
            out.push_str(&csv_field(r.label.as_deref().unwrap_or("")));
            out.push(',');
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.seed,
            format_sig12(r.metrics.acc),
            format_sig12(r.metrics.bwt),
            format_sig12(r.metrics.fwt)
        ));
    }
    out
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("value,runs,failures,acc_mean,acc_std,bwt_mean,bwt_std,fwt_mean,fwt_std\n");
    let stat = |s: &Option<MetricStats>| match s {
        Some(s) => format!("{},{}", format_sig12(s.mean), format_sig12(s.std)),
        None => ",".to_string(),
    };
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&p.value),
            p.runs,
            p.failures.len(),
            stat(&p.acc),
            stat(&p.bwt),
            stat(&p.fwt)
        ));
    }
    out
}

pub fn summarize_records(records: &[RunRecord], sweep: Option<&[SweepPoint]>) -> Result<Summary> {
    if records.is_empty() {
        return Err(HarnessError::Config("report needs at least one run".into()));
    }
    let runs: Vec<RunSummary> = records
        .iter()
        .map(|r| RunSummary {
            seed: r.seed,
            label: r.label.clone(),
            config_hash: r.config_hash.clone(),
            method: r.config.method.name().to_string(),
            acc: r.metrics.acc,
            bwt: r.metrics.bwt,
            fwt: r.metrics.fwt,
            wall_clock_s: r.wall_clock_s,
        })
        .collect();
    let mut hashes: Vec<String> = Vec::new();
    for r in records {
        if !hashes.contains(&r.config_hash) {
            hashes.push(r.config_hash.clone());
        }
    }
    let col = |f: fn(&RunSummary) -> f64| MetricStats::of(&runs.iter().map(f).collect::<Vec<_>>()).expect("nonempty");
    let (acc, bwt, fwt) = (col(|r| r.acc), col(|r| r.bwt), col(|r| r.fwt));
    let percent = [("acc", acc.mean), ("bwt", bwt.mean), ("fwt", fwt.mean)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), format!("{:.2}%", 100.0 * v)))
        .collect();
    Ok(Summary {
        runs,
        config_hashes: hashes,
        acc,
        bwt,
        fwt,
        percent,
        sweep: sweep.map(<[SweepPoint]>::to_vec),
    })
}

/// Position of every labeled step on a fractional task axis: task `t` spans
/// `[t, t + 1]`.
fn step_positions(trace: &[StepTrace]) -> BTreeMap<usize, f64> {
    let mut per_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in trace.iter().filter(|t| t.kind == StepKind::Labeled) {
        per_task.entry(t.task).or_default().push(t.step);
    }
    let mut pos = BTreeMap::new();
    for (task, steps) in per_task {
        let n = steps.len() as f64;
        for (i, s) in steps.into_iter().enumerate() {
            pos.insert(s, task as f64 + (i + 1) as f64 / n);
        }
    }
    pos
}

/// Binned mean of a labeled-step quantity, averaged over runs.
fn binned(records: &[&RunRecord], value: fn(&StepTrace) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let pos = step_positions(&r.trace);
        for t in r.trace.iter().filter(|t| t.kind == StepKind::Labeled) {
            let (Some(v), Some(&x)) = (value(t), pos.get(&t.step)) else { continue };
            let bin = ((x * BINS_PER_TASK as f64).ceil() as usize).saturating_sub(1);
            let e = sums.entry(bin).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(bin, (s, n))| ((bin as f64 + 0.5) / BINS_PER_TASK as f64, s / n as f64))
        .collect()
}

fn accuracy_curve(records: &[&RunRecord]) -> Vec<(f64, f64)> {
    let mut sums: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let pos = step_positions(&r.trace);
        for c in &r.curve {
            let x = pos.get(&c.step).copied().unwrap_or(c.task as f64 + 1.0);
            let e = sums.entry(x.to_bits()).or_insert((x, 0.0, 0));
            e.1 += c.seen_accuracy;
            e.2 += 1;
        }
    }
    let mut pts: Vec<(f64, f64)> = sums.into_values().map(|(x, s, n)| (x, s / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn groups(records: &[RunRecord]) -> Vec<(String, Vec<&RunRecord>)> {
    let mut out: Vec<(String, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let name = r.label.clone().unwrap_or_else(|| r.config.method.name().to_string());
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(r),
            None => out.push((name, vec![r])),
        }
    }
    out
}

type Extract<'a> = dyn Fn(&[&RunRecord]) -> Vec<(f64, f64)> + 'a;

pub fn curves_svg(records: &[RunRecord]) -> String {
    let groups = groups(records);
    let panel = |title: &str, y: &str, f: &Extract| LineChart {
        title: title.into(),
        x_label: "task".into(),
        y_label: y.into(),
        series: groups
            .iter()
            .map(|(name, recs)| Series { name: name.clone(), points: f(recs) })
            .filter(|s| !s.points.is_empty())
            .collect(),
    };
    svg::render(&[
        panel("Training loss", "loss", &|r| binned(r, |t| t.loss)),
        panel("Accuracy on seen tasks", "accuracy", &accuracy_curve),
        panel("Fitness loss", "fitness loss", &|r| binned(r, |t| t.fit_loss)),
    ])
}

pub fn trace_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        for step in &r.trace {
            let line = TraceLine { seed: r.seed, label: r.label.clone(), step: step.clone() };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::from))
        .collect()
}

/// Writes every report file into `dir` and returns their paths.
pub fn write_report(dir: &Path, records: &[RunRecord], sweep: Option<&[SweepPoint]>) -> Result<Vec<PathBuf>> {
    let summary = summarize_records(records, sweep)?;
    ensure_writable(dir)?;
    let mut files = vec![
        write(dir, SUMMARY, &serde_json::to_string_pretty(&summary)?)?,
        write(dir, METRICS, &metrics_csv(records))?,
    ];
    for r in records {
        files.push(write(dir, &r_matrix_name(r), &export_confusion(&r.result))?);
    }
    files.push(write(dir, TRACE, &trace_jsonl(records)?)?);
    files.push(write(dir, RECORDS, &serde_json::to_string_pretty(records)?)?);
    files.push(write(dir, CURVES, &curves_svg(records))?);
    if let Some(points) = sweep {
        files.push(write(dir, SWEEP, &sweep_csv(points))?);
    }
    Ok(files)
}

/// Reads `records.json` (and `trace.jsonl` when present) back from a report
/// directory. Returns the records and any sweep points from the summary.
pub fn load_report(dir: &Path) -> Result<(Vec<RunRecord>, Option<Vec<SweepPoint>>)> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|source| HarnessError::ConfigRead { path, source })
    };
    let parse_err = |name: &str| {
        let path = dir.join(name);
        move |source| HarnessError::ConfigParse { path, source }
    };
    let mut records: Vec<RunRecord> = serde_json::from_str(&read(RECORDS)?).map_err(parse_err(RECORDS))?;
    if dir.join(TRACE).exists() {
        for line in parse_trace(&read(TRACE)?)? {
            if let Some(r) = records.iter_mut().find(|r| r.seed == line.seed && r.label == line.label) {
                r.trace.push(line.step);
            }
        }
    }
    let sweep = match read(SUMMARY) {
        Ok(text) => serde_json::from_str::<Summary>(&text).map_err(parse_err(SUMMARY))?.sweep,
        Err(_) => None,
    };
    Ok((records, sweep))
}
