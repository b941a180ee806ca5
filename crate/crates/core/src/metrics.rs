//! Accuracy matrix and the continual-learning summaries derived from it.
//!
//! `R[i][j]` is the test accuracy on task `j` after training through task
//! `i`; `baseline[j]` is the accuracy of the untrained model on task `j`.
//! All values are raw fractions in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::continual::stack_inputs;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::loss::argmax;
use crate::mlp::MlpModel;
use crate::stream::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    r: Vec<Vec<f64>>,
    filled: Vec<bool>,
    baseline: Option<Vec<f64>>,
}

fn check_row(row: &[f64], t: usize) -> Result<()> {
    if row.len() != t {
        return Err(Error::dim("ResultMatrix row", t, row.len()));
    }
    if let Some(i) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!("accuracy {} outside [0,1]", row[i])));
    }
    Ok(())
}

impl ResultMatrix {
    pub fn new(num_tasks: usize) -> Self {
        ResultMatrix {
            r: vec![vec![0.0; num_tasks]; num_tasks],
            filled: vec![false; num_tasks],
            baseline: None,
        }
    }

    /// A complete matrix from rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = ResultMatrix::new(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            m.set_row(i, row)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.r.len()
    }

    pub fn set_row(&mut self, i: usize, row: Vec<f64>) -> Result<()> {
        let t = self.num_tasks();
        if i >= t {
            return Err(Error::Index { index: i, len: t });
        }
        check_row(&row, t)?;
        self.r[i] = row;
        self.filled[i] = true;
        Ok(())
    }

    pub fn set_baseline(&mut self, b: Vec<f64>) -> Result<()> {
        check_row(&b, self.num_tasks())?;
        self.baseline = Some(b);
        Ok(())
    }

    pub fn baseline(&self) -> Option<&[f64]> {
        self.baseline.as_deref()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.r
    }

    pub fn is_complete(&self) -> bool {
        self.filled.iter().all(|f| *f)
    }

    fn require_complete(&self) -> Result<()> {
        if self.num_tasks() == 0 {
            return Err(Error::UndefinedMetric("empty accuracy matrix".into()));
        }
        if !self.is_complete() {
            return Err(Error::UndefinedMetric("accuracy matrix has unfilled rows".into()));
        }
        Ok(())
    }
}

/// Mean accuracy on the final row.
pub fn acc(m: &ResultMatrix) -> Result<f64> {
    m.require_complete()?;
    let last = &m.r[m.num_tasks() - 1];
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean change on earlier tasks between learning them and the end.
pub fn bwt(m: &ResultMatrix) -> Result<f64> {
    m.require_complete()?;
    let t = m.num_tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric("backward transfer needs at least 2 tasks".into()));
    }
    let s: f64 = (0..t - 1).map(|i| m.r[t - 1][i] - m.r[i][i]).sum();
    Ok(s / (t - 1) as f64)
}

/// Mean gain over the untrained baseline on each task just before it is
/// learned.
pub fn fwt(m: &ResultMatrix) -> Result<f64> {
    m.require_complete()?;
    let t = m.num_tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric("forward transfer needs at least 2 tasks".into()));
    }
    let b = m
        .baseline
        .as_ref()
        .ok_or_else(|| Error::UndefinedMetric("forward transfer needs baseline accuracies".into()))?;
    let s: f64 = (1..t).map(|i| m.r[i - 1][i] - b[i]).sum();
    Ok(s / (t - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
}

pub fn summarize(m: &ResultMatrix) -> Result<MetricSummary> {
    Ok(MetricSummary { acc: acc(m)?, bwt: bwt(m)?, fwt: fwt(m)? })
}

/// Test accuracy of `model` on one task. With `mask`, prediction is the
/// argmax over the task's classes only.
pub fn evaluate_task(model: &MlpModel, task: &Task, mask: bool) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::Protocol(format!("task {} has no test samples", task.index)));
    }
    let refs: Vec<_> = task.test.iter().collect();
    let logits = model.predict(&stack_inputs(&refs, model.input_dim())?)?;
    let mut hits = 0usize;
    for (i, s) in task.test.iter().enumerate() {
        let z = logits.row(i);
        let pred = if mask {
            let local: Vec<f64> = task.classes.iter().map(|&c| z[c]).collect();
            task.classes[argmax(&local)]
        } else {
            argmax(z)
        };
        hits += usize::from(pred == s.y);
    }
    Ok(hits as f64 / task.test.len() as f64)
}

/// One row of the accuracy matrix: accuracy on every task, seen or not.
pub fn evaluate_all_tasks(model: &MlpModel, tasks: &[Task], mask: bool) -> Result<Vec<f64>> {
    tasks.iter().map(|t| evaluate_task(model, t, mask)).collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedMetric("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Decimal rendering with 12 significant digits, trailing zeros dropped.
pub fn format_sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// CSV with a `task` header row of column indices and one row per training
/// stage.
pub fn export_confusion(m: &ResultMatrix) -> String {
    let t = m.num_tasks();
    let mut out = String::from("task");
    for j in 0..t {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (i, row) in m.r.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push(',');
            out.push_str(&format_sig12(*v));
        }
        out.push('\n');
    }
    out
}

pub fn parse_confusion(csv: &str) -> Result<ResultMatrix> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty confusion CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"task") {
        return Err(Error::Format("confusion CSV must start with a task column".into()));
    }
    let t = cols.len() - 1;
    for (j, c) in cols[1..].iter().enumerate() {
        if c.trim() != j.to_string() {
            return Err(Error::Format(format!("unexpected column header {c:?}")));
        }
    }
    let mut rows = Vec::with_capacity(t);
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != t + 1 || cells[0].trim() != i.to_string() {
            return Err(Error::Format(format!("malformed confusion row {i}")));
        }
        let row = cells[1..]
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad cell {c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.len() != t {
        return Err(Error::Format(format!("expected {t} rows, found {}", rows.len())));
    }
    ResultMatrix::from_rows(rows)
}
