//! Diagnostics over a step trace: cosine agreement between surrogate and
//! true gradients, fitness-loss trend and unlabeled-step statistics.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::report::TraceLine;
use crate::run::StepKind;

/// Share of labeled steps forming the "early" and "late" windows.
pub const WINDOW: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub early: f64,
    pub late: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub labeled_steps: usize,
    /// Labeled steps followed by a nonempty unlabeled draw.
    pub unlabeled_draws: usize,
    pub unlabeled_fraction: f64,
    pub applied_updates: usize,
    /// Drawn unlabeled samples whose source is a labeled class.
    pub known_fraction: Option<f64>,
    pub mean_pseudo_norm: Option<f64>,
    pub cosine: Option<Window>,
    pub fit_loss: Option<Window>,
    /// Late-window fitness loss below the early window.
    pub fit_loss_decreased: Option<bool>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Means over the first and last `WINDOW` share of a series.
pub fn windows(values: &[f64]) -> Option<Window> {
    if values.is_empty() {
        return None;
    }
    let w = ((values.len() as f64 * WINDOW).floor() as usize).max(1);
    Some(Window {
        early: mean(&values[..w])?,
        late: mean(&values[values.len() - w..])?,
    })
}

fn diagnose(seed: u64, label: Option<String>, lines: &[&TraceLine]) -> RunDiagnostics {
    let labeled: Vec<_> = lines.iter().filter(|l| l.step.kind == StepKind::Labeled).collect();
    let unlabeled: Vec<_> = lines.iter().filter(|l| l.step.kind == StepKind::Unlabeled).collect();
    let drawn: usize = unlabeled.iter().map(|l| l.step.samples).sum();
    let known: usize = unlabeled.iter().filter_map(|l| l.step.known).sum();
    let cos: Vec<f64> = labeled.iter().filter_map(|l| l.step.cosine).collect();
    let fit: Vec<f64> = labeled.iter().filter_map(|l| l.step.fit_loss).collect();
    let norms: Vec<f64> = unlabeled.iter().filter_map(|l| l.step.pseudo_norm).collect();
    let fit_loss = windows(&fit);
    RunDiagnostics {
        seed,
        label,
        labeled_steps: labeled.len(),
        unlabeled_draws: unlabeled.len(),
        unlabeled_fraction: if labeled.is_empty() { 0.0 } else { unlabeled.len() as f64 / labeled.len() as f64 },
        applied_updates: unlabeled.iter().filter(|l| l.step.applied == Some(true)).count(),
        known_fraction: (drawn > 0).then(|| known as f64 / drawn as f64),
        mean_pseudo_norm: mean(&norms),
        cosine: windows(&cos),
        fit_loss_decreased: fit_loss.as_ref().map(|w| w.late < w.early),
        fit_loss,
    }
}

/// One diagnostics entry per (seed, label) in order of first appearance.
pub fn analyze_trace(lines: &[TraceLine]) -> Result<Vec<RunDiagnostics>> {
    if lines.is_empty() {
        return Err(HarnessError::Config("trace is empty".into()));
    }
    let mut keys: Vec<(u64, Option<String>)> = Vec::new();
    for l in lines {
        let key = (l.seed, l.label.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    Ok(keys
        .into_iter()
        .map(|(seed, label)| {
            let own: Vec<&TraceLine> = lines.iter().filter(|l| l.seed == seed && l.label == label).collect();
            diagnose(seed, label, &own)
        })
        .collect())
}
