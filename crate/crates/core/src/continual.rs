//! Supervised continual strategies: plain SGD, episodic-memory gradient
//! projection, and accumulated-gradient alignment.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::loss::{masked_cross_entropy, masked_grad_cross_entropy};
use crate::mlp::{MlpModel, ParamGrads};
use crate::stream::LabeledSample;

pub fn flatten_grads(grads: &ParamGrads) -> Vec<f64> {
    grads.flatten()
}

pub fn unflatten_grads(template: &ParamGrads, flat: &[f64]) -> Result<ParamGrads> {
    template.unflatten_like(flat)
}

/// Per-task FIFO buffers of past samples.
#[derive(Debug, Clone, Default)]
pub struct EpisodicMemory {
    budget_per_task: usize,
    buffers: BTreeMap<usize, VecDeque<LabeledSample>>,
    current_task: Option<usize>,
}

impl EpisodicMemory {
    pub fn new(budget_per_task: usize) -> Self {
        EpisodicMemory {
            budget_per_task,
            buffers: BTreeMap::new(),
            current_task: None,
        }
    }

    pub fn budget_per_task(&self) -> usize {
        self.budget_per_task
    }

    /// Stores a sample of the current task, evicting that task's oldest
    /// sample once the budget is reached.
    pub fn insert(&mut self, sample: &LabeledSample) -> Result<()> {
        match self.current_task {
            Some(cur) if sample.t < cur => {
                return Err(Error::Protocol(format!(
                    "memory received task {} after task {cur} started",
                    sample.t
                )))
            }
            _ => self.current_task = Some(sample.t),
        }
        if self.budget_per_task == 0 {
            return Ok(());
        }
        let buf = self.buffers.entry(sample.t).or_default();
        if buf.len() == self.budget_per_task {
            buf.pop_front();
        }
        buf.push_back(sample.clone());
        Ok(())
    }

    pub fn task(&self, t: usize) -> Option<&VecDeque<LabeledSample>> {
        self.buffers.get(&t)
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.buffers.keys().copied()
    }

    /// One row per past task (`t < current`) with a nonempty buffer: the
    /// flattened gradient of that buffer's mean loss, restricted to the task's
    /// classes when `masks` is given.
    pub fn gradient_matrix(
        &self,
        model: &MlpModel,
        current: usize,
        masks: Option<&TaskMasks>,
    ) -> Result<(Vec<usize>, Matrix)> {
        let mut tasks = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (&t, buf) in self.buffers.range(..current) {
            if buf.is_empty() {
                continue;
            }
            let samples: Vec<&LabeledSample> = buf.iter().collect();
            let mask = masks.map(|m| m.get(t)).transpose()?;
            let (grads, _, _) = mean_loss_gradient(model, &samples, mask)?;
            tasks.push(t);
            rows.push(grads.flatten());
        }
        if rows.is_empty() {
            return Ok((tasks, Matrix::zeros(0, model.zero_grads().flat_len())));
        }
        Ok((tasks, Matrix::from_rows(&rows)?))
    }
}

pub fn stack_inputs(samples: &[&LabeledSample], dim: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::dim("stack_inputs", dim, s.x.len()));
        }
        data.extend_from_slice(&s.x);
    }
    Matrix::from_vec(samples.len(), dim, data)
}

/// Class subsets per task for task-incremental training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMasks(Vec<Vec<usize>>);

impl TaskMasks {
    pub fn new(classes: Vec<Vec<usize>>) -> Result<Self> {
        if classes.iter().any(Vec::is_empty) {
            return Err(Error::Config("every task needs at least one class".into()));
        }
        Ok(TaskMasks(classes))
    }

    pub fn get(&self, task: usize) -> Result<&[usize]> {
        self.0
            .get(task)
            .map(Vec::as_slice)
            .ok_or(Error::Index { index: task, len: self.0.len() })
    }
}

/// Gradients of the batch-mean cross-entropy (over `mask`'s classes when
/// given). Also returns the pre-update logits and the mean loss.
pub(crate) fn mean_loss_gradient(
    model: &MlpModel,
    samples: &[&LabeledSample],
    mask: Option<&[usize]>,
) -> Result<(ParamGrads, Matrix, f64)> {
    let x = stack_inputs(samples, model.input_dim())?;
    let (z, tape) = model.forward(&x)?;
    let n = samples.len() as f64;
    let mut upstream = Matrix::zeros(z.rows(), z.cols());
    let mut loss = 0.0;
    for (i, s) in samples.iter().enumerate() {
        loss += masked_cross_entropy(z.row(i), s.y, mask)?.value();
        let g = masked_grad_cross_entropy(z.row(i), s.y, mask)?;
        upstream.row_mut(i).iter_mut().zip(g).for_each(|(u, v)| *u = v / n);
    }
    let (grads, _) = model.backward(&tape, &upstream)?;
    Ok((grads, z, loss / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Offset added to every constraint: `<g̃, G_j> >= margin`.
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_qp_iters")]
    pub qp_max_iters: usize,
    #[serde(default = "default_qp_tol")]
    pub qp_tolerance: f64,
}

fn default_qp_iters() -> usize {
    2000
}

fn default_qp_tol() -> f64 {
    1e-9
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            margin: 0.0,
            qp_max_iters: default_qp_iters(),
            qp_tolerance: default_qp_tol(),
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.qp_tolerance > 0.0) || self.qp_max_iters == 0 {
            return Err(Error::Config(format!("invalid projection config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub g: Vec<f64>,
    /// Dual variables, one per constraint row.
    pub dual: Vec<f64>,
    /// False when the input already satisfied every constraint.
    pub projected: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Dual objective `½vᵀPv + qᵀv`.
pub fn dual_objective(p: &Matrix, q: &[f64], v: &[f64]) -> f64 {
    let pv: Vec<f64> = (0..p.rows()).map(|i| dot(p.row(i), v)).collect();
    0.5 * dot(v, &pv) + dot(q, v)
}

fn largest_eigenvalue(p: &Matrix) -> f64 {
    let k = p.rows();
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..k).map(|i| dot(p.row(i), &v)).collect();
        let n = norm(&w);
        if n == 0.0 {
            return 0.0;
        }
        let next = dot(&v, &w);
        v = w.into_iter().map(|x| x / n).collect();
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Solves `A x = b` for symmetric positive definite `A` via Cholesky.
fn solve_spd(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 1e-14 * a.get(i, i).abs().max(1e-300) {
                    return None;
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Some(x)
}

fn kkt_residual(p: &Matrix, q: &[f64], v: &[f64]) -> f64 {
    (0..v.len())
        .map(|j| {
            let grad = dot(p.row(j), v) + q[j];
            if v[j] > 0.0 {
                grad.abs()
            } else {
                (-grad).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Exact solve on the support guessed from `v`; accepted only if it is a KKT
/// point.
fn polish(p: &Matrix, q: &[f64], v: &[f64], tol: f64) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..v.len())
        .filter(|&j| v[j] > 0.0 || dot(p.row(j), v) + q[j] < 0.0)
        .collect();
    if support.is_empty() {
        return None;
    }
    let s = support.len();
    let mut a = Matrix::zeros(s, s);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a.set(r, c, p.get(i, j));
        }
    }
    let b: Vec<f64> = support.iter().map(|&i| -q[i]).collect();
    let sol = solve_spd(&a, &b)?;
    if sol.iter().any(|x| *x < 0.0) {
        return None;
    }
    let mut out = vec![0.0; v.len()];
    for (&i, x) in support.iter().zip(sol) {
        out[i] = x;
    }
    (kkt_residual(p, q, &out) <= tol).then_some(out)
}

fn accelerated_pg(p: &Matrix, q: &[f64], tol: f64, max_iters: usize) -> (Vec<f64>, bool, usize) {
    let k = q.len();
    let lipschitz = largest_eigenvalue(p);
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };
    // Momentum is restarted whenever the objective goes up.
    let mut v = vec![0.0; k];
    let mut y = v.clone();
    let mut momentum = 1.0f64;
    let mut last_obj = dual_objective(p, q, &v);
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let grad: Vec<f64> = (0..k).map(|j| dot(p.row(j), &y) + q[j]).collect();
        let next: Vec<f64> = (0..k).map(|j| (y[j] - step * grad[j]).max(0.0)).collect();
        let obj = dual_objective(p, q, &next);
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        if obj > last_obj {
            momentum = 1.0;
            y = v.clone();
            continue;
        }
        let beta = (momentum - 1.0) / next_momentum;
        y = next.iter().zip(&v).map(|(a, b)| (a + beta * (a - b)).max(0.0)).collect();
        v = next;
        momentum = next_momentum;
        last_obj = obj;
        if kkt_residual(p, q, &v) <= tol {
            return (v, true, iterations);
        }
        if iterations % 10 == 0 || iterations == 1 {
            if let Some(exact) = polish(p, q, &v, tol) {
                return (exact, true, iterations);
            }
        }
    }
    (v, false, iterations)
}

/// Active-set solve of `min ½vᵀPv + qᵀv, v >= 0` in the style of
/// Lawson-Hanson NNLS. `None` if a sub-system is singular or the iteration
/// budget runs out.
fn active_set(p: &Matrix, q: &[f64], tol: f64, max_iters: usize) -> Option<(Vec<f64>, usize)> {
    let k = q.len();
    let mut v = vec![0.0; k];
    let mut passive = vec![false; k];
    let mut iterations = 0;
    loop {
        let w: Vec<f64> = (0..k).map(|j| -(dot(p.row(j), &v) + q[j])).collect();
        let entering = (0..k)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = entering else {
            return Some((v, iterations));
        };
        passive[j] = true;
        loop {
            iterations += 1;
            if iterations > max_iters {
                return None;
            }
            let support: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let s = support.len();
            let mut a = Matrix::zeros(s, s);
            for (r, &i) in support.iter().enumerate() {
                for (c, &jj) in support.iter().enumerate() {
                    a.set(r, c, p.get(i, jj));
                }
            }
            let b: Vec<f64> = support.iter().map(|&i| -q[i]).collect();
            let sol = solve_spd(&a, &b)?;
            if sol.iter().all(|x| *x > 0.0) {
                v = vec![0.0; k];
                for (&i, x) in support.iter().zip(sol) {
                    v[i] = x;
                }
                break;
            }
            // Step toward the sub-problem solution until a variable hits zero.
            let mut t = 1.0f64;
            for (&i, &x) in support.iter().zip(&sol) {
                if x <= 0.0 {
                    t = t.min(v[i] / (v[i] - x));
                }
            }
            for (&i, &x) in support.iter().zip(&sol) {
                v[i] += t * (x - v[i]);
                if v[i] <= 1e-15 {
                    v[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
}

/// Projects `g` onto `{v : <v, G_j> >= margin ∀j}` through the k-dimensional
/// dual `min ½vᵀ(GGᵀ)v + (Gg − margin)ᵀv, v >= 0`, recovering `g + Gᵀv*`.
///
/// The dual is solved exactly by an active-set method. When a sub-system is
/// singular (more constraints than parameters) it falls back to projected
/// gradient with Nesterov momentum and step `1/λ_max(GGᵀ)`, trying an exact
/// solve on the current support every few iterations. Running out of
/// iterations is reported through `converged` with the best iterate.
pub fn gem_project(g: &[f64], constraints: &Matrix, cfg: &ProjectionConfig) -> Result<Projection> {
    cfg.validate()?;
    let k = constraints.rows();
    if k > 0 && constraints.cols() != g.len() {
        return Err(Error::dim("gem_project", g.len(), constraints.cols()));
    }
    let q: Vec<f64> = (0..k).map(|j| dot(constraints.row(j), g) - cfg.margin).collect();
    if q.iter().all(|&c| c >= 0.0) {
        return Ok(Projection {
            g: g.to_vec(),
            dual: vec![0.0; k],
            projected: false,
            converged: true,
            iterations: 0,
        });
    }
    let p = constraints.matmul_t(constraints)?;
    let tol = cfg.qp_tolerance;
    let exact = active_set(&p, &q, tol, cfg.qp_max_iters)
        .filter(|(v, _)| kkt_residual(&p, &q, v) <= tol);
    let (v, converged, iterations) = match exact {
        Some((v, it)) => (v, true, it),
        None => accelerated_pg(&p, &q, tol, cfg.qp_max_iters),
    };
    let mut out = g.to_vec();
    for (j, &vj) in v.iter().enumerate() {
        if vj != 0.0 {
            out.iter_mut().zip(constraints.row(j)).for_each(|(o, c)| *o += vj * c);
        }
    }
    Ok(Projection {
        g: out,
        dual: v,
        projected: true,
        converged,
        iterations,
    })
}

/// Decayed running sum of applied gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorState {
    pub g_acc: Vec<f64>,
    pub gamma: f64,
}

impl AccumulatorState {
    pub fn new(dim: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1], got {gamma}")));
        }
        Ok(AccumulatorState {
            g_acc: vec![0.0; dim],
            gamma,
        })
    }
}

/// Keeps `g` in the half-space `<v, g_acc> >= 0` (single-constraint
/// projection), then folds the result into the accumulator.
pub fn dcl_align(g: &[f64], acc: &mut AccumulatorState) -> Result<Vec<f64>> {
    if acc.g_acc.len() != g.len() {
        return Err(Error::dim("dcl_align", acc.g_acc.len(), g.len()));
    }
    let d = dot(g, &acc.g_acc);
    let nn = dot(&acc.g_acc, &acc.g_acc);
    let out: Vec<f64> = if d >= 0.0 || nn == 0.0 {
        g.to_vec()
    } else {
        let s = d / nn;
        g.iter().zip(&acc.g_acc).map(|(a, b)| a - s * b).collect()
    };
    for (a, o) in acc.g_acc.iter_mut().zip(&out) {
        *a = acc.gamma * *a + o;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Strategy {
    Plain,
    Gem {
        #[serde(default)]
        projection: ProjectionConfig,
    },
    Dcl {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_gamma() -> f64 {
    0.9
}

/// What a labeled step leaves behind for the gradient learner and the trace.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub task: usize,
    pub loss: f64,
    /// Logits before the update, one row per sample.
    pub logits: Matrix,
    /// Batch-mean `∂ℓ/∂z`.
    pub dl_dz: Vec<f64>,
    /// `‖dl_dz‖`
    pub tau: f64,
    pub constraints: usize,
    pub projected: bool,
    pub qp_converged: bool,
}

/// Mutable state a strategy carries between steps.
#[derive(Debug, Clone)]
pub struct StrategyState {
    pub strategy: Strategy,
    pub memory: EpisodicMemory,
    pub accumulator: Option<AccumulatorState>,
    /// Restricts every loss to the sample's task classes when set.
    pub masks: Option<TaskMasks>,
}

impl StrategyState {
    pub fn new(strategy: Strategy, memory_budget: usize, param_count: usize) -> Result<Self> {
        let accumulator = match strategy {
            Strategy::Dcl { gamma } => Some(AccumulatorState::new(param_count, gamma)?),
            Strategy::Gem { projection } => {
                projection.validate()?;
                None
            }
            Strategy::Plain => None,
        };
        Ok(StrategyState {
            strategy,
            memory: EpisodicMemory::new(memory_budget),
            accumulator,
            masks: None,
        })
    }

    pub fn with_masks(mut self, masks: TaskMasks) -> Self {
        self.masks = Some(masks);
        self
    }
}

/// One labeled update: batch-mean gradient, strategy transform, SGD step,
/// then the batch goes into episodic memory.
pub fn observe_labeled(
    state: &mut StrategyState,
    model: &mut MlpModel,
    batch: &[&LabeledSample],
    eta: f64,
) -> Result<StepRecord> {
    let task = batch
        .first()
        .ok_or_else(|| Error::Protocol("empty labeled batch".into()))?
        .t;
    if batch.iter().any(|s| s.t != task) {
        return Err(Error::Protocol("labeled batch mixes tasks".into()));
    }
    let mask = state.masks.as_ref().map(|m| m.get(task)).transpose()?;
    let (grads, logits, loss) = mean_loss_gradient(model, batch, mask)?;
    let mut dl_dz = vec![0.0; logits.cols()];
    let n = batch.len() as f64;
    for (i, s) in batch.iter().enumerate() {
        let g = masked_grad_cross_entropy(logits.row(i), s.y, mask)?;
        dl_dz.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
    }
    let tau = norm(&dl_dz);

    let mut constraints = 0;
    let mut projected = false;
    let mut qp_converged = true;
    let update = match state.strategy {
        Strategy::Plain => grads,
        Strategy::Gem { projection } => {
            let (_, gmat) = state.memory.gradient_matrix(model, task, state.masks.as_ref())?;
            constraints = gmat.rows();
            if constraints == 0 {
                grads
            } else {
                let proj = gem_project(&grads.flatten(), &gmat, &projection)?;
                projected = proj.projected;
                qp_converged = proj.converged;
                if proj.projected {
                    grads.unflatten_like(&proj.g)?
                } else {
                    grads
                }
            }
        }
        Strategy::Dcl { .. } => {
            let acc = state
                .accumulator
                .as_mut()
                .ok_or_else(|| Error::Contract("DCL strategy without accumulator".into()))?;
            let aligned = dcl_align(&grads.flatten(), acc)?;
            grads.unflatten_like(&aligned)?
        }
    };
    model.sgd_step(&update, eta)?;
    for s in batch {
        state.memory.insert(s)?;
    }
    Ok(StepRecord {
        task,
        loss,
        logits,
        dl_dz,
        tau,
        constraints,
        projected,
        qp_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::seeding::rng_from_seed;
    use super::Strategy;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(t: usize, y: usize, x: Vec<f64>) -> LabeledSample {
        LabeledSample { x, t, y }
    }

    /// Brute-force dual: enumerate every support, solve exactly, keep the best
    /// KKT-feasible point.
    fn oracle_dual(p: &Matrix, q: &[f64]) -> Vec<f64> {
        let k = q.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..(1 << k) {
            let support: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
            let mut v = vec![0.0; k];
            if !support.is_empty() {
                // Gaussian elimination with partial pivoting.
                let s = support.len();
                let mut a: Vec<Vec<f64>> = support
                    .iter()
                    .map(|&i| {
                        let mut row: Vec<f64> = support.iter().map(|&j| p.get(i, j)).collect();
                        row.push(-q[i]);
                        row
                    })
                    .collect();
                let mut singular = false;
                for c in 0..s {
                    let piv = (c..s).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
                    if a[piv][c].abs() < 1e-14 {
                        singular = true;
                        break;
                    }
                    a.swap(c, piv);
                    for r in 0..s {
                        if r != c {
                            let f = a[r][c] / a[c][c];
                            for cc in c..=s {
                                a[r][cc] -= f * a[c][cc];
                            }
                        }
                    }
                }
                if singular {
                    continue;
                }
                for (r, &i) in support.iter().enumerate() {
                    v[i] = a[r][s] / a[r][r];
                }
            }
            if v.iter().any(|x| *x < -1e-12) {
                continue;
            }
            let feasible = (0..k).all(|j| dot(p.row(j), &v) + q[j] >= -1e-9);
            if !feasible {
                continue;
            }
            let obj = dual_objective(p, q, &v);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, v));
            }
        }
        best.expect("a KKT point exists for a convex QP").1
    }

    #[test]
    fn flatten_round_trip_and_inner_products() {
        let mut rng = rng_from_seed(1);
        let m = MlpModel::new(&[3, 5, 2], Activation::Relu, true, &mut rng).unwrap();
        let tpl = m.zero_grads();
        let a_flat: Vec<f64> = (0..tpl.flat_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_flat: Vec<f64> = (0..tpl.flat_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = unflatten_grads(&tpl, &a_flat).unwrap();
        let b = unflatten_grads(&tpl, &b_flat).unwrap();
        assert_eq!(flatten_grads(&a), a_flat);
        assert_eq!(tpl.flat_len(), 3 * 5 + 5 + 5 * 2 + 2);
        let per_layer: f64 = a
            .weights
            .iter()
            .zip(&b.weights)
            .chain(a.biases.iter().zip(&b.biases))
            .map(|(x, y)| x.frobenius_dot(y).unwrap())
            .sum();
        assert!((dot(&a_flat, &b_flat) - per_layer).abs() < 1e-12);
        assert!(unflatten_grads(&tpl, &a_flat[1..]).is_err());
    }

    #[test]
    fn feasible_gradient_is_returned_exactly() {
        let g = vec![1.0, 2.0, -0.5];
        let c = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let p = gem_project(&g, &c, &ProjectionConfig::default()).unwrap();
        assert!(!p.projected);
        assert_eq!(p.g, g);
        let none = gem_project(&g, &Matrix::zeros(0, 3), &ProjectionConfig::default()).unwrap();
        assert_eq!(none.g, g);
    }

    #[test]
    fn single_constraint_closed_form() {
        let g = [1.0, -1.0];
        let c = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let p = gem_project(&g, &c, &ProjectionConfig::default()).unwrap();
        assert!(p.projected && p.converged);
        assert!((p.g[0] - 1.0).abs() < 1e-12 && p.g[1].abs() < 1e-12);
        // Dense grid over v >= 0 finds the same dual optimum (v* = 1).
        let pm = c.matmul_t(&c).unwrap();
        let q = [dot(c.row(0), &g)];
        let best = (0..=40_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|a, b| dual_objective(&pm, &q, &[*a]).total_cmp(&dual_objective(&pm, &q, &[*b])))
            .unwrap();
        assert!((best - p.dual[0]).abs() < 1e-4);
    }

    #[test]
    fn two_constraints_match_brute_force() {
        let mut rng = rng_from_seed(42);
        for _ in 0..50 {
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = Matrix::from_vec(2, 5, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let proj = gem_project(&g, &c, &ProjectionConfig::default()).unwrap();
            for j in 0..2 {
                assert!(dot(&proj.g, c.row(j)) >= -1e-9);
            }
            if proj.projected {
                let p = c.matmul_t(&c).unwrap();
                let q: Vec<f64> = (0..2).map(|j| dot(c.row(j), &g)).collect();
                let v = oracle_dual(&p, &q);
                for (a, b) in v.iter().zip(&proj.dual) {
                    assert!((a - b).abs() < 1e-6, "{v:?} vs {:?}", proj.dual);
                }
            }
        }
    }

    #[test]
    fn projection_with_margin_respects_offset() {
        let g = [1.0, -1.0];
        let c = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let cfg = ProjectionConfig { margin: 0.5, ..Default::default() };
        let p = gem_project(&g, &c, &cfg).unwrap();
        assert!((p.g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dcl_cases() {
        let mut acc = AccumulatorState::new(2, 0.9).unwrap();
        assert_eq!(dcl_align(&[1.0, -1.0], &mut acc).unwrap(), vec![1.0, -1.0]);
        assert_eq!(acc.g_acc, vec![1.0, -1.0]);

        let mut acc = AccumulatorState { g_acc: vec![0.0, 2.0], gamma: 0.5 };
        let out = dcl_align(&[1.0, -1.0], &mut acc).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
        assert_eq!(acc.g_acc, vec![1.0, 1.0]);

        let mut acc = AccumulatorState { g_acc: vec![2.0, 2.0], gamma: 0.9 };
        assert_eq!(dcl_align(&[3.0, 3.0], &mut acc).unwrap(), vec![3.0, 3.0]);
        assert!(AccumulatorState::new(2, 0.0).is_err());
    }

    #[test]
    fn memory_is_fifo_per_task() {
        let mut m = EpisodicMemory::new(5);
        for i in 0..3 {
            m.insert(&sample(0, i, vec![i as f64])).unwrap();
        }
        assert_eq!(m.task(0).unwrap().len(), 3);
        for i in 3..7 {
            m.insert(&sample(0, i, vec![i as f64])).unwrap();
        }
        let ys: Vec<usize> = m.task(0).unwrap().iter().map(|s| s.y).collect();
        assert_eq!(ys, vec![2, 3, 4, 5, 6]);
        m.insert(&sample(1, 0, vec![0.0])).unwrap();
        assert!(matches!(m.insert(&sample(0, 0, vec![0.0])), Err(Error::Protocol(_))));
    }

    #[test]
    fn gradient_matrix_rows_track_past_tasks() {
        let mut rng = rng_from_seed(3);
        let model = MlpModel::new(&[2, 4, 3], Activation::Relu, true, &mut rng).unwrap();
        let mut m = EpisodicMemory::new(4);
        for t in 0..3 {
            for i in 0..3 {
                m.insert(&sample(t, i % 3, vec![t as f64, i as f64])).unwrap();
            }
            let (tasks, g) = m.gradient_matrix(&model, t, None).unwrap();
            assert_eq!(tasks, (0..t).collect::<Vec<_>>());
            assert_eq!(g.rows(), t);
            assert_eq!(g.cols(), model.num_params());
        }
    }

    fn toy_batch(t: usize, rng: &mut crate::seeding::Rng, n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| {
                let y = i % 3;
                let x = (0..4).map(|d| if d == y + t { 2.0 } else { 0.0 } + rng.random_range(-0.3..0.3)).collect();
                sample(t, y, x)
            })
            .collect()
    }

    #[test]
    fn plain_strategy_equals_sgd() {
        let mut rng = rng_from_seed(9);
        let model = MlpModel::new(&[4, 6, 3], Activation::Relu, true, &mut rng).unwrap();
        let batch = toy_batch(0, &mut rng, 5);
        let refs: Vec<&LabeledSample> = batch.iter().collect();

        let mut a = model.clone();
        let mut st = StrategyState::new(Strategy::Plain, 0, a.num_params()).unwrap();
        let rec = observe_labeled(&mut st, &mut a, &refs, 0.1).unwrap();

        let mut b = model.clone();
        let (g, _, loss) = mean_loss_gradient(&b, &refs, None).unwrap();
        b.sgd_step(&g, 0.1).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_eq!(rec.loss, loss);
        assert!((rec.tau - norm(&rec.dl_dz)).abs() == 0.0);

        let mut c = model.clone();
        let mut gem = StrategyState::new(Strategy::Gem { projection: Default::default() }, 10, c.num_params()).unwrap();
        observe_labeled(&mut gem, &mut c, &refs, 0.1).unwrap();
        assert_eq!(c.params_flat(), a.params_flat(), "first task has no constraints");

        let mixed = [&batch[0], &sample(1, 0, vec![0.0; 4])];
        assert!(observe_labeled(&mut st, &mut a, &mixed, 0.1).is_err());
        assert!(observe_labeled(&mut st, &mut a, &[], 0.1).is_err());
    }

    #[test]
    fn projected_step_protects_memory_loss() {
        // Search seeds for a step on task 1 that violates the task-0 constraint,
        // then compare memory loss after projected vs unprojected updates.
        let mut checked = 0;
        for seed in 0..40 {
            let mut rng = rng_from_seed(seed);
            let mut model = MlpModel::new(&[4, 8, 3], Activation::Relu, true, &mut rng).unwrap();
            let mut st = StrategyState::new(Strategy::Gem { projection: Default::default() }, 20, model.num_params()).unwrap();
            let t0 = toy_batch(0, &mut rng, 12);
            for chunk in t0.chunks(4) {
                let r: Vec<&LabeledSample> = chunk.iter().collect();
                observe_labeled(&mut st, &mut model, &r, 0.2).unwrap();
            }
            // Same inputs as task 0 with shifted labels: directly conflicting.
            let t1: Vec<LabeledSample> =
                t0[..6].iter().map(|s| sample(1, (s.y + 1) % 3, s.x.clone())).collect();
            let refs: Vec<&LabeledSample> = t1.iter().collect();
            let mem_owned: Vec<LabeledSample> = st.memory.task(0).unwrap().iter().cloned().collect();
            let mem: Vec<&LabeledSample> = mem_owned.iter().collect();
            let mem_loss = |m: &MlpModel| mean_loss_gradient(m, &mem, None).unwrap().2;

            let mut plain = model.clone();
            let (g, _, _) = mean_loss_gradient(&plain, &refs, None).unwrap();
            plain.sgd_step(&g, 0.05).unwrap();

            let mut gem = model.clone();
            let rec = observe_labeled(&mut st, &mut gem, &refs, 0.05).unwrap();
            if rec.projected {
                checked += 1;
                assert!(mem_loss(&gem) <= mem_loss(&plain) + 1e-12);
            }
        }
        assert!(checked > 0, "no seed produced a violated constraint");
    }

    #[test]
    fn masked_step_leaves_other_output_columns() {
        let mut rng = rng_from_seed(40);
        let mut model = MlpModel::new(&[3, 5, 4], Activation::Relu, true, &mut rng).unwrap();
        let before = model.clone();
        let masks = TaskMasks::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let mut st = StrategyState::new(Strategy::Plain, 4, model.num_params()).unwrap().with_masks(masks);
        let batch = [sample(1, 3, vec![0.5, -0.2, 0.9]), sample(1, 2, vec![-0.1, 0.4, 0.3])];
        let refs: Vec<_> = batch.iter().collect();
        let rec = observe_labeled(&mut st, &mut model, &refs, 0.1).unwrap();
        let w = &model.weights()[1];
        let w0 = &before.weights()[1];
        for r in 0..w.rows() {
            for c in 0..2 {
                assert_eq!(w.get(r, c), w0.get(r, c));
            }
        }
        assert_eq!(model.biases()[1].get(0, 0), before.biases()[1].get(0, 0));
        assert_eq!(rec.dl_dz[0], 0.0);
        assert!(st.masks.as_ref().unwrap().get(2).is_err());
        let bad = [sample(1, 0, vec![0.0; 3])];
        assert!(observe_labeled(&mut st, &mut model, &bad.iter().collect::<Vec<_>>(), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(
            seed in 0u64..10_000,
            k in 1usize..5,
            extra in 0usize..10,
        ) {
            let n = k + extra;
            let mut rng = rng_from_seed(seed);
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let cfg = ProjectionConfig::default();
            let once = gem_project(&g, &c, &cfg).unwrap();
            for j in 0..k {
                prop_assert!(dot(&once.g, c.row(j)) >= -cfg.qp_tolerance);
            }
            let twice = gem_project(&once.g, &c, &cfg).unwrap();
            for (a, b) in once.g.iter().zip(&twice.g) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn dcl_output_never_opposes_accumulator(
            g in prop::collection::vec(-5.0f64..5.0, 4),
            acc in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut state = AccumulatorState { g_acc: acc.clone(), gamma: 0.9 };
            let out = dcl_align(&g, &mut state).unwrap();
            prop_assert!(dot(&out, &acc) >= -1e-9);
        }
    }
}
