//! The gradient learner: a small MLP `h` mapping classifier logits to a
//! logit-space gradient, trained on labeled steps to minimize the fitness
//! loss `λ·ℓ(z − η·ḡ, y)` and used on unlabeled inputs to produce pseudo
//! gradients that stand in for `∂ℓ/∂z` during back-propagation.
//!
//! Predicted gradients are rescaled to `α·τ`, where `τ` is the norm of the
//! vanilla logit gradient of the current labeled step (learning) or of the
//! most recent labeled step (prediction).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::loss::{apply_mask, masked_cross_entropy, masked_grad_cross_entropy, masked_softmax, LossValue};
use crate::mlp::{Activation, MlpModel, ParamGrads, Tape};

/// Below this norm a raw prediction has no usable direction.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    /// Hidden widths of `h`, e.g. `[64, 16]`.
    pub arch: Vec<usize>,
    /// Magnitude ratio α ∈ [0, 1].
    pub alpha: f64,
    /// Loss scale λ > 0.
    pub lambda: f64,
    /// Learning rate of `h`; defaults to the classifier's rate.
    #[serde(default)]
    pub eta_hat: Option<f64>,
    /// Labeled steps before predictions are handed out.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Treat the normalization as a constant rescale in the backward pass
    /// instead of differentiating through it.
    #[serde(default)]
    pub straight_through: bool,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    #[serde(default)]
    pub activation: Activation,
}

fn default_warmup() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl LearnerConfig {
    /// Settings used for feature-transform streams.
    pub fn transform_defaults() -> Self {
        LearnerConfig {
            arch: vec![64, 16],
            alpha: 0.001,
            lambda: 0.30,
            eta_hat: None,
            warmup: default_warmup(),
            straight_through: false,
            use_bias: true,
            activation: Activation::Relu,
        }
    }

    /// Settings used for class-split streams.
    pub fn split_defaults() -> Self {
        LearnerConfig {
            arch: vec![128, 32],
            alpha: 0.005,
            lambda: 2.00,
            ..LearnerConfig::transform_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if let Some(e) = self.eta_hat {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::Config(format!("eta_hat must be >= 0, got {e}")));
            }
        }
        if self.arch.contains(&0) {
            return Err(Error::Config("zero-width layer in learner arch".into()));
        }
        Ok(())
    }
}

/// `ḡ = α·τ·g/‖g‖`; zero when `‖g‖ < EPS_NORM`.
pub fn normalize(g: &[f64], tau: f64, alpha: f64) -> Vec<f64> {
    let n = norm(g);
    if n < EPS_NORM {
        return vec![0.0; g.len()];
    }
    let s = alpha * tau / n;
    g.iter().map(|v| v * s).collect()
}

/// `λ·ℓ(z − η·ḡ, y)`, with the cross-entropy restricted to `mask` if given.
pub fn fitness_loss(
    z: &[f64],
    gbar: &[f64],
    y: usize,
    eta: f64,
    lambda: f64,
    mask: Option<&[usize]>,
) -> Result<LossValue> {
    if z.len() != gbar.len() {
        return Err(Error::dim("fitness_loss", z.len(), gbar.len()));
    }
    let shifted: Vec<f64> = z.iter().zip(gbar).map(|(a, b)| a - eta * b).collect();
    LossValue::new(lambda * masked_cross_entropy(&shifted, y, mask)?.value())
}

/// `ℓ(z − η·g, y)` on the raw, unnormalized prediction. Kept for analysis;
/// training uses [`fitness_loss`].
pub fn raw_fitness_loss(z: &[f64], g: &[f64], y: usize, eta: f64) -> Result<LossValue> {
    fitness_loss(z, g, y, eta, 1.0, None)
}

/// Norm of the batch-mean vanilla logit gradient.
pub fn batch_tau(z: &Matrix, y: &[usize], mask: Option<&[usize]>) -> Result<f64> {
    if z.rows() != y.len() || y.is_empty() {
        return Err(Error::dim("batch_tau", z.rows(), y.len()));
    }
    let mut mean = vec![0.0; z.cols()];
    for (i, &label) in y.iter().enumerate() {
        let g = masked_grad_cross_entropy(z.row(i), label, mask)?;
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    Ok(norm(&mean) / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnRecord {
    pub tau: f64,
    /// Batch-mean fitness loss before the update.
    pub fit_loss: f64,
    /// Mean cosine between raw predictions and the vanilla gradients.
    pub alignment: f64,
    /// True when a degenerate prediction suppressed the ω update.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientLearner {
    h: MlpModel,
    cfg: LearnerConfig,
    /// Classifier learning rate η used inside the fitness loss.
    eta: f64,
    tau_prev: Option<f64>,
    step_count: usize,
}

impl GradientLearner {
    /// `h` has input and output dimension `k` (the logit dimension).
    pub fn new<R: Rng + ?Sized>(k: usize, cfg: LearnerConfig, eta: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let dims = MlpModel::dims_from_hidden(k, &cfg.arch, k);
        let h = MlpModel::new(&dims, cfg.activation, cfg.use_bias, rng)?;
        GradientLearner::with_model(h, cfg, eta)
    }

    pub fn with_model(h: MlpModel, cfg: LearnerConfig, eta: f64) -> Result<Self> {
        cfg.validate()?;
        if h.input_dim() != h.output_dim() {
            return Err(Error::dim("GradientLearner", h.input_dim(), h.output_dim()));
        }
        if !(eta > 0.0) {
            return Err(Error::Config(format!("classifier eta must be > 0, got {eta}")));
        }
        Ok(GradientLearner {
            h,
            cfg,
            eta,
            tau_prev: None,
            step_count: 0,
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.h
    }

    pub fn model_mut(&mut self) -> &mut MlpModel {
        &mut self.h
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn eta_hat(&self) -> f64 {
        self.cfg.eta_hat.unwrap_or(self.eta)
    }

    pub fn tau_prev(&self) -> Option<f64> {
        self.tau_prev
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn logit_dim(&self) -> usize {
        self.h.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.h.num_params()
    }

    /// `g = h(z)`, one row per sample, no normalization.
    pub fn predict_raw(&self, z: &Matrix) -> Result<Matrix> {
        self.h.predict(z)
    }

    /// Components outside `mask` are dropped before normalizing.
    fn normalize_rows(&self, g: &Matrix, tau: f64, mask: Option<&[usize]>) -> Matrix {
        let mut out = Matrix::zeros(g.rows(), g.cols());
        for i in 0..g.rows() {
            let mut row = g.row(i).to_vec();
            apply_mask(&mut row, mask);
            out.row_mut(i).copy_from_slice(&normalize(&row, tau, self.cfg.alpha));
        }
        out
    }

    /// Batch-mean fitness loss for labeled logits, with `τ` taken from the
    /// same batch. `mask` restricts predictions and losses to a class subset.
    pub fn fitness_value(&self, z: &Matrix, y: &[usize], mask: Option<&[usize]>) -> Result<f64> {
        let tau = batch_tau(z, y, mask)?;
        let gbar = self.normalize_rows(&self.predict_raw(z)?, tau, mask);
        let mut total = 0.0;
        for (i, &label) in y.iter().enumerate() {
            total += fitness_loss(z.row(i), gbar.row(i), label, self.eta, self.cfg.lambda, mask)?.value();
        }
        Ok(total / y.len() as f64)
    }

    /// Gradient of [`GradientLearner::fitness_value`] w.r.t. ω, chained
    /// through `∂ℓ_fit/∂ḡ`, the normalization Jacobian and `h`. `None` when a
    /// prediction is degenerate.
    pub fn fitness_gradient(
        &self,
        z: &Matrix,
        y: &[usize],
        mask: Option<&[usize]>,
    ) -> Result<(Option<ParamGrads>, LearnRecord)> {
        let tau = batch_tau(z, y, mask)?;
        let (g, tape) = self.h.forward(z)?;
        let (n, k) = g.shape();
        let alpha = self.cfg.alpha;
        let (eta, lambda) = (self.eta, self.cfg.lambda);
        let mut upstream = Matrix::zeros(n, k);
        let mut fit = 0.0;
        let mut alignment = 0.0;
        let mut degenerate = false;
        for (i, &label) in y.iter().enumerate() {
            let mut gi = g.row(i).to_vec();
            apply_mask(&mut gi, mask);
            let gi = gi.as_slice();
            let gn = norm(gi);
            let vanilla = masked_grad_cross_entropy(z.row(i), label, mask)?;
            if gn < EPS_NORM {
                degenerate = true;
                fit += lambda * masked_cross_entropy(z.row(i), label, mask)?.value();
                continue;
            }
            let vn = norm(&vanilla);
            if vn > 0.0 {
                alignment += dot(gi, &vanilla) / (gn * vn);
            }
            let gbar = normalize(gi, tau, alpha);
            let shifted: Vec<f64> = z.row(i).iter().zip(&gbar).map(|(a, b)| a - eta * b).collect();
            fit += lambda * masked_cross_entropy(&shifted, label, mask)?.value();
            // ∂ℓ_fit/∂ḡ = −λη(softmax(z − ηḡ) − onehot(y)), batch-averaged.
            // Zero outside the mask, so the masked Jacobian below needs no
            // extra projection.
            let mut d_gbar = masked_softmax(&shifted, mask)?;
            d_gbar[label] -= 1.0;
            let c = -lambda * eta / n as f64;
            d_gbar.iter_mut().for_each(|v| *v *= c);
            // ∂ḡ/∂g = ατ(I/‖g‖ − ggᵀ/‖g‖³), symmetric.
            let scale = alpha * tau / gn;
            let row = upstream.row_mut(i);
            if self.cfg.straight_through {
                row.iter_mut().zip(&d_gbar).for_each(|(u, d)| *u = scale * d);
            } else {
                let proj = dot(gi, &d_gbar) / (gn * gn);
                row.iter_mut()
                    .zip(d_gbar.iter().zip(gi))
                    .for_each(|(u, (d, gv))| *u = scale * (d - proj * gv));
            }
        }
        let record = LearnRecord {
            tau,
            fit_loss: fit / n as f64,
            alignment: alignment / n as f64,
            skipped: degenerate,
        };
        if degenerate {
            return Ok((None, record));
        }
        let (grads, _) = self.h.backward(&tape, &upstream)?;
        Ok((Some(grads), record))
    }

    /// One learner update on a labeled batch. `z` are the classifier's logits
    /// for the batch, detached from the classifier update.
    pub fn learn_step(&mut self, z: &Matrix, y: &[usize], mask: Option<&[usize]>) -> Result<LearnRecord> {
        let (grads, record) = self.fitness_gradient(z, y, mask)?;
        if let Some(g) = grads {
            self.h.sgd_step(&g, self.eta_hat())?;
        }
        self.tau_prev = Some(record.tau);
        self.step_count += 1;
        Ok(record)
    }

    /// Record a labeled step's `τ` without training `h`.
    pub fn observe_tau(&mut self, tau: f64) {
        self.tau_prev = Some(tau);
        self.step_count += 1;
    }

    pub fn is_warm(&self) -> bool {
        self.step_count >= self.cfg.warmup
    }

    /// Normalized pseudo gradients for unlabeled logits, scaled by the most
    /// recent labeled `τ`. `None` during warmup.
    pub fn predict_for_unlabeled(&self, z: &Matrix, mask: Option<&[usize]>) -> Result<Option<Matrix>> {
        let tau = self
            .tau_prev
            .ok_or_else(|| Error::Protocol("gradient prediction before any labeled step".into()))?;
        if !self.is_warm() {
            return Ok(None);
        }
        Ok(Some(self.normalize_rows(&self.predict_raw(z)?, tau, mask)))
    }

    /// Normalizes externally supplied raw gradients exactly like predictions.
    pub fn normalize_external(&self, g: &Matrix, mask: Option<&[usize]>) -> Result<Matrix> {
        let tau = self
            .tau_prev
            .ok_or_else(|| Error::Protocol("normalization before any labeled step".into()))?;
        Ok(self.normalize_rows(g, tau, mask))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: LearnerConfig,
    dims: Vec<usize>,
    eta: f64,
    tau_prev: Option<f64>,
    step_count: usize,
}

impl GradientLearner {
    /// Writes weights and biases (one block each, per layer) plus a JSON
    /// sidecar with the configuration and step state.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut blocks = Vec::new();
        for (w, b) in self.h.weights().iter().zip(self.h.biases()) {
            blocks.push(w.clone());
            blocks.push(b.clone());
        }
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            dims: self.h.dims().to_vec(),
            eta: self.eta,
            tau_prev: self.tau_prev,
            step_count: self.step_count,
        };
        crate::container::write(path, &blocks, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (blocks, meta): (Vec<Matrix>, CheckpointMeta) = crate::container::read(path)?;
        let mut h = MlpModel::zeros(&meta.dims, meta.config.activation, meta.config.use_bias)?;
        if blocks.len() != 2 * h.num_layers() {
            return Err(Error::Format(format!(
                "checkpoint has {} blocks, expected {}",
                blocks.len(),
                2 * h.num_layers()
            )));
        }
        let mut flat = Vec::with_capacity(h.num_params());
        for (l, pair) in blocks.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            if w.shape() != h.weights()[l].shape() {
                return Err(Error::Format(format!("layer {l} weight shape {:?}", w.shape())));
            }
            flat.extend_from_slice(w.as_slice());
            if meta.config.use_bias {
                if b.shape() != h.biases()[l].shape() {
                    return Err(Error::Format(format!("layer {l} bias shape {:?}", b.shape())));
                }
                flat.extend_from_slice(b.as_slice());
            }
        }
        h.set_params_flat(&flat)?;
        let mut gl = GradientLearner::with_model(h, meta.config, meta.eta)?;
        gl.tau_prev = meta.tau_prev;
        gl.step_count = meta.step_count;
        Ok(gl)
    }
}

/// `θ ← θ − η·(∂z/∂θ)ᵀ ḡ`, batch-averaged: a labeled update with `∂ℓ/∂z`
/// replaced by the pseudo gradient.
pub fn apply_unlabeled_update(model: &mut MlpModel, tape: &Tape, gbar: &Matrix, eta: f64) -> Result<()> {
    let mut upstream = gbar.clone();
    upstream.scale(1.0 / gbar.rows().max(1) as f64);
    let (grads, _) = model.backward(tape, &upstream)?;
    model.sgd_step(&grads, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// U(−1, 1)
    Uniform,
    /// N(0, 1)
    Normal,
}

pub fn noise_gradient<R: Rng + ?Sized>(kind: NoiseKind, dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("noise dimension must be >= 1".into()));
    }
    Ok(match kind {
        NoiseKind::Uniform => (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        NoiseKind::Normal => (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
    })
}

pub fn noise_matrix<R: Rng + ?Sized>(kind: NoiseKind, rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend(noise_gradient(kind, cols, rng)?);
    }
    Matrix::from_vec(rows, cols, data)
}
