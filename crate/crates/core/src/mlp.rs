//! Fully connected networks with exact reverse-mode gradients.
//!
//! The same type backs the continual classifier, the gradient learner and the
//! pseudo-labeling teacher. Batches are stacked as rows; the final layer is
//! affine (logits) unless `activate_output` is set, which the teacher backbone
//! uses to expose hidden features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// Input dimension followed by every layer's output dimension.
    dims: Vec<usize>,
    /// `weights[i]` is `dims[i] × dims[i+1]`.
    weights: Vec<Matrix>,
    /// `biases[i]` is `1 × dims[i+1]`; held at zero when `use_bias` is off.
    biases: Vec<Matrix>,
    activation: Activation,
    use_bias: bool,
    activate_output: bool,
    #[serde(skip)]
    generation: u64,
}

/// Activations cached by [`MlpModel::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    dims: Vec<usize>,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

/// Parameter gradients laid out like the model: one weight and one bias block
/// per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    has_bias: bool,
}

impl MlpModel {
    /// Random initialization: He-uniform for ReLU, Glorot-uniform otherwise.
    /// Biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        use_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = MlpModel::zeros(dims, activation, use_bias)?;
        for (i, w) in model.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (dims[i] as f64, dims[i + 1] as f64);
            let limit = match activation {
                Activation::Relu => (6.0 / fan_in).sqrt(),
                _ => (6.0 / (fan_in + fan_out)).sqrt(),
            };
            w.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    pub fn zeros(dims: &[usize], activation: Activation, use_bias: bool) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output dimension, all positive; got {dims:?}"
            )));
        }
        let weights = dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect();
        let biases = dims[1..].iter().map(|&d| Matrix::zeros(1, d)).collect();
        Ok(MlpModel {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
            use_bias,
            activate_output: false,
            generation: 0,
        })
    }

    /// Expands the `(a, b, ...)` architecture shorthand, which lists hidden
    /// widths only, into `input → a → b → ... → output`.
    pub fn dims_from_hidden(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims
    }

    pub fn with_activated_output(mut self, on: bool) -> Self {
        self.activate_output = on;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims has >= 2 entries")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn uses_bias(&self) -> bool {
        self.use_bias
    }

    pub fn num_params(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[0] * w[1] + if self.use_bias { w[1] } else { 0 })
            .sum()
    }

    fn layer_activated(&self, layer: usize) -> bool {
        layer + 1 < self.weights.len() || self.activate_output
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("mlp_forward", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &Matrix) -> Result<Matrix> {
        let mut pre = input.matmul(&self.weights[layer])?;
        if self.use_bias {
            let b = self.biases[layer].as_slice();
            for r in 0..pre.rows() {
                pre.row_mut(r).iter_mut().zip(b).for_each(|(v, b)| *v += b);
            }
        }
        Ok(pre)
    }

    /// Forward pass over a batch (one sample per row). Returns the final
    /// layer output and the tape needed by [`MlpModel::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre_acts = Vec::with_capacity(self.num_layers());
        let mut current = x.clone();
        for layer in 0..self.num_layers() {
            let pre = self.affine(layer, &current)?;
            let mut out = pre.clone();
            if self.layer_activated(layer) {
                let act = self.activation;
                out.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            inputs.push(std::mem::replace(&mut current, out));
            pre_acts.push(pre);
        }
        Ok((
            current,
            Tape {
                generation: self.generation,
                dims: self.dims.clone(),
                inputs,
                pre: pre_acts,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut current = x.clone();
        for layer in 0..self.num_layers() {
            let mut out = self.affine(layer, &current)?;
            if self.layer_activated(layer) {
                let act = self.activation;
                out.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            current = out;
        }
        Ok(current)
    }

    /// Reverse pass. `upstream` is the gradient of the objective w.r.t. the
    /// forward output, one row per sample; any matrix of that shape is
    /// accepted, which is how predicted pseudo gradients are injected.
    ///
    /// Parameter gradients are summed over the batch rows; callers scale the
    /// upstream for mean objectives.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(ParamGrads, Matrix)> {
        if tape.dims != self.dims || tape.generation != self.generation {
            return Err(Error::Contract(
                "tape was recorded against a different or since-updated model".into(),
            ));
        }
        let expected = (tape.batch_size(), self.output_dim());
        if upstream.shape() != expected {
            return Err(Error::dim(
                "mlp_backward",
                format!("{expected:?}"),
                format!("{:?}", upstream.shape()),
            ));
        }
        let n = self.num_layers();
        let mut weights = vec![Matrix::zeros(0, 0); n];
        let mut biases = vec![Matrix::zeros(0, 0); n];
        let mut delta = upstream.clone();
        for layer in (0..n).rev() {
            if self.layer_activated(layer) {
                let act = self.activation;
                delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(tape.pre[layer].as_slice())
                    .for_each(|(d, p)| *d *= act.derivative(*p));
            }
            weights[layer] = tape.inputs[layer].t_matmul(&delta)?;
            biases[layer] = if self.use_bias {
                let mut b = Matrix::zeros(1, delta.cols());
                for r in 0..delta.rows() {
                    b.as_mut_slice().iter_mut().zip(delta.row(r)).for_each(|(o, v)| *o += v);
                }
                b
            } else {
                Matrix::zeros(1, delta.cols())
            };
            delta = delta.matmul_t(&self.weights[layer])?;
        }
        Ok((
            ParamGrads {
                weights,
                biases,
                has_bias: self.use_bias,
            },
            delta,
        ))
    }

    /// `θ ← θ − η·grad`
    pub fn sgd_step(&mut self, grads: &ParamGrads, eta: f64) -> Result<()> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {eta}")));
        }
        self.check_grads(grads)?;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.axpy(-eta, g)?;
        }
        if self.use_bias {
            for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
                b.axpy(-eta, g)?;
            }
        }
        self.generation += 1;
        Ok(())
    }

    fn check_grads(&self, grads: &ParamGrads) -> Result<()> {
        let ok = grads.weights.len() == self.weights.len()
            && grads.biases.len() == self.biases.len()
            && grads.weights.iter().zip(&self.weights).all(|(g, w)| g.shape() == w.shape())
            && grads.biases.iter().zip(&self.biases).all(|(g, b)| g.shape() == b.shape());
        if !ok {
            return Err(Error::dim("sgd_step", "gradients shaped like parameters", "mismatch"));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            weights: self.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: self.biases.iter().map(|b| Matrix::zeros(1, b.cols())).collect(),
            has_bias: self.use_bias,
        }
    }

    /// Parameters in the canonical flat layout shared with [`ParamGrads::flatten`].
    pub fn params_flat(&self) -> Vec<f64> {
        let view = ParamGrads {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            has_bias: self.use_bias,
        };
        view.flatten()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let p = self.zero_grads().unflatten_like(flat)?;
        self.weights = p.weights;
        if self.use_bias {
            self.biases = p.biases;
        }
        self.generation += 1;
        Ok(())
    }
}

impl ParamGrads {
    /// Number of scalars in the flat layout.
    pub fn flat_len(&self) -> usize {
        let w: usize = self.weights.iter().map(Matrix::len).sum();
        let b: usize = if self.has_bias {
            self.biases.iter().map(Matrix::len).sum()
        } else {
            0
        };
        w + b
    }

    /// Canonical layout: for each layer in order, the weight block row-major,
    /// then that layer's bias (omitted for bias-free models).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            if self.has_bias {
                out.extend_from_slice(b.as_slice());
            }
        }
        out
    }

    /// Inverse of [`ParamGrads::flatten`], using `self` as the shape template.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParamGrads> {
        if flat.len() != self.flat_len() {
            return Err(Error::Contract(format!(
                "flat gradient has {} entries, layout needs {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let m = Matrix::from_vec(rows, cols, flat[offset..offset + rows * cols].to_vec());
            offset += rows * cols;
            m
        };
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(take(w.rows(), w.cols())?);
            biases.push(if self.has_bias {
                take(1, b.cols())?
            } else {
                Matrix::zeros(1, b.cols())
            });
        }
        Ok(ParamGrads {
            weights,
            biases,
            has_bias: self.has_bias,
        })
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|m| m.scale(s));
        self.biases.iter_mut().for_each(|m| m.scale(s));
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.flatten())
    }
}
