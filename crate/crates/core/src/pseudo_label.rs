//! Teacher-student pseudo-labeling baselines. A teacher (backbone plus one
//! linear head per task) is trained on the labeled stream; its predictions
//! on unlabeled inputs serve as targets for the student, either as a hard
//! label (one-hot) or as the full softmax distribution (probabilistic).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{apply_mask, argmax, cross_entropy, masked_softmax, softmax};
use crate::mlp::{Activation, MlpModel, Tape};
use crate::stream::LabeledSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoMode {
    OneHot,
    Probabilistic,
}

/// Pseudo target over the global class space.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoTarget {
    Label(usize),
    Distribution(Vec<f64>),
}

impl PseudoTarget {
    /// The label the target puts the most mass on.
    pub fn label(&self) -> usize {
        match self {
            PseudoTarget::Label(y) => *y,
            PseudoTarget::Distribution(p) => argmax(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    task: usize,
    /// Global ids of the head's outputs, in output order.
    classes: Vec<usize>,
    layer: MlpModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    backbone: MlpModel,
    heads: Vec<Head>,
    num_classes: usize,
}

impl TeacherModel {
    /// `dims` are the backbone widths, input first; the last entry is the
    /// feature width the heads read from. The backbone's output layer is
    /// activated.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, num_classes: usize, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("teacher backbone needs at least one layer".into()));
        }
        let backbone = MlpModel::new(dims, activation, true, rng)?.with_activated_output(true);
        Ok(TeacherModel { backbone, heads: Vec::new(), num_classes })
    }

    pub fn backbone(&self) -> &MlpModel {
        &self.backbone
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_classes(&self, task: usize) -> Option<&[usize]> {
        self.head(task).ok().map(|h| h.classes.as_slice())
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.heads.iter().map(|h| h.layer.num_params()).sum::<usize>()
    }

    fn head(&self, task: usize) -> Result<&Head> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or_else(|| Error::Protocol(format!("teacher has no head for task {task}")))
    }

    /// Adds a head for `task` if missing. Returns its index.
    pub fn ensure_head<R: Rng + ?Sized>(&mut self, task: usize, classes: &[usize], rng: &mut R) -> Result<usize> {
        if let Some(i) = self.heads.iter().position(|h| h.task == task) {
            if self.heads[i].classes != classes {
                return Err(Error::Protocol(format!("task {task} head created with different classes")));
            }
            return Ok(i);
        }
        if classes.is_empty() || classes.iter().any(|&c| c >= self.num_classes) {
            return Err(Error::Config(format!("invalid class set for task {task}")));
        }
        let width = self.backbone.output_dim();
        let layer = MlpModel::new(&[width, classes.len()], Activation::Identity, true, rng)?;
        self.heads.push(Head { task, classes: classes.to_vec(), layer });
        Ok(self.heads.len() - 1)
    }

    /// Head logits (task-local order) for a batch.
    pub fn forward_task(&self, x: &Matrix, task: usize) -> Result<Matrix> {
        let features = self.backbone.predict(x)?;
        self.head(task)?.layer.predict(&features)
    }

    fn forward_with_tapes(&self, x: &Matrix, head: usize) -> Result<(Matrix, Tape, Tape)> {
        let (features, bt) = self.backbone.forward(x)?;
        let (logits, ht) = self.heads[head].layer.forward(&features)?;
        Ok((logits, bt, ht))
    }

    /// Batch-mean cross-entropy on a single task's labeled batch, through the
    /// task's head. Labels are global ids.
    pub fn loss(&self, batch: &[&LabeledSample]) -> Result<f64> {
        let (task, x, local) = self.prepare(batch)?;
        let logits = self.forward_task(&x, task)?;
        let mut total = 0.0;
        for (i, &y) in local.iter().enumerate() {
            total += cross_entropy(logits.row(i), y)?.value();
        }
        Ok(total / local.len() as f64)
    }

    fn prepare(&self, batch: &[&LabeledSample]) -> Result<(usize, Matrix, Vec<usize>)> {
        let first = batch.first().ok_or_else(|| Error::Protocol("empty teacher batch".into()))?;
        let task = first.t;
        if batch.iter().any(|s| s.t != task) {
            return Err(Error::Protocol("teacher batch mixes tasks".into()));
        }
        let head = self.head(task)?;
        let local = batch
            .iter()
            .map(|s| {
                head.classes
                    .iter()
                    .position(|&c| c == s.y)
                    .ok_or_else(|| Error::Protocol(format!("label {} not in task {task} head", s.y)))
            })
            .collect::<Result<Vec<_>>>()?;
        let x = crate::continual::stack_inputs(batch, self.backbone.input_dim())?;
        Ok((task, x, local))
    }
}

/// One SGD step on cross-entropy through the backbone and the batch task's
/// head. A head for an unseen task is created first with `classes`.
pub fn train_teacher_step<R: Rng + ?Sized>(
    teacher: &mut TeacherModel,
    batch: &[&LabeledSample],
    classes: &[usize],
    eta: f64,
    rng: &mut R,
) -> Result<f64> {
    let task = batch.first().ok_or_else(|| Error::Protocol("empty teacher batch".into()))?.t;
    let head = teacher.ensure_head(task, classes, rng)?;
    let (_, x, local) = teacher.prepare(batch)?;
    let (logits, bt, ht) = teacher.forward_with_tapes(&x, head)?;
    let n = local.len() as f64;
    let mut upstream = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in local.iter().enumerate() {
        total += cross_entropy(logits.row(i), y)?.value();
        let mut g = softmax(logits.row(i));
        g[y] -= 1.0;
        upstream.row_mut(i).iter_mut().zip(g).for_each(|(u, v)| *u = v / n);
    }
    let (head_grads, feature_grad) = teacher.heads[head].layer.backward(&ht, &upstream)?;
    let (backbone_grads, _) = teacher.backbone.backward(&bt, &feature_grad)?;
    teacher.heads[head].layer.sgd_step(&head_grads, eta)?;
    teacher.backbone.sgd_step(&backbone_grads, eta)?;
    Ok(total / n)
}

/// Pseudo targets for unlabeled inputs from the head of `task`, mapped to the
/// global class space.
pub fn predict_pseudo_label(teacher: &TeacherModel, x: &Matrix, task: usize, mode: PseudoMode) -> Result<Vec<PseudoTarget>> {
    let logits = teacher.forward_task(x, task)?;
    let classes = &teacher.head(task)?.classes;
    Ok((0..logits.rows())
        .map(|i| match mode {
            PseudoMode::OneHot => PseudoTarget::Label(classes[argmax(logits.row(i))]),
            PseudoMode::Probabilistic => {
                let mut p = vec![0.0; teacher.num_classes];
                for (&c, v) in classes.iter().zip(softmax(logits.row(i))) {
                    p[c] = v;
                }
                PseudoTarget::Distribution(p)
            }
        })
        .collect())
}

/// Logit gradient `softmax(z) − p̂` of the student's loss against a target.
/// With a mask the softmax runs over the masked classes only and the
/// gradient is zero elsewhere.
pub fn pseudo_upstream(z: &[f64], target: &PseudoTarget, mask: Option<&[usize]>) -> Result<Vec<f64>> {
    let mut g = masked_softmax(z, mask)?;
    match target {
        PseudoTarget::Label(y) => {
            if *y >= z.len() {
                return Err(Error::Index { index: *y, len: z.len() });
            }
            if mask.is_some_and(|m| !m.contains(y)) {
                return Err(Error::Protocol(format!("pseudo label {y} outside the task's classes")));
            }
            g[*y] -= 1.0;
        }
        PseudoTarget::Distribution(p) => {
            if p.len() != z.len() {
                return Err(Error::dim("pseudo_upstream", z.len(), p.len()));
            }
            g.iter_mut().zip(p).for_each(|(a, b)| *a -= b);
            apply_mask(&mut g, mask);
        }
    }
    Ok(g)
}

/// One student SGD step on its batch-mean loss against pseudo targets.
pub fn student_update_with_pseudo(
    model: &mut MlpModel,
    x: &Matrix,
    targets: &[PseudoTarget],
    eta: f64,
    mask: Option<&[usize]>,
) -> Result<()> {
    if x.rows() != targets.len() {
        return Err(Error::dim("student_update_with_pseudo", x.rows(), targets.len()));
    }
    if targets.is_empty() {
        return Ok(());
    }
    let (z, tape) = model.forward(x)?;
    let n = targets.len() as f64;
    let mut upstream = Matrix::zeros(z.rows(), z.cols());
    for (i, t) in targets.iter().enumerate() {
        let g = pseudo_upstream(z.row(i), t, mask)?;
        upstream.row_mut(i).iter_mut().zip(g).for_each(|(u, v)| *u = v / n);
    }
    let (grads, _) = model.backward(&tape, &upstream)?;
    model.sgd_step(&grads, eta)
}
