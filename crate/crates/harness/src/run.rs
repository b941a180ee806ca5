//! One experiment run: build the stream, then alternate labeled steps and
//! (gated) unlabeled steps, filling the accuracy matrix at every task end.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sscl_core::continual::{observe_labeled, stack_inputs, StrategyState, TaskMasks};
use sscl_core::learner::{apply_unlabeled_update, noise_matrix, normalize, GradientLearner};
use sscl_core::loss::{apply_mask, masked_grad_cross_entropy};
use sscl_core::metrics::{cosine_similarity, evaluate_all_tasks, summarize, MetricSummary, ResultMatrix};
use sscl_core::pseudo_label::{
    predict_pseudo_label, pseudo_upstream, student_update_with_pseudo, train_teacher_step, PseudoMode, TeacherModel,
};
use sscl_core::seeding::{rng_for, Stream};
use sscl_core::stream::{
    make_split_tasks, make_synthetic_dataset, make_transform_tasks, make_unlabeled_pool, Continuum, SourceTag,
    SyntheticConfig, TransformKind, UnlabeledSample, UnlabeledSampler, DRAW_WITH_REPLACEMENT,
};
use sscl_core::{Error, Matrix, MlpModel, Result};

use crate::config::{ExperimentConfig, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Labeled,
    Unlabeled,
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Index of the labeled step this record belongs to.
    pub step: usize,
    pub task: usize,
    pub kind: StepKind,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_loss: Option<f64>,
    /// Mean cosine between the method's surrogate gradient and the true
    /// label gradient on the labeled batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projected: Option<bool>,
    /// Unlabeled samples that came from labeled classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known: Option<usize>,
    /// Whether the unlabeled batch changed the classifier (false in warmup).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied: Option<bool>,
    /// Mean norm of the per-sample pseudo gradients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_norm: Option<f64>,
}

impl StepTrace {
    fn labeled(step: usize, task: usize, samples: usize) -> Self {
        StepTrace {
            step,
            task,
            kind: StepKind::Labeled,
            samples,
            loss: None,
            tau: None,
            fit_loss: None,
            cosine: None,
            projected: None,
            known: None,
            applied: None,
            pseudo_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub task: usize,
    /// Mean accuracy over the tasks seen so far.
    pub seen_accuracy: f64,
}

/// Protocol choices recorded with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub draws_with_replacement: bool,
    pub teacher_sees_memory: bool,
    pub task_masking: bool,
    pub train_masking: bool,
    pub labeled_steps: usize,
    pub classifier_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner_params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_params: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Free-form tag, e.g. the swept value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub metadata: RunMetadata,
    pub result: ResultMatrix,
    pub metrics: MetricSummary,
    #[serde(default)]
    pub curve: Vec<CurvePoint>,
    /// Written separately as JSON lines.
    #[serde(skip)]
    pub trace: Vec<StepTrace>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_clock_s = other.wall_clock_s;
        a == *other && self.trace == other.trace
    }
}

/// Task stream and unlabeled pool for a config and seed.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<(Continuum, Vec<UnlabeledSample>)> {
    let s = &cfg.stream;
    let data_seed = s.seed.unwrap_or(seed);
    let dataset = make_synthetic_dataset(&SyntheticConfig {
        num_classes: s.num_classes,
        dim: s.dim,
        samples_per_class: s.samples_per_class,
        test_per_class: s.test_per_class,
        radius: s.radius,
        seed: data_seed,
    })?;
    let continuum = match s.kind {
        TransformKind::ClassSplit => make_split_tasks(&dataset, s.num_tasks, data_seed)?,
        kind => make_transform_tasks(&dataset, s.num_tasks, kind, data_seed)?,
    };
    let generator = dataset
        .generator
        .as_ref()
        .ok_or_else(|| Error::Contract("synthetic dataset without generator".into()))?;
    let (pool, _) = make_unlabeled_pool(generator, &s.pool, data_seed)?;
    Ok((continuum, pool))
}

pub fn classifier_dims(cfg: &ExperimentConfig) -> Vec<usize> {
    MlpModel::dims_from_hidden(cfg.stream.dim, &cfg.classifier.hidden, cfg.stream.num_classes)
}

fn unlabeled_inputs(pool: &[UnlabeledSample], idx: &[usize], dim: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(&pool[i].x);
    }
    Matrix::from_vec(idx.len(), dim, data)
}

fn seen_accuracy(row: &[f64], task: usize) -> f64 {
    row[..=task].iter().sum::<f64>() / (task + 1) as f64
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let started = Instant::now();
    let (continuum, pool) = build_stream(cfg, seed)?;
    let mask = continuum.masks_by_task();
    let k = cfg.stream.num_classes;
    let dims = classifier_dims(cfg);
    let mut model = MlpModel::new(&dims, cfg.classifier.activation, true, &mut rng_for(seed, Stream::ClassifierInit))?;

    let mut result = ResultMatrix::new(continuum.num_tasks());
    result.set_baseline(evaluate_all_tasks(&model, &continuum.tasks, mask)?)?;

    let train_mask = mask && cfg.train_masking;
    let mut state = StrategyState::new(cfg.strategy, cfg.memory_budget, model.num_params())?;
    if train_mask {
        state = state.with_masks(TaskMasks::new(continuum.tasks.iter().map(|t| t.classes.clone()).collect())?);
    }
    let mut learner = match cfg.method {
        Method::GradLearner => Some(GradientLearner::new(
            k,
            cfg.learner.clone(),
            cfg.eta,
            &mut rng_for(seed, Stream::LearnerInit),
        )?),
        _ => None,
    };
    let mut teacher_rng = rng_for(seed, Stream::TeacherInit);
    let mut teacher = match cfg.method {
        Method::OneHotPl | Method::ProbabilisticPl => Some(TeacherModel::new(
            &dims[..dims.len() - 1],
            cfg.classifier.activation,
            k,
            &mut teacher_rng,
        )?),
        _ => None,
    };
    let pl_mode = match cfg.method {
        Method::ProbabilisticPl => PseudoMode::Probabilistic,
        _ => PseudoMode::OneHot,
    };
    let mut noise_rng = rng_for(seed, Stream::Noise);
    let mut sampler = UnlabeledSampler::new(cfg.policy, seed)?;
    let schedule = continuum.schedule(cfg.batch_size, cfg.stream.epochs, seed)?;

    let mut trace = Vec::with_capacity(schedule.len() * 2);
    let mut curve = Vec::new();
    let mut labeled_steps = 0usize;

    for (step, bref) in schedule.iter().enumerate() {
        let task = &continuum.tasks[bref.task];
        let batch = continuum.batch(bref);
        let labels: Vec<usize> = batch.iter().map(|s| s.y).collect();
        let mut rec = StepTrace::labeled(step, bref.task, batch.len());
        let classes = train_mask.then_some(task.classes.as_slice());

        if let Some(teacher) = teacher.as_mut() {
            train_teacher_step(teacher, &batch, &task.classes, cfg.eta, &mut teacher_rng)?;
            // Agreement between the teacher's target and the true label,
            // measured as gradient cosine on this batch.
            let x = stack_inputs(&batch, cfg.stream.dim)?;
            let targets = predict_pseudo_label(teacher, &x, bref.task, pl_mode)?;
            let z = model.predict(&x)?;
            let mut total = 0.0;
            for (i, t) in targets.iter().enumerate() {
                let truth = masked_grad_cross_entropy(z.row(i), labels[i], classes)?;
                total += cosine_similarity(&truth, &pseudo_upstream(z.row(i), t, classes)?)?;
            }
            rec.cosine = Some(total / targets.len() as f64);
        }

        let step_rec = observe_labeled(&mut state, &mut model, &batch, cfg.eta)?;
        rec.loss = Some(step_rec.loss);
        rec.tau = Some(step_rec.tau);
        rec.projected = Some(step_rec.projected);
        if let Some(gl) = learner.as_mut() {
            let l = gl.learn_step(&step_rec.logits, &labels, classes)?;
            rec.fit_loss = Some(l.fit_loss);
            rec.cosine = Some(l.alignment);
        }
        labeled_steps += 1;
        trace.push(rec);

        let idx = sampler.draw_indices(pool.len())?;
        if !idx.is_empty() {
            let warm = labeled_steps >= cfg.learner.warmup;
            let applied = cfg.method != Method::None && warm;
            let mut pseudo_norm = None;
            if applied {
                let x = unlabeled_inputs(&pool, &idx, cfg.stream.dim)?;
                pseudo_norm = Some(match cfg.method {
                    Method::OneHotPl | Method::ProbabilisticPl => {
                        let teacher = teacher.as_ref().expect("teacher exists for pseudo-label methods");
                        let targets = predict_pseudo_label(teacher, &x, bref.task, pl_mode)?;
                        let z = model.predict(&x)?;
                        let mut norms = 0.0;
                        for (i, t) in targets.iter().enumerate() {
                            norms += sscl_core::linalg::norm(&pseudo_upstream(z.row(i), t, classes)?);
                        }
                        student_update_with_pseudo(&mut model, &x, &targets, cfg.eta, classes)?;
                        norms / targets.len() as f64
                    }
                    method => {
                        let (z, tape) = model.forward(&x)?;
                        let gbar = if let Some(gl) = learner.as_ref() {
                            gl.predict_for_unlabeled(&z, classes)?
                                .ok_or_else(|| Error::Contract("learner cold after warmup".into()))?
                        } else {
                            let (kind, normalized) = method.noise().expect("remaining methods are noise");
                            let mut raw = noise_matrix(kind, z.rows(), z.cols(), &mut noise_rng)?;
                            for i in 0..raw.rows() {
                                apply_mask(raw.row_mut(i), classes);
                            }
                            if normalized {
                                let tau = step_rec.tau;
                                let mut out = Matrix::zeros(raw.rows(), raw.cols());
                                for i in 0..raw.rows() {
                                    out.row_mut(i).copy_from_slice(&normalize(raw.row(i), tau, cfg.learner.alpha));
                                }
                                out
                            } else {
                                raw
                            }
                        };
                        let mean_norm = (0..gbar.rows())
                            .map(|i| sscl_core::linalg::norm(gbar.row(i)))
                            .sum::<f64>()
                            / gbar.rows() as f64;
                        apply_unlabeled_update(&mut model, &tape, &gbar, cfg.eta)?;
                        mean_norm
                    }
                });
            }
            trace.push(StepTrace {
                kind: StepKind::Unlabeled,
                samples: idx.len(),
                known: Some(idx.iter().filter(|&&i| pool[i].source == SourceTag::Known).count()),
                applied: Some(applied),
                pseudo_norm,
                ..StepTrace::labeled(step, bref.task, 0)
            });
        }

        let last_of_task = schedule.get(step + 1).is_none_or(|next| next.task != bref.task);
        let periodic = cfg.eval_every.is_some_and(|e| labeled_steps.is_multiple_of(e));
        if last_of_task || periodic {
            let row = evaluate_all_tasks(&model, &continuum.tasks, mask)?;
            curve.push(CurvePoint {
                step,
                task: bref.task,
                seen_accuracy: seen_accuracy(&row, bref.task),
            });
            if last_of_task {
                result.set_row(bref.task, row)?;
            }
        }
    }

    let metrics = summarize(&result)?;
    Ok(RunRecord {
        seed,
        label: None,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        metadata: RunMetadata {
            draws_with_replacement: DRAW_WITH_REPLACEMENT,
            teacher_sees_memory: false,
            task_masking: mask,
            train_masking: train_mask,
            labeled_steps,
            classifier_params: model.num_params(),
            learner_params: learner.as_ref().map(|l| l.num_params()),
            teacher_params: teacher.as_ref().map(|t| t.num_params()),
        },
        result,
        metrics,
        curve,
        trace,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
