//! Task streams, unlabeled pools and the probabilistic unlabeled-sampling gate.
//!
//! Data is synthetic: each class is an isotropic unit-variance Gaussian whose
//! mean sits on a hypersphere of configurable radius. Tasks are built either by
//! applying a fixed per-task feature transform to the whole dataset
//! (permutation or random orthogonal map) or by partitioning the classes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, orthogonal_factor, Matrix};
use crate::seeding::{self, Stream};

/// Unlabeled draws are made with replacement from the pool.
pub const DRAW_WITH_REPLACEMENT: bool = true;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    /// 0-based task index.
    pub t: usize,
    /// Global class index.
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    /// Drawn from one of the labeled classes, label discarded.
    Known,
    /// Drawn from a cluster that matches no labeled class.
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSample {
    pub x: Vec<f64>,
    pub source: SourceTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    None,
    FeaturePermutation,
    OrthogonalRotation,
    ClassSplit,
}

/// Isotropic Gaussian clusters with means on a sphere of radius `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClusters {
    pub means: Vec<Vec<f64>>,
    pub radius: f64,
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl GaussianClusters {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, dim: usize, radius: f64, rng: &mut R) -> Self {
        let means = (0..num_classes)
            .map(|_| random_direction(dim, rng).into_iter().map(|v| v * radius).collect())
            .collect();
        GaussianClusters { means, radius }
    }

    pub fn from_means(means: Vec<Vec<f64>>) -> Self {
        let radius = means.iter().map(|m| norm(m)).fold(0.0, f64::max);
        GaussianClusters { means, radius }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Radius of the sphere holding the class means, in units of the
    /// per-feature standard deviation.
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub seed: u64,
}

fn default_test_per_class() -> usize {
    20
}

fn default_radius() -> f64 {
    3.0
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, dim: usize, samples_per_class: usize, seed: u64) -> Self {
        SyntheticConfig {
            num_classes,
            dim,
            samples_per_class,
            test_per_class: default_test_per_class(),
            radius: default_radius(),
            seed,
        }
    }
}

/// A labeled dataset with a held-out test split. `t` is 0 on every sample
/// until a task builder assigns tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    /// Present for synthetic data; unlabeled pools reuse it.
    pub generator: Option<GaussianClusters>,
}

/// Deterministic Gaussian-cluster dataset, class-major order.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.dim == 0 || cfg.samples_per_class == 0 {
        return Err(Error::Config("synthetic dataset counts must be positive".into()));
    }
    if !(cfg.radius >= 0.0) || !cfg.radius.is_finite() {
        return Err(Error::Config(format!("radius must be finite and >= 0, got {}", cfg.radius)));
    }
    let mut rng = seeding::rng_for(cfg.seed, Stream::Data);
    let gen = GaussianClusters::new(cfg.num_classes, cfg.dim, cfg.radius, &mut rng);
    let draw = |n: usize, rng: &mut seeding::Rng| -> Vec<LabeledSample> {
        (0..cfg.num_classes)
            .flat_map(|y| (0..n).map(move |_| y))
            .map(|y| LabeledSample {
                x: gen.sample(y, rng),
                t: 0,
                y,
            })
            .collect()
    };
    let train = draw(cfg.samples_per_class, &mut rng);
    let test = draw(cfg.test_per_class, &mut rng);
    Ok(Dataset {
        dim: cfg.dim,
        num_classes: cfg.num_classes,
        train,
        test,
        generator: Some(gen),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureTransform {
    Identity,
    Permutation(Vec<usize>),
    Orthogonal(Matrix),
}

impl FeatureTransform {
    /// Output feature `i` is input feature `perm[i]` for permutations and
    /// `(Q x)_i` for orthogonal maps.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureTransform::Identity => x.to_vec(),
            FeatureTransform::Permutation(perm) => perm.iter().map(|&j| x[j]).collect(),
            FeatureTransform::Orthogonal(q) => (0..q.rows()).map(|i| dot(q.row(i), x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    /// Global class ids present in this task, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub transform: FeatureTransform,
}

/// Ordered task sequence with shared feature and label spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Continuum {
    pub kind: TransformKind,
    pub dim: usize,
    pub num_classes: usize,
    pub tasks: Vec<Task>,
}

/// One labeled mini-batch: indices into `tasks[task].train`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRef {
    pub task: usize,
    pub indices: Vec<usize>,
}

impl Continuum {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Whether evaluation should restrict logits to each task's classes.
    pub fn masks_by_task(&self) -> bool {
        self.kind == TransformKind::ClassSplit
    }

    /// Training order: tasks in sequence; within a task, `epochs` shuffled
    /// passes cut into batches of at most `batch_size`. With `epochs == 1`
    /// every labeled sample is visited exactly once.
    pub fn schedule(&self, batch_size: usize, epochs: usize, seed: u64) -> Result<Vec<BatchRef>> {
        if batch_size == 0 || epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        let mut rng = seeding::rng_for(seed, Stream::Order);
        let mut out = Vec::new();
        for task in &self.tasks {
            for _ in 0..epochs {
                let mut idx: Vec<usize> = (0..task.train.len()).collect();
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(batch_size) {
                    out.push(BatchRef {
                        task: task.index,
                        indices: chunk.to_vec(),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn batch(&self, b: &BatchRef) -> Vec<&LabeledSample> {
        b.indices.iter().map(|&i| &self.tasks[b.task].train[i]).collect()
    }
}

fn relabel(samples: &[LabeledSample], t: usize, tf: &FeatureTransform) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|s| LabeledSample {
            x: tf.apply(&s.x),
            t,
            y: s.y,
        })
        .collect()
}

/// Every task sees the whole dataset under its own fixed feature transform.
/// Task 0 is always the identity; with `TransformKind::None` every task is.
pub fn make_transform_tasks(
    dataset: &Dataset,
    num_tasks: usize,
    kind: TransformKind,
    seed: u64,
) -> Result<Continuum> {
    if kind == TransformKind::ClassSplit {
        return Err(Error::Config(format!("{kind:?} is not a feature-transform task kind")));
    }
    if num_tasks == 0 {
        return Err(Error::Config("need at least one task".into()));
    }
    let mut rng = seeding::rng_for(seed, Stream::TaskLayout);
    let d = dataset.dim;
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let transform = if t == 0 || kind == TransformKind::None {
            FeatureTransform::Identity
        } else if kind == TransformKind::FeaturePermutation {
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut rng);
            FeatureTransform::Permutation(perm)
        } else {
            let g: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
            FeatureTransform::Orthogonal(orthogonal_factor(&Matrix::from_vec(d, d, g)?)?)
        };
        tasks.push(Task {
            index: t,
            classes: (0..dataset.num_classes).collect(),
            train: relabel(&dataset.train, t, &transform),
            test: relabel(&dataset.test, t, &transform),
            transform,
        });
    }
    Ok(Continuum {
        kind,
        dim: d,
        num_classes: dataset.num_classes,
        tasks,
    })
}

/// Partitions the classes into `num_tasks` disjoint equal groups (after a
/// seeded shuffle of class ids). Labels stay global.
pub fn make_split_tasks(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<Continuum> {
    if num_tasks == 0 || !dataset.num_classes.is_multiple_of(num_tasks) {
        return Err(Error::Config(format!(
            "{} classes cannot be split evenly into {num_tasks} tasks",
            dataset.num_classes
        )));
    }
    let per_task = dataset.num_classes / num_tasks;
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    order.shuffle(&mut seeding::rng_for(seed, Stream::TaskLayout));
    let mut task_of_class = vec![0; dataset.num_classes];
    let mut tasks: Vec<Task> = order
        .chunks(per_task)
        .enumerate()
        .map(|(t, chunk)| {
            let mut classes = chunk.to_vec();
            classes.sort_unstable();
            for &c in &classes {
                task_of_class[c] = t;
            }
            Task {
                index: t,
                classes,
                train: Vec::new(),
                test: Vec::new(),
                transform: FeatureTransform::Identity,
            }
        })
        .collect();
    for s in &dataset.train {
        let t = task_of_class[s.y];
        tasks[t].train.push(LabeledSample { x: s.x.clone(), t, y: s.y });
    }
    for s in &dataset.test {
        let t = task_of_class[s.y];
        tasks[t].test.push(LabeledSample { x: s.x.clone(), t, y: s.y });
    }
    Ok(Continuum {
        kind: TransformKind::ClassSplit,
        dim: dataset.dim,
        num_classes: dataset.num_classes,
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub size: usize,
    /// Fraction of the pool drawn from the labeled classes.
    pub overlap: f64,
    /// Number of clusters that match no labeled class.
    #[serde(default = "default_novel_classes")]
    pub novel_classes: usize,
}

fn default_novel_classes() -> usize {
    10
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            size: 2000,
            overlap: 0.5,
            novel_classes: default_novel_classes(),
        }
    }
}

/// Means for novel clusters on the same sphere as the labeled ones, kept at
/// least one radius away from every labeled mean when the geometry allows.
fn novel_means<R: Rng + ?Sized>(gen: &GaussianClusters, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let dim = gen.dim();
    let far_enough = gen.radius;
    let min_dist = |c: &[f64]| {
        gen.means
            .iter()
            .map(|m| norm(&m.iter().zip(c).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min)
    };
    (0..count)
        .map(|_| {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..1000 {
                let c: Vec<f64> = random_direction(dim, rng).into_iter().map(|v| v * gen.radius).collect();
                let d = min_dist(&c);
                if d >= far_enough {
                    return c;
                }
                if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
                    best = Some((d, c));
                }
            }
            best.expect("at least one candidate").1
        })
        .collect()
}

/// Unlabeled pool mixing known-class samples (fraction `overlap`) with
/// samples from novel clusters.
pub fn make_unlabeled_pool(
    gen: &GaussianClusters,
    cfg: &PoolConfig,
    seed: u64,
) -> Result<(Vec<UnlabeledSample>, GaussianClusters)> {
    if !(0.0..=1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("overlap must be in [0,1], got {}", cfg.overlap)));
    }
    if cfg.novel_classes == 0 && cfg.overlap < 1.0 {
        return Err(Error::Config("overlap < 1 needs at least one novel class".into()));
    }
    let mut rng = seeding::rng_for(seed, Stream::Pool);
    let novel = GaussianClusters {
        means: novel_means(gen, cfg.novel_classes, &mut rng),
        radius: gen.radius,
    };
    let pool = (0..cfg.size)
        .map(|_| {
            // One gate draw per sample keeps the mixture exactly Bernoulli(overlap).
            let known = rng.random::<f64>() < cfg.overlap;
            if known {
                let c = rng.random_range(0..gen.num_classes());
                UnlabeledSample {
                    x: gen.sample(c, &mut rng),
                    source: SourceTag::Known,
                }
            } else {
                let c = rng.random_range(0..novel.num_classes());
                UnlabeledSample {
                    x: novel.sample(c, &mut rng),
                    source: SourceTag::Novel,
                }
            }
        })
        .collect();
    Ok((pool, novel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    /// Probability that a step draws unlabeled data.
    pub p: f64,
    pub unlabeled_batch: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            p: 0.15,
            unlabeled_batch: 4,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p must be in [0,1], got {}", self.p)));
        }
        if self.unlabeled_batch == 0 {
            return Err(Error::Config("unlabeled batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws an unlabeled batch with probability `p`.
///
/// The gate consumes exactly one uniform variate per call from its own
/// generator; pool indices come from a second generator. Neither touches the
/// labeled stream.
#[derive(Debug, Clone)]
pub struct UnlabeledSampler {
    policy: SamplingPolicy,
    gate: seeding::Rng,
    index: seeding::Rng,
}

impl UnlabeledSampler {
    pub fn new(policy: SamplingPolicy, seed: u64) -> Result<Self> {
        policy.validate()?;
        Ok(UnlabeledSampler {
            policy,
            gate: seeding::rng_for(seed, Stream::SamplingGate),
            index: seeding::rng_for(seed, Stream::SamplingIndex),
        })
    }

    pub fn policy(&self) -> SamplingPolicy {
        self.policy
    }

    /// Pool indices for this step; empty when the gate stays closed.
    pub fn draw_indices(&mut self, pool_len: usize) -> Result<Vec<usize>> {
        if pool_len == 0 {
            return Err(Error::Config("unlabeled pool is empty".into()));
        }
        let q: f64 = self.gate.random();
        if q < self.policy.p {
            Ok((0..self.policy.unlabeled_batch)
                .map(|_| self.index.random_range(0..pool_len))
                .collect())
        } else {
            Ok(Vec::new())
        }
    }

    pub fn draw<'a>(&mut self, pool: &'a [UnlabeledSample]) -> Result<Vec<&'a UnlabeledSample>> {
        Ok(self.draw_indices(pool.len())?.into_iter().map(|i| &pool[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetSidecar {
    format: String,
    dim: usize,
    num_classes: usize,
    config: Option<SyntheticConfig>,
}

fn samples_to_blocks(samples: &[LabeledSample], dim: usize) -> Result<(Matrix, Matrix)> {
    let x = Matrix::from_vec(
        samples.len(),
        dim,
        samples.iter().flat_map(|s| s.x.iter().copied()).collect(),
    )?;
    let y = Matrix::from_vec(samples.len(), 1, samples.iter().map(|s| s.y as f64).collect())?;
    Ok((x, y))
}

fn blocks_to_samples(x: &Matrix, y: &Matrix) -> Result<Vec<LabeledSample>> {
    if x.rows() != y.rows() || y.cols() != 1 {
        return Err(Error::Format("feature and label blocks disagree".into()));
    }
    (0..x.rows())
        .map(|i| {
            let v = y.get(i, 0);
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("label {v} is not a class index")));
            }
            Ok(LabeledSample {
                x: x.row(i).to_vec(),
                t: 0,
                y: v as usize,
            })
        })
        .collect()
}

impl Dataset {
    /// Writes `train_x, train_y, test_x, test_y[, class_means]` to the binary
    /// container with a JSON sidecar.
    pub fn save(&self, path: &Path, config: Option<&SyntheticConfig>) -> Result<()> {
        let (trx, try_) = samples_to_blocks(&self.train, self.dim)?;
        let (tex, tey) = samples_to_blocks(&self.test, self.dim)?;
        let mut blocks = vec![trx, try_, tex, tey];
        if let Some(g) = &self.generator {
            blocks.push(Matrix::from_rows(&g.means)?);
        }
        let meta = DatasetSidecar {
            format: "sscl-dataset".into(),
            dim: self.dim,
            num_classes: self.num_classes,
            config: config.cloned(),
        };
        container::write(path, &blocks, &meta)
    }

    pub fn load(path: &Path) -> Result<(Dataset, Option<SyntheticConfig>)> {
        let (blocks, meta): (Vec<Matrix>, DatasetSidecar) = container::read(path)?;
        if blocks.len() != 4 && blocks.len() != 5 {
            return Err(Error::Format(format!("dataset container has {} blocks", blocks.len())));
        }
        let generator = blocks.get(4).map(|m| {
            GaussianClusters::from_means((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
        });
        let ds = Dataset {
            dim: meta.dim,
            num_classes: meta.num_classes,
            train: blocks_to_samples(&blocks[0], &blocks[1])?,
            test: blocks_to_samples(&blocks[2], &blocks[3])?,
            generator,
        };
        Ok((ds, meta.config))
    }
}

/// A decoded IDX array, scaled to `[0, 1]` for unsigned-byte payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parses the IDX format used by the classic digit datasets.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("not an IDX file".into()));
    }
    let ty = bytes[2];
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = match ty {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        _ => return Err(Error::Format(format!("unknown IDX element type 0x{ty:02x}"))),
    };
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, dims need {}",
            body.len(),
            count * width
        )));
    }
    let data = body
        .chunks_exact(width)
        .map(|c| match ty {
            0x08 => c[0] as f64 / 255.0,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes(c.try_into().unwrap()) as f64,
            0x0D => f32::from_be_bytes(c.try_into().unwrap()) as f64,
            _ => f64::from_be_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok(IdxArray { dims, data })
}

fn idx_samples(images: &IdxArray, labels_raw: &[u8]) -> Result<(usize, Vec<LabeledSample>)> {
    if labels_raw.len() < 8 || labels_raw[2] != 0x08 || labels_raw[3] != 1 {
        return Err(Error::Format("label file must be a 1-D unsigned-byte IDX array".into()));
    }
    let labels = &labels_raw[8..];
    let n = *images.dims.first().ok_or_else(|| Error::Format("scalar IDX image file".into()))?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    let dim = images.data.len().checked_div(n).unwrap_or(0);
    let samples = (0..n)
        .map(|i| LabeledSample {
            x: images.data[i * dim..(i + 1) * dim].to_vec(),
            t: 0,
            y: labels[i] as usize,
        })
        .collect();
    Ok((dim, samples))
}

/// Loads an IDX image/label pair for training and another for testing.
pub fn load_idx_dataset(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<Dataset> {
    let (dim, train) = idx_samples(&parse_idx(&std::fs::read(train_images)?)?, &std::fs::read(train_labels)?)?;
    let (test_dim, test) = idx_samples(&parse_idx(&std::fs::read(test_images)?)?, &std::fs::read(test_labels)?)?;
    if dim != test_dim {
        return Err(Error::Format(format!("train dim {dim} != test dim {test_dim}")));
    }
    let num_classes = train.iter().chain(&test).map(|s| s.y + 1).max().unwrap_or(0);
    Ok(Dataset {
        dim,
        num_classes,
        train,
        test,
        generator: None,
    })
}
