//! Labeled/unlabeled/augmented sample streams: a seeded synthetic
//! multi-class generator, a reader for the standard CIFAR-10 binary
//! distribution, label-preserving stochastic augmentation, and the batch
//! composition used by the semi-supervised trainer (M labeled rows, S
//! unlabeled rows, and the S augmented partners of those same rows).

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::pedcc::simplex_centroids;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}: invalid data: {detail}")]
    Format { path: String, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// An immutable in-memory dataset: row-major samples plus one integer
/// label per row, where −1 marks an unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<f64>,
    input_shape: Vec<usize>,
    labels: Vec<i64>,
    split: Split,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        samples: Vec<f64>,
        input_shape: Vec<usize>,
        labels: Vec<i64>,
        split: Split,
        class_count: usize,
    ) -> Result<Dataset> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(DataError::Argument(format!(
                "input_shape {input_shape:?} must be non-empty with positive extents"
            )));
        }
        if class_count < 2 {
            return Err(DataError::Argument(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        let dim: usize = input_shape.iter().product();
        if samples.len() != labels.len() * dim {
            return Err(DataError::Argument(format!(
                "sample buffer holds {} values, but {} labels × dim {dim} requires {}",
                samples.len(),
                labels.len(),
                labels.len() * dim
            )));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Argument(format!(
                "samples must be finite, found {bad}"
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y != -1 && !(0..class_count as i64).contains(&y) {
                return Err(DataError::Argument(format!(
                    "label {y} at row {i} is outside {{−1}} ∪ [0, {class_count})"
                )));
            }
        }
        Ok(Dataset {
            samples,
            input_shape,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened per-sample width.
    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.samples[index * d..(index + 1) * d]
    }

    /// Row indices that carry a label.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] >= 0).collect()
    }

    /// Row indices marked −1.
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] < 0).collect()
    }

    /// Gathers the given rows into a `[k, dim]` tensor.
    pub fn rows_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Argument(format!(
                    "row index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Tensor::from_vec(&[indices.len(), d], data)?)
    }

    /// The whole sample matrix as an `[N, dim]` tensor.
    pub fn samples_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            &[self.len(), self.dim()],
            self.samples.clone(),
        )?)
    }
}

/// One training batch: M labeled rows with their labels, S unlabeled rows,
/// and the S augmented partners, row-aligned with `u`.
pub struct SemiBatch {
    /// `[M, dim]` labeled samples.
    pub x: Tensor,
    /// Labels of `x`, length M.
    pub y: Vec<usize>,
    /// `[S, dim]` unlabeled samples.
    pub u: Tensor,
    /// `[S, dim]`; row i is an augmentation of `u` row i.
    pub u_aug: Tensor,
}

/// The available augmentation transforms. Image transforms expect
/// `[channels, height, width]` samples; `BoundedJitter` and `Rotation`
/// also work on flat vectors (rotation then acts in a random coordinate
/// plane), and `Cutout` on a vector zeroes randomly chosen coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    HorizontalFlip,
    ShiftCrop,
    BrightnessContrast,
    Rotation,
    Cutout,
    BoundedJitter,
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AugmentOp::HorizontalFlip => "horizontal_flip",
            AugmentOp::ShiftCrop => "shift_crop",
            AugmentOp::BrightnessContrast => "brightness_contrast",
            AugmentOp::Rotation => "rotation",
            AugmentOp::Cutout => "cutout",
            AugmentOp::BoundedJitter => "bounded_jitter",
        };
        write!(f, "{name}")
    }
}

/// One policy entry: the op fires with `probability`, parameterized by
/// `magnitude`. Magnitude bounds per op:
/// - `horizontal_flip`: ignored (use 0).
/// - `shift_crop`: maximum shift in pixels, ≥ 0.
/// - `brightness_contrast`: relative strength in [0, 1): brightness shifts
///   by U(−m, m), contrast scales by U(1−m, 1+m).
/// - `rotation`: maximum angle in radians, in [0, π].
/// - `cutout`: patch side in pixels (images) or number of zeroed
///   coordinates (vectors), ≥ 0.
/// - `bounded_jitter`: per-coordinate perturbation bound, ≥ 0; draws are
///   uniform on (−m, m), never Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentStep {
    pub op: AugmentOp,
    pub probability: f64,
    pub magnitude: f64,
}

/// An ordered augmentation policy; ops apply in list order, each gated by
/// its own probability draw from the supplied random stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentPolicy {
    pub steps: Vec<AugmentStep>,
}

impl AugmentPolicy {
    /// No-op policy.
    pub fn identity() -> AugmentPolicy {
        AugmentPolicy { steps: Vec::new() }
    }

    /// Default image policy: flip, small shifts, mild photometric jitter,
    /// and cutout. Additive Gaussian noise is deliberately absent: the
    /// consistency target only helps when augmented samples stay close to
    /// the data manifold.
    pub fn image_default() -> AugmentPolicy {
        AugmentPolicy {
            steps: vec![
                AugmentStep {
                    op: AugmentOp::HorizontalFlip,
                    probability: 0.5,
                    magnitude: 0.0,
                },
                AugmentStep {
                    op: AugmentOp::ShiftCrop,
                    probability: 1.0,
                    magnitude: 4.0,
                },
                AugmentStep {
                    op: AugmentOp::BrightnessContrast,
                    probability: 0.5,
                    magnitude: 0.2,
                },
                AugmentStep {
                    op: AugmentOp::Cutout,
                    probability: 0.5,
                    magnitude: 8.0,
                },
            ],
        }
    }

    /// Default vector policy: bounded uniform jitter plus occasional
    /// coordinate dropout.
    pub fn vector_default(jitter: f64) -> AugmentPolicy {
        AugmentPolicy {
            steps: vec![
                AugmentStep {
                    op: AugmentOp::BoundedJitter,
                    probability: 1.0,
                    magnitude: jitter,
                },
                AugmentStep {
                    op: AugmentOp::Cutout,
                    probability: 0.2,
                    magnitude: 1.0,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            if !(0.0..=1.0).contains(&step.probability) || !step.probability.is_finite() {
                return Err(DataError::Argument(format!(
                    "step {i} ({}): probability {} outside [0, 1]",
                    step.op, step.probability
                )));
            }
            let m = step.magnitude;
            let ok = match step.op {
                AugmentOp::HorizontalFlip => m == 0.0,
                AugmentOp::ShiftCrop | AugmentOp::Cutout | AugmentOp::BoundedJitter => {
                    m.is_finite() && m >= 0.0
                }
                AugmentOp::BrightnessContrast => (0.0..1.0).contains(&m),
                AugmentOp::Rotation => (0.0..=std::f64::consts::PI).contains(&m),
            };
            if !ok {
                return Err(DataError::Argument(format!(
                    "step {i} ({}): magnitude {m} outside the documented bounds",
                    step.op
                )));
            }
        }
        Ok(())
    }
}

/// Generates C well-separated Gaussian blobs: class k is drawn from
/// N(separation·dir_k, I) where the directions are the maximally separated
/// unit vectors of a regular simplex. Returns balanced, fully labeled
/// (train, test) datasets, deterministic in the seed.
pub fn gen_blobs(
    class_count: usize,
    dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if class_count < 2 {
        return Err(DataError::Argument(format!(
            "need at least 2 classes, got {class_count}"
        )));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(DataError::Argument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if per_class_train == 0 || per_class_test == 0 {
        return Err(DataError::Argument(
            "per-class sample counts must be positive".into(),
        ));
    }
    if class_count > dim + 1 {
        return Err(DataError::Argument(format!(
            "{class_count} classes need simplex means in dimension ≥ {}, got {dim}",
            class_count - 1
        )));
    }
    let dirs = simplex_centroids(class_count, dim)
        .map_err(|e| DataError::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |per_class: usize, split: Split| -> Result<Dataset> {
        let n = class_count * per_class;
        let mut samples = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for k in 0..class_count {
            let mean = dirs.row(k);
            for _ in 0..per_class {
                for &m in mean.iter().take(dim) {
                    let z: f64 = rng.sample(StandardNormal);
                    samples.push(separation * m + z);
                }
                labels.push(k as i64);
            }
        }
        Dataset::new(samples, vec![dim], labels, split, class_count)
    };
    let train = draw(per_class_train, Split::Train)?;
    let test = draw(per_class_test, Split::Test)?;
    Ok((train, test))
}

/// Keeps exactly `labeled_per_class` labels per class (chosen by seeded
/// shuffle) and marks every other row −1. Sample order and values are
/// untouched.
pub fn split_labels(train: &Dataset, labeled_per_class: usize, seed: u64) -> Result<Dataset> {
    let c = train.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; train.len()];
    for class in 0..c {
        let mut members: Vec<usize> = (0..train.len())
            .filter(|&i| train.labels()[i] == class as i64)
            .collect();
        if members.len() < labeled_per_class {
            return Err(DataError::Argument(format!(
                "class {class} has {} labeled samples, need {labeled_per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &i in members.iter().take(labeled_per_class) {
            keep[i] = true;
        }
    }
    let labels = train
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| if keep[i] { y } else { -1 })
        .collect();
    Dataset::new(
        train.samples.clone(),
        train.input_shape.clone(),
        labels,
        train.split(),
        c,
    )
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic sub-stream seed.
fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag ^ splitmix64(index)))
}

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// One window of the infinite tiled-shuffle stream over `pool`: epoch e's
/// segment is a fresh seeded permutation of the pool, segments are laid
/// end to end, and window `step` covers positions [step·count,
/// step·count+count). Every consecutive |pool| positions contain each
/// element exactly once, so over any prefix of n draws no element appears
/// more than ⌈n/|pool|⌉ times.
fn window(pool: &[usize], count: usize, step: u64, seed: u64, tag: u64) -> Vec<usize> {
    let len = pool.len() as u64;
    let mut out = Vec::with_capacity(count);
    let start = step * count as u64;
    let mut epoch = start / len;
    let mut offset = (start % len) as usize;
    let mut order = pool.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, epoch)));
    while out.len() < count {
        if offset == order.len() {
            epoch += 1;
            offset = 0;
            order.copy_from_slice(pool);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, epoch)));
        }
        out.push(order[offset]);
        offset += 1;
    }
    out
}

/// Assembles the batch for one training step: M labeled rows, S unlabeled
/// rows, and the augmented partner of each unlabeled row. Sampling tiles
/// seeded per-epoch shuffles of each pool, so it is deterministic given
/// (seed, step) and no sample is starved. S = 0 yields empty `u`/`u_aug`.
pub fn compose_batch(
    dataset: &Dataset,
    composition: (usize, usize),
    policy: &AugmentPolicy,
    step: u64,
    seed: u64,
) -> Result<SemiBatch> {
    let (m, s) = composition;
    policy.validate()?;
    if m == 0 {
        return Err(DataError::Argument(
            "batch composition needs at least one labeled sample".into(),
        ));
    }
    let labeled = dataset.labeled_indices();
    let unlabeled = dataset.unlabeled_indices();
    if labeled.len() < m {
        return Err(DataError::Argument(format!(
            "need {m} labeled samples per batch, dataset has {}",
            labeled.len()
        )));
    }
    if s > 0 && unlabeled.len() < s {
        return Err(DataError::Argument(format!(
            "need {s} unlabeled samples per batch, dataset has {}",
            unlabeled.len()
        )));
    }

    let x_rows = window(&labeled, m, step, seed, LABELED_STREAM);
    let y = x_rows
        .iter()
        .map(|&i| dataset.labels()[i] as usize)
        .collect();
    let x = dataset.rows_tensor(&x_rows)?;

    let u_rows = if s > 0 {
        window(&unlabeled, s, step, seed, UNLABELED_STREAM)
    } else {
        Vec::new()
    };
    let u = dataset.rows_tensor(&u_rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, AUGMENT_STREAM, step));
    let mut aug_data = Vec::with_capacity(u_rows.len() * dataset.dim());
    for &i in &u_rows {
        aug_data.extend(augment(
            dataset.sample(i),
            dataset.input_shape(),
            policy,
            &mut rng,
        )?);
    }
    let u_aug = Tensor::from_vec(&[u_rows.len(), dataset.dim()], aug_data)?;
    Ok(SemiBatch { x, y, u, u_aug })
}

/// Applies the policy to one sample. Each step fires with its probability
/// (one uniform draw per step, taken whether or not it fires, so equal
/// policies consume equal stream lengths); parameters are drawn only when
/// the step fires. Output shape equals input shape, and the operation set
/// admitted depends on the shape: rank-3 `[c, h, w]` samples accept every
/// op, flat vectors accept bounded_jitter, rotation (in a random
/// coordinate plane), and cutout (coordinate dropout).
pub fn augment(
    sample: &[f64],
    input_shape: &[usize],
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    policy.validate()?;
    let expected: usize = input_shape.iter().product();
    if sample.len() != expected {
        return Err(DataError::Argument(format!(
            "sample has {} values but input_shape {input_shape:?} needs {expected}",
            sample.len()
        )));
    }
    let image = match input_shape {
        [c, h, w] => Some((*c, *h, *w)),
        _ => None,
    };
    let mut x = sample.to_vec();
    for step in &policy.steps {
        let gate: f64 = rng.random();
        let fires = gate < step.probability;
        match step.op {
            AugmentOp::HorizontalFlip => {
                let (c, h, w) = image.ok_or_else(|| shape_error(step.op, input_shape))?;
                if fires {
                    horizontal_flip(&mut x, c, h, w);
                }
            }
            AugmentOp::ShiftCrop => {
                let (c, h, w) = image.ok_or_else(|| shape_error(step.op, input_shape))?;
                if fires {
                    let bound = step.magnitude.floor() as i64;
                    let dy = rng.random_range(-bound..=bound);
                    let dx = rng.random_range(-bound..=bound);
                    x = shift_crop(&x, c, h, w, dy, dx);
                }
            }
            AugmentOp::BrightnessContrast => {
                image.ok_or_else(|| shape_error(step.op, input_shape))?;
                if fires {
                    let m = step.magnitude;
                    let brightness = rng.random_range(-m..=m);
                    let contrast = rng.random_range((1.0 - m)..=(1.0 + m));
                    for v in &mut x {
                        *v = contrast * *v + brightness;
                    }
                }
            }
            AugmentOp::Rotation => {
                if fires {
                    let m = step.magnitude;
                    let angle = rng.random_range(-m..=m);
                    match image {
                        Some((c, h, w)) => x = rotate_image(&x, c, h, w, angle),
                        None => {
                            // Rotation in a random coordinate plane.
                            if x.len() >= 2 {
                                let i = rng.random_range(0..x.len());
                                let mut j = rng.random_range(0..x.len() - 1);
                                if j >= i {
                                    j += 1;
                                }
                                let (ci, sj) = (angle.cos(), angle.sin());
                                let (a, b) = (x[i], x[j]);
                                x[i] = ci * a - sj * b;
                                x[j] = sj * a + ci * b;
                            }
                        }
                    }
                }
            }
            AugmentOp::Cutout => {
                if fires {
                    match image {
                        Some((c, h, w)) => {
                            let side = step.magnitude.round() as usize;
                            let cy = rng.random_range(0..h);
                            let cx = rng.random_range(0..w);
                            cutout_image(&mut x, c, h, w, cy, cx, side);
                        }
                        None => {
                            // Coordinate dropout: zero `magnitude` randomly
                            // chosen coordinates.
                            let k = (step.magnitude.round() as usize).min(x.len());
                            let chosen = rand::seq::index::sample(rng, x.len(), k);
                            for idx in chosen {
                                x[idx] = 0.0;
                            }
                        }
                    }
                }
            }
            AugmentOp::BoundedJitter => {
                if fires {
                    let m = step.magnitude;
                    for v in &mut x {
                        *v += rng.random_range(-m..=m);
                    }
                }
            }
        }
    }
    Ok(x)
}

fn shape_error(op: AugmentOp, input_shape: &[usize]) -> DataError {
    DataError::Argument(format!(
        "{op} requires [channels, height, width] samples, got input_shape {input_shape:?}"
    ))
}

fn horizontal_flip(x: &mut [f64], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for row in 0..h {
            let base = ch * h * w + row * w;
            x[base..base + w].reverse();
        }
    }
}

/// Translates by (dy, dx) with zero padding, keeping the original size.
fn shift_crop(x: &[f64], c: usize, h: usize, w: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for row in 0..h {
            let src_row = row as i64 - dy;
            if src_row < 0 || src_row >= h as i64 {
                continue;
            }
            for col in 0..w {
                let src_col = col as i64 - dx;
                if src_col < 0 || src_col >= w as i64 {
                    continue;
                }
                out[ch * h * w + row * w + col] =
                    x[ch * h * w + src_row as usize * w + src_col as usize];
            }
        }
    }
    out
}

/// Rotates about the image center with nearest-neighbor sampling; pixels
/// pulled from outside the frame become 0.
fn rotate_image(x: &[f64], c: usize, h: usize, w: usize, angle: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos, sin) = (angle.cos(), angle.sin());
    for row in 0..h {
        for col in 0..w {
            // Inverse-rotate the destination coordinate into the source.
            let (ry, rx) = (row as f64 - cy, col as f64 - cx);
            let sy = (cos * ry + sin * rx + cy).round();
            let sx = (-sin * ry + cos * rx + cx).round();
            if sy < 0.0 || sy >= h as f64 || sx < 0.0 || sx >= w as f64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..c {
                out[ch * h * w + row * w + col] = x[ch * h * w + sy * w + sx];
            }
        }
    }
    out
}

fn cutout_image(x: &mut [f64], c: usize, h: usize, w: usize, cy: usize, cx: usize, side: usize) {
    let half = side / 2;
    let y0 = cy.saturating_sub(half);
    let x0 = cx.saturating_sub(half);
    let y1 = (cy + side - half).min(h);
    let x1 = (cx + side - half).min(w);
    for ch in 0..c {
        for row in y0..y1 {
            for col in x0..x1 {
                x[ch * h * w + row * w + col] = 0.0;
            }
        }
    }
}

/// Per-channel standardization constants of an image dataset, computed on
/// the [0, 1] pixel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Everything the CIFAR-10 reader produces: standardized train and test
/// splits plus the constants needed to undo the standardization.
#[derive(Debug)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
    /// Computed from the training split only; the test split reuses them.
    pub stats: ChannelStats,
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_SIDE: usize = 32;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read_cifar_file(path: &Path, pixels: &mut Vec<f64>, labels: &mut Vec<i64>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let path_str = path.display().to_string();
    if bytes.len() % CIFAR_RECORD != 0 {
        let records = bytes.len() / CIFAR_RECORD;
        return Err(DataError::Format {
            path: path_str,
            detail: format!(
                "file holds {} bytes, not a multiple of the {CIFAR_RECORD}-byte record size \
                 (nearest record counts need {} or {} bytes)",
                bytes.len(),
                records * CIFAR_RECORD,
                (records + 1) * CIFAR_RECORD
            ),
        });
    }
    for (index, record) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(DataError::Format {
                path: path_str,
                detail: format!("record {index}: label byte {label} outside [0, 9]"),
            });
        }
        labels.push(label as i64);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Reads the standard CIFAR-10 binary distribution from a directory
/// holding `data_batch_1.bin` … `data_batch_5.bin` and `test_batch.bin`.
/// Pixels are scaled to [0, 1] and standardized per channel with
/// constants computed from the training split.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        read_cifar_file(&dir.join(name), &mut train_pixels, &mut train_labels)?;
    }
    let mut test_pixels = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&dir.join(CIFAR_TEST_FILE), &mut test_pixels, &mut test_labels)?;

    let stats = channel_stats(&train_pixels);
    standardize(&mut train_pixels, &stats);
    standardize(&mut test_pixels, &stats);

    let shape = vec![3, CIFAR_SIDE, CIFAR_SIDE];
    Ok(Cifar10 {
        train: Dataset::new(train_pixels, shape.clone(), train_labels, Split::Train, 10)?,
        test: Dataset::new(test_pixels, shape, test_labels, Split::Test, 10)?,
        stats,
    })
}

fn channel_stats(pixels: &[f64]) -> ChannelStats {
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    let per_channel = 1024;
    let n = pixels.len() / CIFAR_PIXELS;
    let count = (n * per_channel) as f64;
    for record in pixels.chunks(CIFAR_PIXELS) {
        for ch in 0..3 {
            for &p in &record[ch * per_channel..(ch + 1) * per_channel] {
                mean[ch] += p;
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for record in pixels.chunks(CIFAR_PIXELS) {
        for ch in 0..3 {
            for &p in &record[ch * per_channel..(ch + 1) * per_channel] {
                var[ch] += (p - mean[ch]) * (p - mean[ch]);
            }
        }
    }
    let mut std = [0.0f64; 3];
    for ch in 0..3 {
        std[ch] = (var[ch] / count).sqrt().max(1e-12);
    }
    ChannelStats { mean, std }
}

fn standardize(pixels: &mut [f64], stats: &ChannelStats) {
    let per_channel = 1024;
    for record in pixels.chunks_mut(CIFAR_PIXELS) {
        for ch in 0..3 {
            for p in &mut record[ch * per_channel..(ch + 1) * per_channel] {
                *p = (*p - stats.mean[ch]) / stats.std[ch];
            }
        }
    }
}

/// Reconstructs the original 3073-byte binary record of one row by
/// undoing the standardization and the [0, 1] scaling. Exact: the
/// recovered bytes equal the ones the record was loaded from.
pub fn reserialize_record(ds: &Dataset, stats: &ChannelStats, index: usize) -> Result<Vec<u8>> {
    if ds.input_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(DataError::Argument(format!(
            "record re-serialization needs [3, 32, 32] samples, got {:?}",
            ds.input_shape()
        )));
    }
    if index >= ds.len() {
        return Err(DataError::Argument(format!(
            "record {index} out of range for {} samples",
            ds.len()
        )));
    }
    let label = ds.labels()[index];
    if label < 0 {
        return Err(DataError::Argument(format!(
            "record {index} is unlabeled; the binary format requires a label byte"
        )));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label as u8);
    let per_channel = 1024;
    for (i, &z) in ds.sample(index).iter().enumerate() {
        let ch = i / per_channel;
        let p = z * stats.std[ch] + stats.mean[ch];
        let byte = (p * 255.0).round();
        if !(0.0..=255.0).contains(&byte) {
            return Err(DataError::Argument(format!(
                "record {index}: value {z} does not map back to a pixel byte"
            )));
        }
        out.push(byte as u8);
    }
    Ok(out)
}

/// Writes a dataset as CSV: header `label,f0,...,f{D-1}`, one row per
/// sample, unlabeled rows carrying label −1. Values use 17 significant
/// digits so the text is value-exact.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let d = ds.dim();
    let mut out = String::from("label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.labels()[i].to_string());
        for v in ds.sample(i) {
            out.push(',');
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean(sample: &[f64], means: &[Vec<f64>]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, m) in means.iter().enumerate() {
            let d: f64 = sample
                .iter()
                .zip(m)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    fn blob_means(c: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
        let dirs = simplex_centroids(c, d).unwrap();
        (0..c)
            .map(|k| dirs.row(k).iter().map(|v| v * separation).collect())
            .collect()
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let (train, test) = gen_blobs(4, 8, 25, 10, 4.0, 7).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(test.len(), 40);
        for k in 0..4 {
            let n = train.labels().iter().filter(|&&y| y == k).count();
            assert_eq!(n, 25);
        }
        let (again, _) = gen_blobs(4, 8, 25, 10, 4.0, 7).unwrap();
        assert_eq!(train, again);
        let (other, _) = gen_blobs(4, 8, 25, 10, 4.0, 8).unwrap();
        assert_ne!(train, other);
    }

    #[test]
    fn blobs_reject_too_many_classes_for_the_dimension() {
        let err = gen_blobs(10, 8, 5, 5, 4.0, 0).unwrap_err();
        assert!(matches!(err, DataError::Argument(_)), "{err}");
    }

    #[test]
    fn blobs_at_separation_six_are_nearest_mean_separable() {
        let (train, test) = gen_blobs(4, 8, 250, 250, 6.0, 3).unwrap();
        let means = blob_means(4, 8, 6.0);
        for ds in [train, test] {
            let correct = (0..ds.len())
                .filter(|&i| nearest_mean(ds.sample(i), &means) as i64 == ds.labels()[i])
                .count();
            let accuracy = correct as f64 / ds.len() as f64;
            assert!(accuracy > 0.99, "nearest-mean accuracy {accuracy}");
        }
    }

    #[test]
    fn split_labels_keeps_exact_per_class_counts_in_place() {
        let (train, _) = gen_blobs(4, 8, 25, 5, 4.0, 1).unwrap();
        let split = split_labels(&train, 4, 9).unwrap();
        assert_eq!(split.len(), train.len());
        assert_eq!(split.samples, train.samples);
        let labeled: Vec<usize> = split.labeled_indices();
        assert_eq!(labeled.len(), 16);
        for k in 0..4 {
            let n = split.labels().iter().filter(|&&y| y == k).count();
            assert_eq!(n, 4, "class {k}");
        }
        // Partition: every retained label agrees with the original.
        for (i, &y) in split.labels().iter().enumerate() {
            if y >= 0 {
                assert_eq!(y, train.labels()[i]);
            }
        }
        assert_eq!(
            split.labeled_indices().len() + split.unlabeled_indices().len(),
            split.len()
        );
        // Keeping every label leaves the dataset unchanged.
        let all = split_labels(&train, 25, 9).unwrap();
        assert_eq!(all, train);
    }

    #[test]
    fn split_labels_error_names_the_starved_class() {
        let (train, _) = gen_blobs(3, 4, 5, 2, 4.0, 2).unwrap();
        let err = split_labels(&train, 6, 0).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn identity_policy_is_identity_and_flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let shape = [2usize, 4, 4];

        let zero_p = AugmentPolicy {
            steps: vec![AugmentStep {
                op: AugmentOp::HorizontalFlip,
                probability: 0.0,
                magnitude: 0.0,
            }],
        };
        let out = augment(&sample, &shape, &zero_p, &mut rng).unwrap();
        assert_eq!(out, sample);

        let flip = AugmentPolicy {
            steps: vec![AugmentStep {
                op: AugmentOp::HorizontalFlip,
                probability: 1.0,
                magnitude: 0.0,
            }],
        };
        let once = augment(&sample, &shape, &flip, &mut rng).unwrap();
        assert_ne!(once, sample);
        let twice = augment(&once, &shape, &flip, &mut rng).unwrap();
        assert_eq!(twice, sample);
    }

    #[test]
    fn image_ops_preserve_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = AugmentPolicy::image_default();
        let mut with_rotation = policy.clone();
        with_rotation.steps.push(AugmentStep {
            op: AugmentOp::Rotation,
            probability: 1.0,
            magnitude: 0.3,
        });
        let shape = [3usize, 8, 8];
        for trial in 0..200 {
            let sample: Vec<f64> = (0..3 * 8 * 8)
                .map(|i| ((i * 31 + trial * 7) % 255) as f64 / 255.0)
                .collect();
            let out = augment(&sample, &shape, &with_rotation, &mut rng).unwrap();
            assert_eq!(out.len(), sample.len());
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn vector_data_rejects_image_geometry_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = vec![0.5; 8];
        for op in [
            AugmentOp::HorizontalFlip,
            AugmentOp::ShiftCrop,
            AugmentOp::BrightnessContrast,
        ] {
            let policy = AugmentPolicy {
                steps: vec![AugmentStep {
                    op,
                    probability: 1.0,
                    magnitude: if op == AugmentOp::HorizontalFlip { 0.0 } else { 0.1 },
                }],
            };
            let err = augment(&sample, &[8], &policy, &mut rng).unwrap_err();
            assert!(matches!(err, DataError::Argument(_)), "{op}: {err}");
        }
    }

    #[test]
    fn vector_cutout_zeroes_the_requested_coordinate_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = vec![1.0; 10];
        let policy = AugmentPolicy {
            steps: vec![AugmentStep {
                op: AugmentOp::Cutout,
                probability: 1.0,
                magnitude: 3.0,
            }],
        };
        let out = augment(&sample, &[10], &policy, &mut rng).unwrap();
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), 3);
        assert_eq!(out.iter().filter(|&&v| v == 1.0).count(), 7);
    }

    #[test]
    fn vector_rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        let policy = AugmentPolicy {
            steps: vec![AugmentStep {
                op: AugmentOp::Rotation,
                probability: 1.0,
                magnitude: 0.8,
            }],
        };
        let norm: f64 = sample.iter().map(|v| v * v).sum::<f64>().sqrt();
        for _ in 0..50 {
            let out = augment(&sample, &[6], &policy, &mut rng).unwrap();
            let out_norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - out_norm).abs() < 1e-9);
        }
    }

    #[test]
    fn bounded_jitter_rarely_crosses_class_boundaries() {
        // Monte Carlo oracle: at separation 6 a 0.1-bounded jitter moves a
        // sample by at most 0.1·√D ≈ 0.28, far less than the ≈4.9 gap to
        // the decision boundary, so the nearest mean must essentially
        // never change. Failures come from samples that were already
        // across the boundary.
        let (train, _) = gen_blobs(4, 8, 2500, 10, 6.0, 11).unwrap();
        let means = blob_means(4, 8, 6.0);
        let policy = AugmentPolicy {
            steps: vec![AugmentStep {
                op: AugmentOp::BoundedJitter,
                probability: 1.0,
                magnitude: 0.1,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut preserved = 0usize;
        for i in 0..train.len() {
            let before = nearest_mean(train.sample(i), &means);
            let after_sample = augment(train.sample(i), &[8], &policy, &mut rng).unwrap();
            if nearest_mean(&after_sample, &means) == before {
                preserved += 1;
            }
        }
        let rate = preserved as f64 / train.len() as f64;
        assert!(rate > 0.99, "nearest-mean preservation rate {rate}");
    }

    #[test]
    fn compose_batch_shapes_and_determinism() {
        let (train, _) = gen_blobs(4, 8, 100, 10, 4.0, 5).unwrap();
        let ds = split_labels(&train, 20, 0).unwrap();
        let policy = AugmentPolicy::vector_default(0.1);
        let batch = compose_batch(&ds, (32, 160), &policy, 3, 17).unwrap();
        assert_eq!(batch.x.shape(), vec![32, 8]);
        assert_eq!(batch.y.len(), 32);
        assert_eq!(batch.u.shape(), vec![160, 8]);
        assert_eq!(batch.u_aug.shape(), vec![160, 8]);
        let again = compose_batch(&ds, (32, 160), &policy, 3, 17).unwrap();
        assert_eq!(batch.x.values(), again.x.values());
        assert_eq!(batch.y, again.y);
        assert_eq!(batch.u.values(), again.u.values());
        assert_eq!(batch.u_aug.values(), again.u_aug.values());
        let other_step = compose_batch(&ds, (32, 160), &policy, 4, 17).unwrap();
        assert_ne!(batch.x.values(), other_step.x.values());
    }

    #[test]
    fn compose_batch_pairs_augmentations_with_their_sources() {
        let (train, _) = gen_blobs(3, 4, 40, 5, 4.0, 6).unwrap();
        let ds = split_labels(&train, 5, 1).unwrap();
        let batch = compose_batch(&ds, (6, 12), &AugmentPolicy::identity(), 0, 2).unwrap();
        assert_eq!(batch.u.values(), batch.u_aug.values());
        // Labels in y match the labeled rows drawn into x.
        let full = ds.samples_tensor().unwrap().values();
        let d = ds.dim();
        for (row, &label) in batch.y.iter().enumerate() {
            let xrow = &batch.x.values()[row * d..(row + 1) * d];
            let source = (0..ds.len())
                .find(|&i| full[i * d..(i + 1) * d] == *xrow)
                .expect("batch row must come from the dataset");
            assert_eq!(ds.labels()[source], label as i64);
        }
    }

    #[test]
    fn compose_batch_never_starves_a_labeled_sample() {
        let (train, _) = gen_blobs(2, 4, 5, 2, 4.0, 8).unwrap();
        let ds = split_labels(&train, 5, 0).unwrap(); // all 10 labeled
        let (m, steps) = (3usize, 10u64);
        let mut counts = vec![0usize; ds.len()];
        for step in 0..steps {
            let batch = compose_batch(&ds, (m, 0), &AugmentPolicy::identity(), step, 9).unwrap();
            let d = ds.dim();
            let vals = batch.x.values();
            for row in 0..m {
                let xrow = &vals[row * d..(row + 1) * d];
                let source = (0..ds.len())
                    .find(|&i| ds.sample(i) == xrow)
                    .expect("batch row must come from the dataset");
                counts[source] += 1;
            }
        }
        let bound = (steps as usize * m).div_ceil(ds.len());
        for (i, &n) in counts.iter().enumerate() {
            assert!(n <= bound, "sample {i} drawn {n} times, bound {bound}");
        }
        // 30 draws over 10 samples: the tiling covers each exactly 3 times.
        assert!(counts.iter().all(|&n| n == bound));
    }

    #[test]
    fn compose_batch_rejects_insufficient_pools() {
        let (train, _) = gen_blobs(2, 4, 5, 2, 4.0, 8).unwrap();
        let ds = split_labels(&train, 2, 0).unwrap(); // 4 labeled, 6 unlabeled
        let policy = AugmentPolicy::identity();
        assert!(compose_batch(&ds, (5, 2), &policy, 0, 0).is_err());
        assert!(compose_batch(&ds, (2, 7), &policy, 0, 0).is_err());
        assert!(compose_batch(&ds, (0, 2), &policy, 0, 0).is_err());
        // S = 0 is the labeled-only configuration and must work.
        let batch = compose_batch(&ds, (4, 0), &policy, 0, 0).unwrap();
        assert_eq!(batch.u.shape(), vec![0, 4]);
    }

    fn write_cifar_fixture(dir: &Path, records_per_file: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
            let mut bytes = Vec::with_capacity(records_per_file * CIFAR_RECORD);
            for _ in 0..records_per_file {
                bytes.push(rng.random_range(0..10u8));
                for _ in 0..CIFAR_PIXELS {
                    bytes.push(rng.random::<u8>());
                }
            }
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn cifar_reader_counts_standardizes_and_reserializes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_fixture(dir.path(), 20, 0);
        let data = load_cifar10(dir.path()).unwrap();
        assert_eq!(data.train.len(), 100);
        assert_eq!(data.test.len(), 20);
        assert_eq!(data.train.input_shape(), &[3, 32, 32]);

        // Standardization: per-channel mean ≈ 0, variance ≈ 1 on train.
        let per_channel = 1024;
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut n = 0.0;
            for i in 0..data.train.len() {
                for &v in &data.train.sample(i)[ch * per_channel..(ch + 1) * per_channel] {
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "channel {ch} var {var}");
        }

        // Byte-exact record reconstruction across the first train file.
        let original = std::fs::read(dir.path().join(CIFAR_TRAIN_FILES[0])).unwrap();
        for index in 0..20 {
            let rebuilt = reserialize_record(&data.train, &data.stats, index).unwrap();
            assert_eq!(
                rebuilt,
                original[index * CIFAR_RECORD..(index + 1) * CIFAR_RECORD].to_vec(),
                "record {index}"
            );
        }
    }

    #[test]
    fn cifar_reader_rejects_truncated_and_mislabeled_files() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_fixture(dir.path(), 3, 1);

        // Truncate the second train file by one byte.
        let victim = dir.path().join(CIFAR_TRAIN_FILES[1]);
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes.pop();
        std::fs::write(&victim, &bytes).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("9218 bytes") && msg.contains("9219"),
            "error must name actual and expected byte counts: {msg}"
        );

        // Restore, then corrupt a label byte in the test file.
        write_cifar_fixture(dir.path(), 3, 1);
        let victim = dir.path().join(CIFAR_TEST_FILE);
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[2 * CIFAR_RECORD] = 11;
        std::fs::write(&victim, &bytes).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 2"), "error must name the record: {msg}");
        assert!(msg.contains("11"), "error must name the label byte: {msg}");
    }

    #[test]
    fn csv_export_writes_header_and_unlabeled_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = gen_blobs(2, 3, 2, 1, 4.0, 0).unwrap();
        let ds = split_labels(&train, 1, 0).unwrap();
        let path = dir.path().join("blobs.csv");
        export_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "label,f0,f1,f2");
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), 4);
        assert_eq!(body.iter().filter(|l| l.starts_with("-1,")).count(), 2);
        // Values round-trip exactly.
        let first_row: Vec<f64> = body[0]
            .split(',')
            .skip(1)
            .map(|f| f.parse().unwrap())
            .collect();
        assert_eq!(first_row, ds.sample(0));
    }
}
