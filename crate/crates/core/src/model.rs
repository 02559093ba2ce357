//! A configurable feed-forward classifier whose final layer is a frozen,
//! row-normalized centroid matrix. The backbone (an MLP for vector data, a
//! small convolutional stack or a WideResNet for images) produces a feature
//! vector per input; cosine class scores are the inner products between the
//! L2-normalized features and the fixed unit-norm centroid rows, so the
//! classifier head never trains — only the backbone learns to move features
//! toward their class centroid.

use std::cell::RefCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::pedcc::{format_f64_17, parse_centroid_block, render_centroid_block, CentroidSet, PedccError};
use crate::tensor::{Tensor, TensorError};

/// Epsilon inside batch-norm denominators.
const BN_EPS: f64 = 1e-5;
/// Momentum of the running batch-norm statistics: at each training step
/// `running = momentum·running + (1−momentum)·batch`.
const BN_MOMENTUM: f64 = 0.99;
/// Epsilon guarding feature normalization before the cosine head.
const FEATURE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}:{line}: invalid checkpoint: {detail}")]
    Format {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Centroids(#[from] PedccError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Nonlinearity applied between backbone layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation {other:?}, expected `relu`")),
        }
    }
}

/// Backbone family. `Mlp` flattens the input and applies dense layers;
/// the two convolutional variants expect `[channels, height, width]`
/// inputs and end in global average pooling, so their feature dimension
/// is fixed by the final channel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Dense layers of the given hidden widths (possibly empty), each
    /// followed by the activation, then a final dense map to the feature
    /// dimension.
    Mlp { hidden: Vec<usize> },
    /// Three stride-2 conv/batch-norm/activation blocks with channel
    /// widths 16·widen, 32·widen, 64·widen, then global average pooling.
    /// Requires `feature_dim == 64·widen`.
    ConvSmall { widen: usize },
    /// Pre-activation wide residual network. `depth` must satisfy
    /// depth = 6n+4; channel widths are 16, 16·width, 32·width, 64·width.
    /// Requires `feature_dim == 64·width`.
    WideResnet { depth: usize, width: usize },
}

/// Everything needed to build a model deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Extents of one sample, e.g. `[8]` for vectors or `[3, 32, 32]`
    /// for images. `forward` takes batches flattened to
    /// `[B, product(input_shape)]`.
    pub input_shape: Vec<usize>,
    pub architecture: Architecture,
    /// Feature dimension D; must match the attached centroid set.
    pub feature_dim: usize,
    /// Class count C; must match the attached centroid set.
    pub num_classes: usize,
    pub activation: Activation,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(ModelError::Argument(format!(
                "input_shape {:?} must be non-empty with positive extents",
                self.input_shape
            )));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::Argument("feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Argument(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(ModelError::Argument(format!(
                        "mlp hidden sizes {hidden:?} must all be positive"
                    )));
                }
            }
            Architecture::ConvSmall { widen } => {
                self.check_image_input("conv_small")?;
                if *widen == 0 {
                    return Err(ModelError::Argument("conv_small widen factor must be positive".into()));
                }
                if self.feature_dim != 64 * widen {
                    return Err(ModelError::Argument(format!(
                        "conv_small ends in global average pooling over 64·widen = {} channels, \
                         so feature_dim must equal that, got {}",
                        64 * widen,
                        self.feature_dim
                    )));
                }
            }
            Architecture::WideResnet { depth, width } => {
                self.check_image_input("wideresnet")?;
                if *width == 0 {
                    return Err(ModelError::Argument("wideresnet width must be positive".into()));
                }
                if *depth < 10 || (depth - 4) % 6 != 0 {
                    return Err(ModelError::Argument(format!(
                        "wideresnet depth must be 6n+4 with n ≥ 1, got {depth}"
                    )));
                }
                if self.feature_dim != 64 * width {
                    return Err(ModelError::Argument(format!(
                        "wideresnet ends in global average pooling over 64·width = {} channels, \
                         so feature_dim must equal that, got {}",
                        64 * width,
                        self.feature_dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_image_input(&self, arch: &str) -> Result<()> {
        if self.input_shape.len() != 3 {
            return Err(ModelError::Argument(format!(
                "{arch} expects input_shape [channels, height, width], got {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Flattened per-sample input size.
    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Number of trainable scalars, computed from the configuration alone
    /// (the frozen head is not counted: it never trains).
    pub fn parameter_count(&self) -> usize {
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                let mut dims = vec![self.input_size()];
                dims.extend_from_slice(hidden);
                dims.push(self.feature_dim);
                dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
            Architecture::ConvSmall { widen } => {
                let chans = [self.input_shape[0], 16 * widen, 32 * widen, 64 * widen];
                chans
                    .windows(2)
                    .map(|w| 9 * w[0] * w[1] + 2 * w[1])
                    .sum()
            }
            Architecture::WideResnet { depth, width } => {
                let n = (depth - 4) / 6;
                let widths = [16, 16 * width, 32 * width, 64 * width];
                let mut count = 9 * self.input_shape[0] * widths[0];
                for g in 0..3 {
                    let (inp, out) = (widths[g], widths[g + 1]);
                    let stride = if g == 0 { 1 } else { 2 };
                    // First block of the group (may carry a projection).
                    count += 2 * inp + 9 * inp * out + 2 * out + 9 * out * out;
                    if inp != out || stride != 1 {
                        count += inp * out;
                    }
                    // Remaining blocks keep the channel count.
                    count += (n - 1) * (2 * out + 9 * out * out + 2 * out + 9 * out * out);
                }
                count + 2 * widths[3]
            }
        }
    }
}

/// Whether a forward pass uses batch statistics (and updates the running
/// averages) or the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

struct Conv {
    w: Tensor,
    stride: usize,
}

struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: RefCell<Vec<f64>>,
    running_var: RefCell<Vec<f64>>,
}

impl BatchNorm {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (out, mean, var) = x.batch_norm_train(&self.gamma, &self.beta, BN_EPS)?;
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for (r, b) in rm.iter_mut().zip(&mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                for (r, b) in rv.iter_mut().zip(&var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                Ok(out)
            }
            Mode::Eval => Ok(x.batch_norm_eval(
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                BN_EPS,
            )?),
        }
    }
}

struct ResidualBlock {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
    /// 1×1 projection, present when the block changes channel count or
    /// spatial resolution.
    shortcut: Option<Conv>,
}

enum Backbone {
    Mlp { layers: Vec<Linear> },
    ConvSmall { blocks: Vec<(Conv, BatchNorm)> },
    WideResnet {
        stem: Conv,
        groups: Vec<Vec<ResidualBlock>>,
        final_bn: BatchNorm,
    },
}

/// Output of one forward pass.
pub struct ForwardOutput {
    /// Raw backbone features, before normalization: `[B, D]`.
    pub features: Tensor,
    /// Cosine similarity of each normalized feature to each centroid:
    /// `[B, C]`, every entry in [−1, 1].
    pub cosines: Tensor,
    /// `softmax(s·cosines)` rows: `[B, C]`.
    pub probs: Tensor,
}

/// A backbone plus the frozen centroid head.
pub struct Model {
    config: ModelConfig,
    centroids: CentroidSet,
    /// `[D, C]` constant: the transposed centroid matrix. Never trains.
    head_t: Tensor,
    backbone: Backbone,
}

/// Seeded He-style initializer: every weight is an independent draw from
/// N(0, 2/fan_in); biases start at zero, batch-norm scales at one.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Init {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn weight(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let draw: f64 = StandardNormal.sample(&mut self.rng);
                std * draw
            })
            .collect();
        Tensor::from_vec(shape, data)
            .expect("freshly drawn weights are always well-formed")
            .with_grad()
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.weight(&[fan_in, fan_out], fan_in),
            b: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    fn conv(&mut self, out_ch: usize, in_ch: usize, k: usize, stride: usize) -> Conv {
        Conv {
            w: self.weight(&[out_ch, in_ch, k, k], in_ch * k * k),
            stride,
        }
    }

    fn batch_norm(&mut self, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::from_vec(&[channels], vec![1.0; channels])
                .expect("well-formed")
                .with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
        }
    }

    fn residual_block(&mut self, in_ch: usize, out_ch: usize, stride: usize) -> ResidualBlock {
        ResidualBlock {
            bn1: self.batch_norm(in_ch),
            conv1: self.conv(out_ch, in_ch, 3, stride),
            bn2: self.batch_norm(out_ch),
            conv2: self.conv(out_ch, out_ch, 3, 1),
            shortcut: if in_ch != out_ch || stride != 1 {
                Some(self.conv(out_ch, in_ch, 1, stride))
            } else {
                None
            },
        }
    }
}

/// Builds a model from its configuration and the centroid set that will
/// serve as the frozen head. Deterministic: two builds from equal inputs
/// produce bit-identical parameters.
pub fn build_model(cfg: ModelConfig, centroids: &CentroidSet) -> Result<Model> {
    cfg.validate()?;
    if cfg.feature_dim != centroids.dim() {
        return Err(ModelError::Argument(format!(
            "feature_dim {} does not match centroid dimension {}",
            cfg.feature_dim,
            centroids.dim()
        )));
    }
    if cfg.num_classes != centroids.num_classes() {
        return Err(ModelError::Argument(format!(
            "num_classes {} does not match centroid class count {}",
            cfg.num_classes,
            centroids.num_classes()
        )));
    }
    let mut init = Init::new(cfg.seed);
    let backbone = match &cfg.architecture {
        Architecture::Mlp { hidden } => {
            let mut dims = vec![cfg.input_size()];
            dims.extend_from_slice(hidden);
            dims.push(cfg.feature_dim);
            let layers = dims.windows(2).map(|w| init.linear(w[0], w[1])).collect();
            Backbone::Mlp { layers }
        }
        Architecture::ConvSmall { widen } => {
            let chans = [cfg.input_shape[0], 16 * widen, 32 * widen, 64 * widen];
            let blocks = chans
                .windows(2)
                .map(|w| (init.conv(w[1], w[0], 3, 2), init.batch_norm(w[1])))
                .collect();
            Backbone::ConvSmall { blocks }
        }
        Architecture::WideResnet { depth, width } => {
            let n = (depth - 4) / 6;
            let widths = [16usize, 16 * width, 32 * width, 64 * width];
            let stem = init.conv(widths[0], cfg.input_shape[0], 3, 1);
            let mut groups = Vec::with_capacity(3);
            for g in 0..3 {
                let (inp, out) = (widths[g], widths[g + 1]);
                let stride = if g == 0 { 1 } else { 2 };
                let mut blocks = Vec::with_capacity(n);
                blocks.push(init.residual_block(inp, out, stride));
                for _ in 1..n {
                    blocks.push(init.residual_block(out, out, 1));
                }
                groups.push(blocks);
            }
            let final_bn = init.batch_norm(widths[3]);
            Backbone::WideResnet {
                stem,
                groups,
                final_bn,
            }
        }
    };
    Ok(Model {
        head_t: transposed_constant(centroids),
        centroids: centroids.clone(),
        config: cfg,
        backbone,
    })
}

/// `[D, C]` constant tensor holding the centroids column-wise. Built from
/// raw values so it is a true leaf: no gradient ever reaches the head.
fn transposed_constant(cs: &CentroidSet) -> Tensor {
    let (c, d) = (cs.num_classes(), cs.dim());
    let mut data = vec![0.0; c * d];
    for i in 0..c {
        for j in 0..d {
            data[j * c + i] = cs.row(i)[j];
        }
    }
    Tensor::from_vec(&[d, c], data).expect("validated centroid data is always well-formed")
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The frozen head's centroid set, bit-identical to the one the model
    /// was built with.
    pub fn centroids(&self) -> &CentroidSet {
        &self.centroids
    }

    fn activate(&self, x: &Tensor) -> Result<Tensor> {
        match self.config.activation {
            Activation::Relu => Ok(x.relu()?),
        }
    }

    fn backbone_features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = x.shape();
        let expected = self.config.input_size();
        if shape.len() != 2 || shape[1] != expected {
            return Err(ModelError::Argument(format!(
                "expected input shape [B, {expected}] for input_shape {:?}, got {shape:?}",
                self.config.input_shape
            )));
        }
        let batch = shape[0];
        match &self.backbone {
            Backbone::Mlp { layers } => {
                let mut h = x.clone();
                for (i, layer) in layers.iter().enumerate() {
                    h = h.matmul(&layer.w)?.add_row_bias(&layer.b)?;
                    if i + 1 < layers.len() {
                        h = self.activate(&h)?;
                    }
                }
                Ok(h)
            }
            Backbone::ConvSmall { blocks } => {
                let [c, hh, ww] = self.config.input_shape[..] else {
                    unreachable!("validated image shape");
                };
                let mut h = x.reshape(&[batch, c, hh, ww])?;
                for (conv, bn) in blocks {
                    h = h.conv2d(&conv.w, None, conv.stride, 1)?;
                    h = bn.forward(&h, mode)?;
                    h = self.activate(&h)?;
                }
                Ok(h.global_avg_pool()?)
            }
            Backbone::WideResnet {
                stem,
                groups,
                final_bn,
            } => {
                let [c, hh, ww] = self.config.input_shape[..] else {
                    unreachable!("validated image shape");
                };
                let mut h = x.reshape(&[batch, c, hh, ww])?;
                h = h.conv2d(&stem.w, None, stem.stride, 1)?;
                for group in groups {
                    for block in group {
                        h = self.residual_forward(block, &h, mode)?;
                    }
                }
                h = final_bn.forward(&h, mode)?;
                h = self.activate(&h)?;
                Ok(h.global_avg_pool()?)
            }
        }
    }

    /// Pre-activation residual block: the batch-norm + activation runs
    /// before each convolution, and the projection shortcut (when present)
    /// consumes the pre-activated signal.
    fn residual_forward(&self, block: &ResidualBlock, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let pre = self.activate(&block.bn1.forward(x, mode)?)?;
        let skip = match &block.shortcut {
            Some(proj) => pre.conv2d(&proj.w, None, proj.stride, 0)?,
            None => x.clone(),
        };
        let mut h = pre.conv2d(&block.conv1.w, None, block.conv1.stride, 1)?;
        h = self.activate(&block.bn2.forward(&h, mode)?)?;
        h = h.conv2d(&block.conv2.w, None, block.conv2.stride, 1)?;
        Ok(h.add(&skip)?)
    }

    /// Cosine scores of already-computed features against the frozen head:
    /// rows are L2-normalized, then multiplied with the unit-norm centroid
    /// columns, so every score lies in [−1, 1].
    pub fn head_cosines(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features
            .l2_normalize_rows(FEATURE_NORM_EPS)?
            .matmul(&self.head_t)?)
    }

    /// Full forward pass: backbone features, cosine class scores, and
    /// `softmax(s·cosines)` probabilities. In `Mode::Train` the batch-norm
    /// layers use batch statistics and update their running averages; in
    /// `Mode::Eval` they read the stored running averages.
    pub fn forward(&self, x: &Tensor, s: f64, mode: Mode) -> Result<ForwardOutput> {
        if !(s.is_finite() && s > 0.0) {
            return Err(ModelError::Argument(format!(
                "cosine scale s must be positive and finite, got {s}"
            )));
        }
        let features = self.backbone_features(x, mode)?;
        let cosines = self.head_cosines(&features)?;
        let probs = cosines.scale(s)?.row_softmax()?;
        Ok(ForwardOutput {
            features,
            cosines,
            probs,
        })
    }

    /// Class predictions: the argmax of the cosine scores per row, ties
    /// broken toward the lowest class index. The cosine scale cancels in
    /// the argmax, so none is taken.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let features = self.backbone_features(x, Mode::Eval)?;
        Ok(self.head_cosines(&features)?.argmax_rows()?)
    }

    /// Trainable parameters in a fixed structural order, paired with
    /// stable names. The frozen head is deliberately absent: it must never
    /// enter an optimizer's parameter list.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::Mlp { layers } => {
                for (i, layer) in layers.iter().enumerate() {
                    out.push((format!("linear{i}.weight"), layer.w.clone()));
                    out.push((format!("linear{i}.bias"), layer.b.clone()));
                }
            }
            Backbone::ConvSmall { blocks } => {
                for (i, (conv, bn)) in blocks.iter().enumerate() {
                    out.push((format!("block{i}.conv.weight"), conv.w.clone()));
                    out.push((format!("block{i}.bn.gamma"), bn.gamma.clone()));
                    out.push((format!("block{i}.bn.beta"), bn.beta.clone()));
                }
            }
            Backbone::WideResnet {
                stem,
                groups,
                final_bn,
            } => {
                out.push(("stem.weight".to_string(), stem.w.clone()));
                for (g, group) in groups.iter().enumerate() {
                    for (b, block) in group.iter().enumerate() {
                        let p = format!("group{g}.block{b}");
                        out.push((format!("{p}.bn1.gamma"), block.bn1.gamma.clone()));
                        out.push((format!("{p}.bn1.beta"), block.bn1.beta.clone()));
                        out.push((format!("{p}.conv1.weight"), block.conv1.w.clone()));
                        out.push((format!("{p}.bn2.gamma"), block.bn2.gamma.clone()));
                        out.push((format!("{p}.bn2.beta"), block.bn2.beta.clone()));
                        out.push((format!("{p}.conv2.weight"), block.conv2.w.clone()));
                        if let Some(proj) = &block.shortcut {
                            out.push((format!("{p}.shortcut.weight"), proj.w.clone()));
                        }
                    }
                }
                out.push(("final_bn.gamma".to_string(), final_bn.gamma.clone()));
                out.push(("final_bn.beta".to_string(), final_bn.beta.clone()));
            }
        }
        out
    }

    /// Just the tensors of [`Model::named_parameters`], for optimizers.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn batch_norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::Mlp { .. } => {}
            Backbone::ConvSmall { blocks } => {
                for (i, (_, bn)) in blocks.iter().enumerate() {
                    out.push((format!("block{i}.bn"), bn));
                }
            }
            Backbone::WideResnet {
                groups, final_bn, ..
            } => {
                for (g, group) in groups.iter().enumerate() {
                    for (b, block) in group.iter().enumerate() {
                        out.push((format!("group{g}.block{b}.bn1"), &block.bn1));
                        out.push((format!("group{g}.block{b}.bn2"), &block.bn2));
                    }
                }
                out.push(("final_bn".to_string(), final_bn));
            }
        }
        out
    }

    /// Running batch-norm statistics by name (mean then variance per
    /// layer), in the same structural order the checkpoint uses.
    pub fn named_running_stats(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, bn) in self.batch_norms() {
            out.push((format!("{name}.running_mean"), bn.running_mean.borrow().clone()));
            out.push((format!("{name}.running_var"), bn.running_var.borrow().clone()));
        }
        out
    }

    /// Deep copy: fresh parameter leaves and running statistics with the
    /// same values. Useful for evaluating a training-time snapshot without
    /// sharing autodiff state with the live model.
    pub fn snapshot(&self) -> Model {
        let copy_param = |t: &Tensor| {
            Tensor::from_vec(&t.shape(), t.values())
                .expect("copy of a validated parameter is well-formed")
                .with_grad()
        };
        let copy_linear = |l: &Linear| Linear {
            w: copy_param(&l.w),
            b: copy_param(&l.b),
        };
        let copy_conv = |c: &Conv| Conv {
            w: copy_param(&c.w),
            stride: c.stride,
        };
        let copy_bn = |bn: &BatchNorm| BatchNorm {
            gamma: copy_param(&bn.gamma),
            beta: copy_param(&bn.beta),
            running_mean: RefCell::new(bn.running_mean.borrow().clone()),
            running_var: RefCell::new(bn.running_var.borrow().clone()),
        };
        let backbone = match &self.backbone {
            Backbone::Mlp { layers } => Backbone::Mlp {
                layers: layers.iter().map(copy_linear).collect(),
            },
            Backbone::ConvSmall { blocks } => Backbone::ConvSmall {
                blocks: blocks
                    .iter()
                    .map(|(c, bn)| (copy_conv(c), copy_bn(bn)))
                    .collect(),
            },
            Backbone::WideResnet {
                stem,
                groups,
                final_bn,
            } => Backbone::WideResnet {
                stem: copy_conv(stem),
                groups: groups
                    .iter()
                    .map(|g| {
                        g.iter()
                            .map(|b| ResidualBlock {
                                bn1: copy_bn(&b.bn1),
                                conv1: copy_conv(&b.conv1),
                                bn2: copy_bn(&b.bn2),
                                conv2: copy_conv(&b.conv2),
                                shortcut: b.shortcut.as_ref().map(copy_conv),
                            })
                            .collect()
                    })
                    .collect(),
                final_bn: copy_bn(final_bn),
            },
        };
        Model {
            config: self.config.clone(),
            centroids: self.centroids.clone(),
            head_t: transposed_constant(&self.centroids),
            backbone,
        }
    }
}

fn architecture_line(arch: &Architecture) -> String {
    match arch {
        Architecture::Mlp { hidden } => {
            let mut s = "mlp".to_string();
            for h in hidden {
                s.push_str(&format!(" {h}"));
            }
            s
        }
        Architecture::ConvSmall { widen } => format!("conv_small {widen}"),
        Architecture::WideResnet { depth, width } => format!("wideresnet {depth} {width}"),
    }
}

fn join_numbers(values: &[f64]) -> String {
    let fields: Vec<String> = values.iter().map(|v| format_f64_17(*v)).collect();
    fields.join(" ")
}

/// Writes a checkpoint: a `PEDCC-MODEL 1` header, the configuration, the
/// embedded centroid block, then every trainable parameter and running
/// statistic as named blocks in 17-significant-digit decimal. The text is
/// value-exact: loading recovers every f64 bit-for-bit.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let cfg = &model.config;
    let mut out = String::new();
    out.push_str("PEDCC-MODEL 1\n");
    let shape_fields: Vec<String> = cfg.input_shape.iter().map(|d| d.to_string()).collect();
    out.push_str(&format!("config input_shape {}\n", shape_fields.join(" ")));
    out.push_str(&format!(
        "config architecture {}\n",
        architecture_line(&cfg.architecture)
    ));
    out.push_str(&format!("config feature_dim {}\n", cfg.feature_dim));
    out.push_str(&format!("config num_classes {}\n", cfg.num_classes));
    out.push_str(&format!("config activation {}\n", cfg.activation));
    out.push_str(&format!("config seed {}\n", cfg.seed));
    out.push_str(&render_centroid_block(&model.centroids));
    for (name, tensor) in model.named_parameters() {
        let shape = tensor.shape();
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("param {name} {} {}\n", shape.len(), dims.join(" ")));
        out.push_str(&join_numbers(&tensor.values()));
        out.push('\n');
    }
    for (name, values) in model.named_running_stats() {
        out.push_str(&format!("stat {name} {}\n", values.len()));
        out.push_str(&join_numbers(&values));
        out.push('\n');
    }
    out.push_str("end\n");
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: String,
    last_line: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, line: usize, detail: String) -> ModelError {
        ModelError::Format {
            path: self.path.clone(),
            line,
            detail,
        }
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((idx, line)) => {
                self.last_line = idx + 1;
                Ok((idx + 1, line))
            }
            None => Err(self.fail(self.last_line + 1, format!("unexpected end of file, expected {what}"))),
        }
    }

    /// Reads one line of the form `config <key> <fields...>`, returning
    /// the fields.
    fn config_fields(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (no, line) = self.next_line(&format!("`config {key} ...`"))?;
        let mut fields = line.split_whitespace();
        if fields.next() != Some("config") || fields.next() != Some(key) {
            return Err(self.fail(no, format!("expected `config {key} ...`, got {line:?}")));
        }
        Ok((no, fields.collect()))
    }

    fn values_line(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let (no, line) = self.next_line(&format!("{expected} values for {what}"))?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != expected {
            return Err(self.fail(
                no,
                format!("{what}: expected {expected} values, got {}", fields.len()),
            ));
        }
        let mut out = Vec::with_capacity(expected);
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| self.fail(no, format!("{what}: bad real value {f:?}")))?;
            if !v.is_finite() {
                return Err(self.fail(no, format!("{what}: non-finite value {f:?}")));
            }
            out.push(v);
        }
        Ok(out)
    }
}

fn parse_usize_field(r: &Reader<'_>, no: usize, what: &str, field: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| r.fail(no, format!("bad {what} {field:?}")))
}

/// Reads a checkpoint written by [`save_model`], rebuilding the model and
/// restoring every parameter and running statistic exactly.
pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let mut r = Reader {
        lines: text.lines().enumerate(),
        path: path.display().to_string(),
        last_line: 0,
    };

    let (no, header) = r.next_line("`PEDCC-MODEL 1` header")?;
    if header != "PEDCC-MODEL 1" {
        return Err(r.fail(no, format!("expected header `PEDCC-MODEL 1`, got {header:?}")));
    }

    let (no, shape_fields) = r.config_fields("input_shape")?;
    if shape_fields.is_empty() {
        return Err(r.fail(no, "input_shape needs at least one extent".into()));
    }
    let input_shape = shape_fields
        .iter()
        .map(|f| parse_usize_field(&r, no, "input extent", f))
        .collect::<Result<Vec<usize>>>()?;

    let (no, arch_fields) = r.config_fields("architecture")?;
    let architecture = match arch_fields.split_first() {
        Some((&"mlp", rest)) => Architecture::Mlp {
            hidden: rest
                .iter()
                .map(|f| parse_usize_field(&r, no, "hidden size", f))
                .collect::<Result<Vec<usize>>>()?,
        },
        Some((&"conv_small", [w])) => Architecture::ConvSmall {
            widen: parse_usize_field(&r, no, "widen factor", w)?,
        },
        Some((&"wideresnet", [d, w])) => Architecture::WideResnet {
            depth: parse_usize_field(&r, no, "depth", d)?,
            width: parse_usize_field(&r, no, "width", w)?,
        },
        _ => {
            return Err(r.fail(
                no,
                format!("unrecognized architecture line {:?}", arch_fields.join(" ")),
            ))
        }
    };

    let (no, fields) = r.config_fields("feature_dim")?;
    let [field] = fields[..] else {
        return Err(r.fail(no, "feature_dim takes exactly one value".into()));
    };
    let feature_dim = parse_usize_field(&r, no, "feature_dim", field)?;

    let (no, fields) = r.config_fields("num_classes")?;
    let [field] = fields[..] else {
        return Err(r.fail(no, "num_classes takes exactly one value".into()));
    };
    let num_classes = parse_usize_field(&r, no, "num_classes", field)?;

    let (no, fields) = r.config_fields("activation")?;
    let [field] = fields[..] else {
        return Err(r.fail(no, "activation takes exactly one value".into()));
    };
    let activation: Activation = field.parse().map_err(|e| r.fail(no, e)).map_err(ModelError::from)?;

    let (no, fields) = r.config_fields("seed")?;
    let [field] = fields[..] else {
        return Err(r.fail(no, "seed takes exactly one value".into()));
    };
    let seed: u64 = field
        .parse()
        .map_err(|_| r.fail(no, format!("bad seed {field:?}")))?;

    let centroids = parse_centroid_block(&mut r.lines, &r.path)?;
    r.last_line += 1 + centroids.num_classes();

    let cfg = ModelConfig {
        input_shape,
        architecture,
        feature_dim,
        num_classes,
        activation,
        seed,
    };
    let model = build_model(cfg, &centroids)?;

    for (name, tensor) in model.named_parameters() {
        let (no, line) = r.next_line(&format!("`param {name} ...`"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let shape = tensor.shape();
        if fields.len() < 2 || fields[0] != "param" || fields[1] != name {
            return Err(r.fail(no, format!("expected `param {name} ...`, got {line:?}")));
        }
        let rank = parse_usize_field(&r, no, "rank", fields[2])?;
        let dims = fields[3..]
            .iter()
            .map(|f| parse_usize_field(&r, no, "dimension", f))
            .collect::<Result<Vec<usize>>>()?;
        if fields.len() != 3 + rank || dims != shape {
            return Err(r.fail(
                no,
                format!("parameter {name}: expected shape {shape:?}, got {dims:?}"),
            ));
        }
        let values = r.values_line(tensor.numel(), &format!("parameter {name}"))?;
        tensor.set_values(values)?;
    }

    for (name, bn) in model.batch_norms() {
        for (suffix, slot) in [
            ("running_mean", &bn.running_mean),
            ("running_var", &bn.running_var),
        ] {
            let full = format!("{name}.{suffix}");
            let (no, line) = r.next_line(&format!("`stat {full} ...`"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let expected_len = slot.borrow().len();
            if fields.len() != 3 || fields[0] != "stat" || fields[1] != full {
                return Err(r.fail(no, format!("expected `stat {full} <len>`, got {line:?}")));
            }
            let len = parse_usize_field(&r, no, "length", fields[2])?;
            if len != expected_len {
                return Err(r.fail(
                    no,
                    format!("statistic {full}: expected length {expected_len}, got {len}"),
                ));
            }
            let values = r.values_line(expected_len, &format!("statistic {full}"))?;
            if suffix == "running_var" && values.iter().any(|&v| v < 0.0) {
                return Err(r.fail(no + 1, format!("statistic {full}: variance must be non-negative")));
            }
            *slot.borrow_mut() = values;
        }
    }

    let (no, line) = r.next_line("`end`")?;
    if line != "end" {
        return Err(r.fail(no, format!("expected `end`, got {line:?}")));
    }
    if let Some((idx, line)) = r.lines.next() {
        return Err(r.fail(idx + 1, format!("unexpected trailing content {line:?}")));
    }
    Ok(model)
}
