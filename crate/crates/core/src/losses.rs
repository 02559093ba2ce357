//! The training objective: margin softmax and centroid MSE on labeled
//! rows, KL consistency and MMD-to-centroids on unlabeled rows, combined
//! as λ1·L1^(1/n) + λ2·L2 + λ3·L3 + λ4·L4.
//!
//! Every term returns a scalar tensor wired into the autodiff graph; the
//! centroid matrix and the teacher distribution are constants by contract,
//! so no gradient ever reaches them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pedcc::CentroidSet;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Gaussian-kernel bandwidth policy for the MMD term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelBandwidth {
    /// σ from the median pairwise squared distance of the combined sample,
    /// recomputed per batch (2σ² = median).
    Median,
    /// Fixed σ.
    Fixed(f64),
}

/// All tunables of the objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HyperParams {
    /// Cosine scale in the margin softmax.
    pub s: f64,
    /// Additive margin on the true-class cosine.
    pub m: f64,
    /// Root exponent n applied to the MSE term (≥ 1).
    pub n_root: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub bandwidth: KernelBandwidth,
}

impl HyperParams {
    /// The published CIFAR10 row: s=7.5, m=0.35, n=1, λ1=λ2=1, λ3=400,
    /// λ4=0.2.
    pub fn paper_cifar10() -> HyperParams {
        HyperParams {
            s: 7.5,
            m: 0.35,
            n_root: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 400.0,
            lambda4: 0.2,
            bandwidth: KernelBandwidth::Median,
        }
    }

    /// The published SVHN row: identical to CIFAR10 except λ3=1600,
    /// λ4=0.04.
    pub fn paper_svhn() -> HyperParams {
        HyperParams {
            lambda3: 1600.0,
            lambda4: 0.04,
            ..HyperParams::paper_cifar10()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(LossError::Argument(format!("s must be positive, got {}", self.s)));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(LossError::Argument(format!("m must be in [0,1), got {}", self.m)));
        }
        if !(self.n_root >= 1.0) {
            return Err(LossError::Argument(format!(
                "n_root must be ≥ 1, got {}",
                self.n_root
            )));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::Argument(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if let KernelBandwidth::Fixed(sigma) = self.bandwidth {
            if !(sigma > 0.0) {
                return Err(LossError::Argument(format!(
                    "kernel bandwidth must be positive, got {sigma}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams::paper_cifar10()
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_mse: f64,
    pub l2_am: f64,
    pub l3_kl: f64,
    /// Unbiased estimator — may be slightly negative by construction.
    pub l4_mmd: f64,
    pub total: f64,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(LossError::Argument(format!(
            "expected {rows} labels, got {}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Margin softmax over cosine scores: the true-class cosine is reduced by
/// `m` before everything is scaled by `s` and pushed through softmax
/// cross-entropy. `m = 0` reduces to plain cross-entropy on scaled
/// cosines.
pub fn am_softmax_loss(cosines: &Tensor, labels: &[usize], s: f64, m: f64) -> Result<Tensor> {
    let shape = cosines.shape();
    if shape.len() != 2 {
        return Err(LossError::Argument(format!(
            "cosines must be 2-D M×C, got shape {shape:?}"
        )));
    }
    let (rows, classes) = (shape[0], shape[1]);
    check_labels(labels, rows, classes)?;
    if !(s > 0.0) || !(0.0..1.0).contains(&m) {
        return Err(LossError::Argument(format!(
            "need s > 0 and m in [0,1), got s={s}, m={m}"
        )));
    }
    for (i, v) in cosines.values().iter().enumerate() {
        if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(v) {
            return Err(LossError::Argument(format!(
                "cosine {v} at flat index {i} outside [−1, 1]"
            )));
        }
    }
    let onehot = Tensor::one_hot(labels, classes)?;
    // logits = s·cos − s·m·onehot, i.e. the margin hits only the true class.
    let logits = cosines.scale(s)?.sub(&onehot.scale(s * m)?)?;
    let logp = logits.row_log_softmax()?;
    Ok(logp.mul(&onehot)?.sum()?.scale(-1.0 / rows as f64)?)
}

/// Mean squared distance between each feature row and its class centroid.
/// The centroids are constants; gradient reaches only `features`.
pub fn pedcc_mse_loss(
    features: &Tensor,
    labels: &[usize],
    centroids: &CentroidSet,
) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != centroids.dim() {
        return Err(LossError::Argument(format!(
            "features must be M×{}, got shape {shape:?}",
            centroids.dim()
        )));
    }
    let rows = shape[0];
    check_labels(labels, rows, centroids.num_classes())?;
    let mut target = Vec::with_capacity(rows * centroids.dim());
    for &y in labels {
        target.extend_from_slice(centroids.row(y));
    }
    let target = Tensor::from_vec(&shape, target)?;
    let diff = features.sub(&target)?;
    Ok(diff.mul(&diff)?.sum()?.scale(1.0 / rows as f64)?)
}

/// λ2·l2 + λ1·l1^(1/n). The root has an infinite slope at zero, so an
/// exactly-zero `l1` (features already on their centroids) short-circuits
/// to a constant with zero gradient — the correct fixed point.
pub fn labeled_loss(l1: &Tensor, l2: &Tensor, hp: &HyperParams) -> Result<Tensor> {
    hp.validate()?;
    if l1.numel() != 1 || l2.numel() != 1 {
        return Err(LossError::Argument("loss terms must be scalars".into()));
    }
    if l1.item() < 0.0 {
        return Err(LossError::Argument(format!(
            "mse term must be non-negative, got {}",
            l1.item()
        )));
    }
    let rooted = if hp.n_root == 1.0 {
        l1.clone()
    } else if l1.item() == 0.0 {
        Tensor::scalar(0.0)?
    } else {
        l1.powf(1.0 / hp.n_root)?
    };
    Ok(rooted.scale(hp.lambda1)?.add(&l2.scale(hp.lambda2)?)?)
}

fn check_probability_rows(name: &str, t: &Tensor) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(LossError::Argument(format!(
            "{name} must be 2-D S×C, got shape {shape:?}"
        )));
    }
    let (rows, classes) = (shape[0], shape[1]);
    let v = t.values();
    for i in 0..rows {
        let row = &v[i * classes..(i + 1) * classes];
        if row.iter().any(|&p| p < 0.0) {
            return Err(LossError::Argument(format!(
                "{name} row {i} has a negative entry"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::Argument(format!(
                "{name} row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok((rows, classes))
}

/// Mean KL divergence between teacher and student predictive rows.
///
/// The teacher must already be detached — this asserts it carries no graph
/// history, mirroring the contract that it "does not participate in the
/// backpropagation". Probabilities are clamped at 1e-12 inside the logs,
/// which also realizes the 0·log(0/q) = 0 convention (the outer factor is
/// the exact teacher probability).
pub fn kl_consistency_loss(p_teacher: &Tensor, p_student: &Tensor) -> Result<Tensor> {
    let (rows, classes) = check_probability_rows("teacher", p_teacher)?;
    let (s_rows, s_classes) = check_probability_rows("student", p_student)?;
    if (rows, classes) != (s_rows, s_classes) {
        return Err(LossError::Argument(format!(
            "teacher is {rows}×{classes} but student is {s_rows}×{s_classes}"
        )));
    }
    if !p_teacher.is_constant() {
        return Err(LossError::Argument(
            "teacher distribution must be detached (apply stop_gradient before the loss)".into(),
        ));
    }
    let log_t = p_teacher.clamp_min(1e-12)?.log()?;
    let log_s = p_student.clamp_min(1e-12)?.log()?;
    let kl = p_teacher.mul(&log_t.sub(&log_s)?)?;
    Ok(kl.sum()?.scale(1.0 / rows as f64)?)
}

/// The Gaussian (RBF) kernel exp(−‖x−y‖²/2σ²).
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * sigma * sigma)).exp()
}

/// Bandwidth from the median heuristic: 2σ² equals the median pairwise
/// squared distance over the combined rows of `a` and `b`. Falls back to
/// σ = 1 when all points coincide.
pub fn median_heuristic_sigma(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(LossError::Argument(format!(
            "need two 2-D row sets of equal width, got {sa:?} and {sb:?}"
        )));
    }
    let d = sa[1];
    let mut pool = a.values();
    pool.extend(b.values());
    let n = pool.len() / d;
    if n < 2 {
        return Err(LossError::Argument(
            "median heuristic needs at least 2 combined rows".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = (0..d)
                .map(|k| {
                    let diff = pool[i * d + k] - pool[j * d + k];
                    diff * diff
                })
                .sum();
            dists.push(sq);
        }
    }
    dists.sort_by(|x, y| x.total_cmp(y));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median <= 0.0 {
        return Ok(1.0);
    }
    Ok((median / 2.0).sqrt())
}

/// Unbiased squared-MMD estimate between two row sets under the Gaussian
/// kernel: within-set sums skip the diagonal and divide by n(n−1).
pub fn mmd_unbiased(a: &Tensor, b: &Tensor, sigma: f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(LossError::Argument(format!(
            "need two 2-D row sets of equal width, got {sa:?} and {sb:?}"
        )));
    }
    if sa[0] < 2 || sb[0] < 2 {
        return Err(LossError::Argument(format!(
            "the unbiased estimator divides by n(n−1); need ≥ 2 rows per set, got {} and {}",
            sa[0], sb[0]
        )));
    }
    if !(sigma > 0.0) {
        return Err(LossError::Argument(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    let (n_a, n_b) = (sa[0], sb[0]);
    let gamma = -1.0 / (2.0 * sigma * sigma);

    let offdiag_mean = |t: &Tensor, n: usize| -> Result<Tensor> {
        let k = t.pairwise_sq_dists(t)?.scale(gamma)?.exp()?;
        let mut mask = vec![1.0; n * n];
        for i in 0..n {
            mask[i * n + i] = 0.0;
        }
        let mask = Tensor::from_vec(&[n, n], mask)?;
        Ok(k.mul(&mask)?.sum()?.scale(1.0 / (n * (n - 1)) as f64)?)
    };

    let within_a = offdiag_mean(a, n_a)?;
    let within_b = offdiag_mean(b, n_b)?;
    let cross = a
        .pairwise_sq_dists(b)?
        .scale(gamma)?
        .exp()?
        .sum()?
        .scale(2.0 / (n_a * n_b) as f64)?;
    Ok(within_a.add(&within_b)?.sub(&cross)?)
}

/// MMD between unlabeled features and the centroid set: the sample rows
/// against the C predefined class centroids. Centroids are constant.
pub fn mmd_loss(z_u: &Tensor, centroids: &CentroidSet, sigma: f64) -> Result<Tensor> {
    let shape = z_u.shape();
    if shape.len() != 2 || shape[1] != centroids.dim() {
        return Err(LossError::Argument(format!(
            "features must be S×{}, got shape {shape:?}",
            centroids.dim()
        )));
    }
    mmd_unbiased(z_u, &centroids.to_tensor(), sigma)
}

/// λ3·l3 + λ4·l4.
pub fn unlabeled_loss(l3: &Tensor, l4: &Tensor, hp: &HyperParams) -> Result<Tensor> {
    hp.validate()?;
    if l3.numel() != 1 || l4.numel() != 1 {
        return Err(LossError::Argument("loss terms must be scalars".into()));
    }
    Ok(l3.scale(hp.lambda3)?.add(&l4.scale(hp.lambda4)?)?)
}

/// Outputs of one forward pass, as the objective consumes them. The
/// unlabeled part is absent in labeled-only training.
pub struct BatchOutputs<'a> {
    /// Row-normalized labeled features, M×D.
    pub labeled_features: &'a Tensor,
    /// Labeled cosine scores, M×C.
    pub labeled_cosines: &'a Tensor,
    pub labels: &'a [usize],
    pub unlabeled: Option<UnlabeledOutputs<'a>>,
}

/// Unlabeled-branch outputs: the teacher saw the original samples (and is
/// detached), the student sees the augmented ones.
pub struct UnlabeledOutputs<'a> {
    /// Teacher predictive rows, S×C, constant.
    pub teacher_probs: &'a Tensor,
    /// Student predictive rows on augmented samples, S×C.
    pub student_probs: &'a Tensor,
    /// Row-normalized unlabeled features, S×D (MMD input).
    pub features: &'a Tensor,
}

/// The full objective. Returns the differentiable total and the per-term
/// values; the breakdown always recomposes to the total exactly as
/// λ1·l1^(1/n) + λ2·l2 + λ3·l3 + λ4·l4.
pub fn total_loss(
    batch: &BatchOutputs<'_>,
    centroids: &CentroidSet,
    hp: &HyperParams,
) -> Result<(Tensor, LossBreakdown)> {
    hp.validate()?;
    let l1 = pedcc_mse_loss(batch.labeled_features, batch.labels, centroids)?;
    let l2 = am_softmax_loss(batch.labeled_cosines, batch.labels, hp.s, hp.m)?;
    let labeled = labeled_loss(&l1, &l2, hp)?;
    let (l3, l4, total) = match &batch.unlabeled {
        Some(u) => {
            let l3 = kl_consistency_loss(u.teacher_probs, u.student_probs)?;
            let sigma = match hp.bandwidth {
                KernelBandwidth::Fixed(sigma) => sigma,
                KernelBandwidth::Median => {
                    median_heuristic_sigma(u.features, &centroids.to_tensor())?
                }
            };
            let l4 = mmd_loss(u.features, centroids, sigma)?;
            let total = labeled.add(&unlabeled_loss(&l3, &l4, hp)?)?;
            (l3.item(), l4.item(), total)
        }
        None => (0.0, 0.0, labeled),
    };
    let breakdown = LossBreakdown {
        l1_mse: l1.item(),
        l2_am: l2.item(),
        l3_kl: l3,
        l4_mmd: l4,
        total: total.item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pedcc::simplex_centroids;

    fn row_tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn am_softmax_uniform_cosines_is_log_c() {
        let cos = row_tensor(&[vec![0.3; 10]]);
        let loss = am_softmax_loss(&cos, &[4], 7.5, 0.0).unwrap();
        assert!((loss.item() - 10.0f64.ln()).abs() < 1e-9, "{}", loss.item());
    }

    #[test]
    fn am_softmax_two_class_analytic() {
        let cos = row_tensor(&[vec![1.0, -1.0]]);
        let loss = am_softmax_loss(&cos, &[0], 1.0, 0.0).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss.item() - expected).abs() < 1e-9);
    }

    #[test]
    fn am_softmax_published_hyperparams_match_direct_formula() {
        // One row: true cosine 1, the other nine at the simplex value −1/9,
        // evaluated independently with scalar arithmetic.
        let mut row = vec![-1.0 / 9.0; 10];
        row[0] = 1.0;
        let (s, m) = (7.5f64, 0.35f64);
        let num = (s * (1.0 - m)).exp();
        let den: f64 = num + (1..10).map(|_| (s * (-1.0 / 9.0)).exp()).sum::<f64>();
        let expected = -(num / den).ln();
        let loss = am_softmax_loss(&row_tensor(&[row]), &[0], s, m).unwrap();
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn am_softmax_zero_margin_is_cross_entropy() {
        let cos = row_tensor(&[vec![0.2, -0.4, 0.9], vec![-0.1, 0.5, -0.8]]);
        let labels = [2usize, 1];
        let s = 7.5;
        let loss = am_softmax_loss(&cos, &labels, s, 0.0).unwrap();
        let logp = cos.scale(s).unwrap().row_log_softmax().unwrap();
        let ce = logp
            .mul(&Tensor::one_hot(&labels, 3).unwrap())
            .unwrap()
            .sum()
            .unwrap()
            .scale(-0.5)
            .unwrap();
        assert!((loss.item() - ce.item()).abs() < 1e-12);
    }

    #[test]
    fn am_softmax_decreases_as_true_cosine_rises() {
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let cy = -0.45 + 0.1 * k as f64;
            let cos = row_tensor(&[vec![cy, 0.3, -0.2]]);
            let loss = am_softmax_loss(&cos, &[0], 7.5, 0.35).unwrap().item();
            assert!(loss < last, "loss {loss} did not drop (prev {last})");
            last = loss;
        }
    }

    #[test]
    fn am_softmax_margin_never_helps() {
        let cos = row_tensor(&[vec![0.7, 0.1, -0.3]]);
        let mut last = 0.0;
        for k in 0..10 {
            let m = 0.099 * k as f64;
            let loss = am_softmax_loss(&cos, &[0], 7.5, m).unwrap().item();
            assert!(loss >= last, "loss {loss} fell below {last} at m={m}");
            last = loss;
        }
    }

    #[test]
    fn am_softmax_rejects_bad_inputs() {
        let cos = row_tensor(&[vec![0.5, 0.5]]);
        assert!(am_softmax_loss(&cos, &[2], 7.5, 0.35).is_err());
        assert!(am_softmax_loss(&cos, &[0, 1], 7.5, 0.35).is_err());
        let wild = row_tensor(&[vec![1.5, 0.0]]);
        assert!(am_softmax_loss(&wild, &[0], 7.5, 0.35).is_err());
        assert!(am_softmax_loss(&cos, &[0], 7.5, 1.0).is_err());
    }

    #[test]
    fn mse_zero_when_features_sit_on_centroids() {
        let cs = simplex_centroids(3, 4).unwrap();
        let feats = row_tensor(&[cs.row(1).to_vec(), cs.row(0).to_vec()]);
        let loss = pedcc_mse_loss(&feats, &[1, 0], &cs).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn mse_antipodal_feature_is_four() {
        let cs = simplex_centroids(2, 2).unwrap();
        let anti: Vec<f64> = cs.row(0).iter().map(|v| -v).collect();
        let loss = pedcc_mse_loss(&row_tensor(&[anti]), &[0], &cs).unwrap();
        assert!((loss.item() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn mse_matches_brute_force_double_loop() {
        let cs = simplex_centroids(4, 6).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) as f64 * 0.37).sin()).collect())
            .collect();
        let labels = [2usize, 0, 3, 1, 2];
        let loss = pedcc_mse_loss(&row_tensor(&rows), &labels, &cs).unwrap();
        let mut brute = 0.0;
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let d = v - cs.row(labels[i])[j];
                brute += d * d;
            }
        }
        brute /= 5.0;
        assert!((loss.item() - brute).abs() < 1e-12);
    }

    #[test]
    fn labeled_loss_weight_arithmetic() {
        let hp1 = HyperParams { n_root: 1.0, lambda1: 1.0, lambda2: 1.0, ..Default::default() };
        let l1 = Tensor::scalar(0.7).unwrap();
        let l2 = Tensor::scalar(1.3).unwrap();
        assert!((labeled_loss(&l1, &l2, &hp1).unwrap().item() - 2.0).abs() < 1e-12);

        let hp2 = HyperParams { n_root: 2.0, lambda1: 1.0, lambda2: 0.0, ..Default::default() };
        let four = Tensor::scalar(4.0).unwrap();
        assert!((labeled_loss(&four, &l2, &hp2).unwrap().item() - 2.0).abs() < 1e-12);

        let hp3 = HyperParams { lambda1: 0.0, ..Default::default() };
        assert!((labeled_loss(&l1, &l2, &hp3).unwrap().item() - 1.3).abs() < 1e-12);

        let neg = Tensor::scalar(-0.1).unwrap();
        assert!(labeled_loss(&neg, &l2, &hp1).is_err());
    }

    #[test]
    fn labeled_loss_zero_mse_has_zero_root_gradient() {
        // Exactly-zero MSE with n_root > 1: the guarded subgradient keeps
        // the features' gradient finite (zero through the root path).
        let cs = simplex_centroids(2, 2).unwrap();
        let feats = Tensor::from_vec(&[1, 2], cs.row(0).to_vec()).unwrap().with_grad();
        let l1 = pedcc_mse_loss(&feats, &[0], &cs).unwrap();
        let l2 = Tensor::scalar(0.5).unwrap();
        let hp = HyperParams { n_root: 2.0, ..Default::default() };
        let loss = labeled_loss(&l1, &l2, &hp).unwrap();
        loss.backward().unwrap();
        // The root path is severed, so the features get no update at all:
        // either no recorded gradient or an all-zero one.
        let grad = feats.grad().unwrap_or_else(|| vec![0.0, 0.0]);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn kl_identical_rows_is_zero() {
        let p = row_tensor(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]);
        let loss = kl_consistency_loss(&p, &p.scale(1.0).unwrap()).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn kl_one_hot_versus_uniform_is_log_two() {
        let t = row_tensor(&[vec![1.0, 0.0]]);
        let s = row_tensor(&[vec![0.5, 0.5]]).scale(1.0).unwrap();
        let loss = kl_consistency_loss(&t, &s).unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_brute_force_and_teacher_gets_no_gradient() {
        let teacher_rows = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.0, 0.5, 0.5, 0.0],
        ];
        let student_rows = vec![
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.1, 0.6, 0.2, 0.1],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.2, 0.3, 0.4, 0.1],
        ];
        let teacher = row_tensor(&teacher_rows);
        // The student must carry graph history so the loss is trainable.
        let student_leaf = row_tensor(&student_rows).with_grad();
        let student = student_leaf.scale(1.0).unwrap();
        let loss = kl_consistency_loss(&teacher, &student).unwrap();

        let mut brute = 0.0;
        for (trow, srow) in teacher_rows.iter().zip(&student_rows) {
            for (&pt, &ps) in trow.iter().zip(srow) {
                if pt > 0.0 {
                    brute += pt * (pt.max(1e-12).ln() - ps.max(1e-12).ln());
                }
            }
        }
        brute /= 4.0;
        assert!((loss.item() - brute).abs() < 1e-12);
        assert!(loss.item() >= 0.0);

        loss.backward().unwrap();
        assert!(student_leaf.grad().is_some());
    }

    #[test]
    fn kl_rejects_undetached_teacher_and_bad_rows() {
        let p = row_tensor(&[vec![0.5, 0.5]]);
        let live = row_tensor(&[vec![0.5, 0.5]]).with_grad().scale(1.0).unwrap();
        assert!(kl_consistency_loss(&live, &p).is_err());
        let unnormalized = row_tensor(&[vec![0.5, 0.6]]);
        assert!(kl_consistency_loss(&unnormalized, &p).is_err());
        assert!(kl_consistency_loss(&p, &unnormalized).is_err());
    }

    #[test]
    fn gaussian_kernel_basics() {
        let x = [0.3, -1.2, 0.5];
        assert_eq!(gaussian_kernel(&x, &x, 0.7), 1.0);
        // ‖x−y‖² = 2σ² ⇒ e^{−1}.
        let y = [0.3 + (2.0f64).sqrt() * 0.7, -1.2, 0.5];
        assert!((gaussian_kernel(&x, &y, 0.7) - (-1.0f64).exp()).abs() < 1e-12);
        let z = [1.0, 0.0, -2.0];
        assert_eq!(gaussian_kernel(&x, &z, 1.3), gaussian_kernel(&z, &x, 1.3));
    }

    #[test]
    fn mmd_degenerate_identity_is_exactly_zero() {
        let v = vec![0.5, -0.5, 0.5, 0.5];
        let a = row_tensor(&[v.clone(), v.clone(), v.clone()]);
        let b = row_tensor(&[v.clone(), v]);
        let loss = mmd_unbiased(&a, &b, 0.9).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn mmd_is_symmetric_in_its_sets() {
        let a = row_tensor(&[vec![0.1, 0.9], vec![-0.4, 0.2], vec![0.8, -0.1]]);
        let b = row_tensor(&[vec![0.3, 0.3], vec![-0.2, -0.6]]);
        let ab = mmd_unbiased(&a, &b, 1.1).unwrap().item();
        let ba = mmd_unbiased(&b, &a, 1.1).unwrap().item();
        assert_eq!(ab, ba);
    }

    #[test]
    fn mmd_rejects_single_row_sets() {
        let a = row_tensor(&[vec![0.1, 0.9]]);
        let b = row_tensor(&[vec![0.3, 0.3], vec![-0.2, -0.6]]);
        let err = mmd_unbiased(&a, &b, 1.0).unwrap_err();
        assert!(err.to_string().contains("unbiased"), "{err}");
    }

    #[test]
    fn unlabeled_loss_published_weight_rows() {
        let l3 = Tensor::scalar(0.01).unwrap();
        let l4 = Tensor::scalar(0.5).unwrap();
        let cifar = HyperParams::paper_cifar10();
        assert!((unlabeled_loss(&l3, &l4, &cifar).unwrap().item() - 4.1).abs() < 1e-12);
        let svhn = HyperParams::paper_svhn();
        let zero = Tensor::scalar(0.0).unwrap();
        assert_eq!(unlabeled_loss(&zero, &zero, &svhn).unwrap().item(), 0.0);
        let hp = HyperParams { lambda3: 0.0, ..HyperParams::paper_cifar10() };
        assert!((unlabeled_loss(&l3, &l4, &hp).unwrap().item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_loss_single_active_term_and_recomposition() {
        let cs = simplex_centroids(3, 4).unwrap();
        let feats = row_tensor(&[
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.9, 0.1, 0.3, 0.27110883423572],
        ])
        .l2_normalize_rows(1e-12)
        .unwrap();
        let cosines = feats.matmul(&cs.to_tensor().transpose().unwrap()).unwrap();
        let labels = [0usize, 2];

        let only_l2 = HyperParams {
            lambda1: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..HyperParams::paper_cifar10()
        };
        let batch = BatchOutputs {
            labeled_features: &feats,
            labeled_cosines: &cosines,
            labels: &labels,
            unlabeled: None,
        };
        let (total, bd) = total_loss(&batch, &cs, &only_l2).unwrap();
        let am = am_softmax_loss(&cosines, &labels, only_l2.s, only_l2.m).unwrap();
        assert!((total.item() - am.item()).abs() < 1e-12);

        // Recomposition with every term active.
        let teacher = row_tensor(&[vec![0.6, 0.2, 0.2], vec![0.1, 0.8, 0.1]]);
        let student = row_tensor(&[vec![0.3, 0.4, 0.3], vec![0.2, 0.5, 0.3]])
            .scale(1.0)
            .unwrap();
        let u_feats = row_tensor(&[vec![0.2, -0.4, 0.1, 0.6], vec![-0.3, 0.3, 0.5, -0.2]])
            .l2_normalize_rows(1e-12)
            .unwrap();
        let hp = HyperParams {
            n_root: 2.0,
            bandwidth: KernelBandwidth::Fixed(0.8),
            ..HyperParams::paper_cifar10()
        };
        let batch = BatchOutputs {
            labeled_features: &feats,
            labeled_cosines: &cosines,
            labels: &labels,
            unlabeled: Some(UnlabeledOutputs {
                teacher_probs: &teacher,
                student_probs: &student,
                features: &u_feats,
            }),
        };
        let (total, bd2) = total_loss(&batch, &cs, &hp).unwrap();
        let recomposed = hp.lambda1 * bd2.l1_mse.powf(1.0 / hp.n_root)
            + hp.lambda2 * bd2.l2_am
            + hp.lambda3 * bd2.l3_kl
            + hp.lambda4 * bd2.l4_mmd;
        assert!(
            (total.item() - recomposed).abs() < 1e-12,
            "total {} vs recomposed {recomposed}",
            total.item()
        );
        assert!(bd.l3_kl == 0.0 && bd.l4_mmd == 0.0);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::paper_cifar10().validate().is_ok());
        assert!(HyperParams { s: 0.0, ..Default::default() }.validate().is_err());
        assert!(HyperParams { m: -0.1, ..Default::default() }.validate().is_err());
        assert!(HyperParams { n_root: 0.5, ..Default::default() }.validate().is_err());
        assert!(HyperParams { lambda3: -1.0, ..Default::default() }.validate().is_err());
        assert!(
            HyperParams { bandwidth: KernelBandwidth::Fixed(0.0), ..Default::default() }
                .validate()
                .is_err()
        );
    }
}
