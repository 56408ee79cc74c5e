//! Transductive Gaussian prototype fusion.
//!
//! Each episode yields two sets of prototypes (mean-based and completed). Each
//! set softly assigns every support and query sample to a class; the weighted
//! mean and per-dimension variance of those assignments define one diagonal
//! Gaussian per class. The completed-prototype Gaussian acts as the prior, the
//! mean-based one as the likelihood, and the fused prototype is the mean of
//! their product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Softmax sharpness of the soft assignment.
    pub lambda: f64,
    /// Lower bound applied to estimated variances.
    pub variance_floor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagonalGaussian {
    /// Builds a Gaussian, raising every variance to at least `floor`.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, floor: f64) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::dim("gaussian variance", mean.len(), variance.len()));
        }
        if !(floor > 0.0) {
            return Err(Error::InvalidArgument("variance floor must be positive".into()));
        }
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if variance.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        let variance = variance.into_iter().map(|v| v.max(floor)).collect();
        Ok(Self { mean, variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Closed-form product of two diagonal Gaussians (normalizing constant dropped):
/// `μ' = (σ²⊙μ̂ + σ̂²⊙μ)/(σ̂² + σ²)`, `σ'² = σ²⊙σ̂²/(σ̂² + σ²)`.
pub fn gaussian_product(prior: &DiagonalGaussian, likelihood: &DiagonalGaussian) -> Result<DiagonalGaussian> {
    if prior.dim() != likelihood.dim() {
        return Err(Error::dim("gaussian product", prior.dim(), likelihood.dim()));
    }
    let n = prior.dim();
    let mut mean = Vec::with_capacity(n);
    let mut variance = Vec::with_capacity(n);
    for i in 0..n {
        let (mp, vp) = (prior.mean[i], prior.variance[i]);
        let (ml, vl) = (likelihood.mean[i], likelihood.variance[i]);
        let total = vp + vl;
        mean.push((vl * mp + vp * ml) / total);
        variance.push(vl * vp / total);
    }
    Ok(DiagonalGaussian { mean, variance })
}

/// Per-sample class responsibilities. Labeled rows are exact one-hot vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignment {
    pub rows: Vec<Vec<f64>>,
    pub labeled: Vec<bool>,
}

impl SoftAssignment {
    pub fn num_classes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Column `k` of the responsibility matrix.
    pub fn weights(&self, class: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[class])
    }
}

/// Softmax over classes of `λ·cos(x, p_c)` for unlabeled samples, one-hot for
/// labeled ones. `labels[i]` is the roster index of sample `i`, or `None`.
pub fn soft_assign(
    samples: &[&[f64]],
    labels: &[Option<usize>],
    prototypes: &[Vec<f64>],
    lambda: f64,
) -> Result<SoftAssignment> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if samples.len() != labels.len() {
        return Err(Error::dim("soft assignment labels", samples.len(), labels.len()));
    }
    let c = prototypes.len();
    if c == 0 {
        return Err(Error::Insufficient("no prototypes".into()));
    }
    for (k, p) in prototypes.iter().enumerate() {
        if linalg::norm(p) == 0.0 {
            return Err(Error::ZeroNorm(format!("prototype {k}")));
        }
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, (x, label)) in samples.iter().zip(labels).enumerate() {
        let row = match label {
            Some(k) if *k < c => {
                let mut r = vec![0.0; c];
                r[*k] = 1.0;
                r
            }
            Some(k) => return Err(Error::InvalidArgument(format!("sample {i}: label {k} out of range"))),
            None => {
                if linalg::norm(x) == 0.0 {
                    return Err(Error::ZeroNorm(format!("sample {i}")));
                }
                let logits = prototypes
                    .iter()
                    .map(|p| linalg::cosine(x, p).map(|s| lambda * s))
                    .collect::<Result<Vec<_>>>()?;
                linalg::softmax(&logits)
            }
        };
        rows.push(row);
    }
    Ok(SoftAssignment {
        labeled: labels.iter().map(Option::is_some).collect(),
        rows,
    })
}

/// Weighted mean and (unfloored) weighted population variance of class `k`,
/// plus the total weight.
fn weighted_moments(samples: &[&[f64]], assignment: &SoftAssignment, class: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if class >= assignment.num_classes() {
        return Err(Error::InvalidArgument(format!("class index {class} out of range")));
    }
    if samples.len() != assignment.rows.len() {
        return Err(Error::dim("assignment rows", samples.len(), assignment.rows.len()));
    }
    let dim = samples.first().map_or(0, |s| s.len());
    let total: f64 = assignment.weights(class).sum();
    if !(total > 0.0) {
        return Err(Error::Insufficient(format!("class {class} has zero total responsibility")));
    }
    let mut mean = vec![0.0; dim];
    for (x, w) in samples.iter().zip(assignment.weights(class)) {
        for (m, &xi) in mean.iter_mut().zip(*x) {
            *m += w * xi;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; dim];
    for (x, w) in samples.iter().zip(assignment.weights(class)) {
        for ((v, &xi), &m) in var.iter_mut().zip(*x).zip(&mean) {
            *v += w * (xi - m) * (xi - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= total);
    Ok((mean, var, total))
}

/// Responsibility-weighted Gaussian of one class.
pub fn weighted_gaussian_estimate(
    samples: &[&[f64]],
    assignment: &SoftAssignment,
    class: usize,
    variance_floor: f64,
) -> Result<DiagonalGaussian> {
    let (mean, var, _) = weighted_moments(samples, assignment, class)?;
    DiagonalGaussian::new(mean, var, variance_floor)
}

pub fn mean_fuse(mean_based: &[f64], completed: &[f64]) -> Result<Vec<f64>> {
    if mean_based.len() != completed.len() {
        return Err(Error::dim("mean fusion", mean_based.len(), completed.len()));
    }
    Ok(mean_based.iter().zip(completed).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Result of [`fuse_prototypes`], including both Gaussians per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub fused: Vec<Vec<f64>>,
    /// Estimated from the mean-based prototypes' assignment (likelihood).
    pub mean_based: Vec<DiagonalGaussian>,
    /// Estimated from the completed prototypes' assignment (prior).
    pub completed: Vec<DiagonalGaussian>,
    pub posterior: Vec<DiagonalGaussian>,
    pub mean_assignment: SoftAssignment,
    pub completed_assignment: SoftAssignment,
}

pub fn fuse_prototypes(
    samples: &[&[f64]],
    labels: &[Option<usize>],
    mean_prototypes: &[Vec<f64>],
    completed_prototypes: &[Vec<f64>],
    config: &FusionConfig,
) -> Result<Fusion> {
    if mean_prototypes.len() != completed_prototypes.len() {
        return Err(Error::dim("prototype sets", mean_prototypes.len(), completed_prototypes.len()));
    }
    let mean_assignment = soft_assign(samples, labels, mean_prototypes, config.lambda)?;
    let completed_assignment = soft_assign(samples, labels, completed_prototypes, config.lambda)?;
    let c = mean_prototypes.len();
    let mut mean_based = Vec::with_capacity(c);
    let mut completed = Vec::with_capacity(c);
    let mut posterior = Vec::with_capacity(c);
    for k in 0..c {
        let likelihood = weighted_gaussian_estimate(samples, &mean_assignment, k, config.variance_floor)?;
        let prior = weighted_gaussian_estimate(samples, &completed_assignment, k, config.variance_floor)?;
        posterior.push(gaussian_product(&prior, &likelihood)?);
        mean_based.push(likelihood);
        completed.push(prior);
    }
    Ok(Fusion {
        fused: posterior.iter().map(|g| g.mean.clone()).collect(),
        mean_based,
        completed,
        posterior,
        mean_assignment,
        completed_assignment,
    })
}

/// Gradient of a loss with respect to the completed prototypes, given the
/// gradient with respect to the fused prototypes.
///
/// The mean-based Gaussian does not depend on the completed prototypes; the
/// prior depends on them through the unlabeled rows of the completed
/// assignment. Floored variance entries pass no gradient.
pub fn fusion_backward(
    samples: &[&[f64]],
    completed_prototypes: &[Vec<f64>],
    fusion: &Fusion,
    fused_grad: &[Vec<f64>],
    config: &FusionConfig,
) -> Result<Vec<Vec<f64>>> {
    let c = completed_prototypes.len();
    if fused_grad.len() != c {
        return Err(Error::dim("fused gradient", c, fused_grad.len()));
    }
    let assignment = &fusion.completed_assignment;
    // dL/dw[x][k] for every sample and class.
    let mut weight_grad = vec![vec![0.0; c]; samples.len()];
    for k in 0..c {
        let (mu_hat, var_raw, total) = weighted_moments(samples, assignment, k)?;
        let like = &fusion.mean_based[k];
        let prior_var = &fusion.completed[k].variance;
        let g = &fused_grad[k];
        let dim = mu_hat.len();
        let mut g_mean = vec![0.0; dim];
        let mut g_var = vec![0.0; dim];
        for i in 0..dim {
            let (vl, ml) = (like.variance[i], like.mean[i]);
            let denom = prior_var[i] + vl;
            g_mean[i] = g[i] * vl / denom;
            if var_raw[i] >= config.variance_floor {
                g_var[i] = g[i] * vl * (ml - mu_hat[i]) / (denom * denom);
            }
        }
        for (x, wg) in samples.iter().zip(weight_grad.iter_mut()) {
            let mut acc = 0.0;
            for i in 0..dim {
                let dx = x[i] - mu_hat[i];
                acc += g_mean[i] * dx + g_var[i] * (dx * dx - var_raw[i]);
            }
            wg[k] = acc / total;
        }
    }
    let mut proto_grad = vec![vec![0.0; completed_prototypes[0].len()]; c];
    for ((x, row), (wg, &labeled)) in samples
        .iter()
        .zip(&assignment.rows)
        .zip(weight_grad.iter().zip(&assignment.labeled))
    {
        if labeled {
            continue;
        }
        let mix: f64 = row.iter().zip(wg).map(|(w, g)| w * g).sum();
        for k in 0..c {
            let logit_grad = row[k] * (wg[k] - mix);
            if logit_grad != 0.0 {
                linalg::cosine_grad_wrt_second(x, &completed_prototypes[k], config.lambda * logit_grad, &mut proto_grad[k]);
            }
        }
    }
    Ok(proto_grad)
}

/// Per-class diagnostic record for offline inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFusionDiagnostics {
    pub mean_based_mean: Vec<f64>,
    pub mean_based_std: Vec<f64>,
    pub completed_mean: Vec<f64>,
    pub completed_std: Vec<f64>,
    pub fused_mean: Vec<f64>,
    pub fused_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDiagnostics {
    pub classes: Vec<ClassFusionDiagnostics>,
    pub mean_responsibilities: Vec<Vec<f64>>,
    pub completed_responsibilities: Vec<Vec<f64>>,
}

impl Fusion {
    pub fn diagnostics(&self) -> FusionDiagnostics {
        FusionDiagnostics {
            classes: (0..self.fused.len())
                .map(|k| ClassFusionDiagnostics {
                    mean_based_mean: self.mean_based[k].mean.clone(),
                    mean_based_std: self.mean_based[k].std(),
                    completed_mean: self.completed[k].mean.clone(),
                    completed_std: self.completed[k].std(),
                    fused_mean: self.posterior[k].mean.clone(),
                    fused_std: self.posterior[k].std(),
                })
                .collect(),
            mean_responsibilities: self.mean_assignment.rows.clone(),
            completed_responsibilities: self.completed_assignment.rows.clone(),
        }
    }
}
