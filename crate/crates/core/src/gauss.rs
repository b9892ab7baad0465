//! Diagonal Gaussian embeddings and the closed-form quantities defined on them.
//!
//! Every distance here operates on the *squared* 2-Wasserstein distance. For
//! diagonal covariances the trace term of the general formula collapses to
//! `Σ_d (√σ_a,d − √σ_b,d)²`, so the whole distance is O(D).
//!
//! The slice kernels (`*_parts`) skip validation and are what the encoder and
//! the tape call in hot loops; the [`GaussianEmbedding`] wrappers validate.

use crate::error::{Error, Result};

/// Lower bound applied to every materialized variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// A diagonal-covariance normal distribution `N(mean, diag(variance))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch {
                left: mean.len(),
                right: variance.len(),
            });
        }
        if let Some((index, &value)) = variance
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::NonPositiveVariance { index, value });
        }
        Ok(Self { mean, variance })
    }

    /// Isotropic embedding with the same variance on every axis.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![variance; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }
}

fn check_dims(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
pub fn w2_squared(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(w2_squared_parts(a.mean(), a.variance(), b.mean(), b.variance()))
}

/// Unchecked kernel behind [`w2_squared`].
#[inline]
pub fn w2_squared_parts(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> f64 {
    debug_assert_eq!(mean_a.len(), mean_b.len());
    let mut acc = 0.0;
    for d in 0..mean_a.len() {
        let dm = mean_a[d] - mean_b[d];
        let ds = var_a[d].sqrt() - var_b[d].sqrt();
        acc += dm * dm + ds * ds;
    }
    acc.max(0.0)
}

/// Same as [`w2_squared_parts`] but with standard deviations already taken.
#[inline]
pub fn w2_squared_sd(mean_a: &[f64], sd_a: &[f64], mean_b: &[f64], sd_b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..mean_a.len() {
        let dm = mean_a[d] - mean_b[d];
        let ds = sd_a[d] - sd_b[d];
        acc += dm * dm + ds * ds;
    }
    acc.max(0.0)
}

/// `KL(a ‖ b)` for diagonal Gaussians.
pub fn kl_divergence(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(kl_divergence_parts(a.mean(), a.variance(), b.mean(), b.variance()))
}

#[inline]
pub fn kl_divergence_parts(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..mean_a.len() {
        let dm = mean_b[d] - mean_a[d];
        let ratio = var_a[d] / var_b[d];
        acc += dm * dm / var_b[d] + ratio - 1.0 - ratio.ln();
    }
    (0.5 * acc).max(0.0)
}

/// `½ (KL(a‖b) + KL(b‖a))`, the symmetric score used by the KL contrastive arm.
#[inline]
pub fn symmetric_kl_parts(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..mean_a.len() {
        let dm = mean_a[d] - mean_b[d];
        let (va, vb) = (var_a[d], var_b[d]);
        acc += dm * dm * (1.0 / va + 1.0 / vb) + va / vb + vb / va - 2.0;
    }
    (0.25 * acc).max(0.0)
}

/// Prediction score `ŷ = −W2²(u, i)`; closer to zero is more similar.
pub fn prediction_score(user: &GaussianEmbedding, item: &GaussianEmbedding) -> Result<f64> {
    Ok(-w2_squared(user, item)?)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bounded contrastive score `(1/τ)·sigmoid(−W2²(u, i))`, valued in `(0, 1/τ)`.
pub fn lipschitz_score(user: &GaussianEmbedding, item: &GaussianEmbedding, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    Ok(sigmoid(-w2_squared(user, item)?) / tau)
}

/// Analytic partial derivatives of `w2_squared(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct W2Partials {
    pub mean_a: Vec<f64>,
    pub var_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub var_b: Vec<f64>,
}

pub fn w2_squared_partials(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<W2Partials> {
    check_dims(a, b)?;
    let d = a.dim();
    let mut out = W2Partials {
        mean_a: vec![0.0; d],
        var_a: vec![0.0; d],
        mean_b: vec![0.0; d],
        var_b: vec![0.0; d],
    };
    for k in 0..d {
        let (gm, gva, gvb) =
            w2_partials_at(a.mean()[k], a.variance()[k], b.mean()[k], b.variance()[k]);
        out.mean_a[k] = gm;
        out.mean_b[k] = -gm;
        out.var_a[k] = gva;
        out.var_b[k] = gvb;
    }
    Ok(out)
}

/// Per-coordinate partials `(∂/∂μ_a, ∂/∂σ_a, ∂/∂σ_b)`; `∂/∂μ_b` is the negated first entry.
#[inline]
pub fn w2_partials_at(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> (f64, f64, f64) {
    let ratio = (var_b / var_a).sqrt();
    (2.0 * (mean_a - mean_b), 1.0 - ratio, 1.0 - 1.0 / ratio)
}
