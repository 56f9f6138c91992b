//! Closed-form limit quantities.
//!
//! Expectations of local functions under product Bernoulli measures are
//! polynomials in the density, evaluated exactly by enumerating the truth
//! table. The variance of the limiting Gaussian part is a one-dimensional
//! integral with an integrable `1/√s` endpoint singularity, removed by the
//! substitution `s = u²` before adaptive quadrature.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{LocalFunction, WalkRateSet};
use crate::quadrature::{self, QuadratureError};

/// Absolute tolerance of [`z_variance`].
pub const Z_VARIANCE_TOLERANCE: f64 = 1e-10;
/// Panel cap of the adaptive quadrature.
pub const MAX_PANELS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("quadrature failed: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
}

/// `φ̄(λ) = ∫ φ dν_λ` and its derivative in `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMean {
    pub value: f64,
    pub derivative: f64,
}

/// Exact mean of `phi` under product Bernoulli(`lambda`).
pub fn mean_local(phi: &LocalFunction, lambda: f64) -> LocalMean {
    let m = phi.support().len() as i32;
    let mut value = 0.0;
    let mut derivative = 0.0;
    for (index, &entry) in phi.table().iter().enumerate() {
        let ones = index.count_ones() as i32;
        let zeros = m - ones;
        value += entry * lambda.powi(ones) * (1.0 - lambda).powi(zeros);
        let mut d = 0.0;
        if ones > 0 {
            d += ones as f64 * lambda.powi(ones - 1) * (1.0 - lambda).powi(zeros);
        }
        if zeros > 0 {
            d -= zeros as f64 * lambda.powi(ones) * (1.0 - lambda).powi(zeros - 1);
        }
        derivative += entry * d;
    }
    LocalMean { value, derivative }
}

/// `v(ρ) = Σ_z z ∫ r_z dν_ρ`.
pub fn asymptotic_speed(rates: &WalkRateSet, rho: f64) -> f64 {
    rates
        .entries
        .iter()
        .map(|(&z, f)| z as f64 * mean_local(f, rho).value)
        .sum()
}

/// `v′(ρ)`.
pub fn speed_derivative(rates: &WalkRateSet, rho: f64) -> f64 {
    rates
        .entries
        .iter()
        .map(|(&z, f)| z as f64 * mean_local(f, rho).derivative)
        .sum()
}

/// `σ² = Σ_z z² ∫ r_z dν_ρ`.
pub fn noise_coefficient(rates: &WalkRateSet, rho: f64) -> f64 {
    rates
        .entries
        .iter()
        .map(|(&z, f)| (z * z) as f64 * mean_local(f, rho).value)
        .sum()
}

/// How the statistics were obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Total number of truth-table patterns summed.
    pub patterns_enumerated: usize,
    pub jump_sizes: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStatistics {
    pub rho: f64,
    pub v: f64,
    pub v_prime: f64,
    pub sigma2: f64,
    pub provenance: Provenance,
}

impl RateStatistics {
    pub fn compute(rates: &WalkRateSet, rho: f64) -> Self {
        Self {
            rho,
            v: asymptotic_speed(rates, rho),
            v_prime: speed_derivative(rates, rho),
            sigma2: noise_coefficient(rates, rho),
            provenance: Provenance {
                patterns_enumerated: rates.entries.values().map(|f| f.table().len()).sum(),
                jump_sizes: rates.jumps().collect(),
            },
        }
    }
}

/// Parameters of the limiting Gaussian part: bulk diffusivity `D`, static
/// compressibility `χ = ρ(1−ρ)` and drift `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitVariance {
    pub diffusivity: f64,
    pub chi: f64,
    pub drift: f64,
}

impl LimitVariance {
    pub fn new(diffusivity: f64, rho: f64, drift: f64) -> Result<Self, TheoryError> {
        if !(diffusivity > 0.0 && diffusivity.is_finite()) {
            return Err(TheoryError::InvalidParameter {
                field: "diffusivity",
                reason: format!("{diffusivity} must be positive"),
            });
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(TheoryError::InvalidParameter {
                field: "rho",
                reason: format!("{rho} is outside [0, 1]"),
            });
        }
        Ok(Self {
            diffusivity,
            chi: rho * (1.0 - rho),
            drift,
        })
    }

    /// `D χ √(2/π)`.
    pub fn prefactor(&self) -> f64 {
        self.diffusivity * self.chi * (2.0 / std::f64::consts::PI).sqrt()
    }
}

/// `E[Z_t²] = D χ √(2/π) ∫_0^t (t−s) e^{−a²s/2} s^{-1/2} ds`, evaluated as
/// `D χ √(2/π) ∫_0^{√t} 2 (t − u²) e^{−a²u²/2} du`.
pub fn z_variance(t: f64, lv: &LimitVariance) -> Result<f64, TheoryError> {
    if t < 0.0 || t.is_nan() {
        return Err(TheoryError::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let prefactor = lv.prefactor();
    let half_a2 = 0.5 * lv.drift * lv.drift;
    let integrand = |u: f64| 2.0 * (t - u * u) * (-half_a2 * u * u).exp();
    let tolerance = Z_VARIANCE_TOLERANCE / prefactor.abs().max(1.0);
    let result = quadrature::integrate(integrand, 0.0, t.sqrt(), tolerance, MAX_PANELS)?;
    Ok(prefactor * result.value)
}

/// `Var(Z_{t+τ} − Z_t)`; by stationarity of increments this is `E[Z_τ²]`.
pub fn increment_variance(t: f64, tau: f64, lv: &LimitVariance) -> Result<f64, TheoryError> {
    if t < 0.0 {
        return Err(TheoryError::NegativeTime(t));
    }
    z_variance(tau, lv)
}

/// `Cov(Z_s, Z_t) = (V(s) + V(t) − V(|t−s|))/2` with `V = E[Z²]`.
pub fn z_covariance(s: f64, t: f64, lv: &LimitVariance) -> Result<f64, TheoryError> {
    Ok(0.5 * (z_variance(s, lv)? + z_variance(t, lv)? - z_variance((t - s).abs(), lv)?))
}

/// Variance of `X_t(f) − X_0(f)` for the stationary Ornstein–Uhlenbeck field
/// `∂X = DΔX + √(2Dχ)∇Ẇ` and the Gaussian test function `f(u) = e^{−u²/(2w²)}`:
/// `2χ√π (w − w²/√(w² + Dt))`.
pub fn ou_gaussian_increment_variance(t: f64, width: f64, diffusivity: f64, chi: f64) -> f64 {
    let w2 = width * width;
    2.0 * chi * std::f64::consts::PI.sqrt() * (width - w2 / (w2 + diffusivity * t).sqrt())
}

/// Invert [`ou_gaussian_increment_variance`] for `D`. Returns `None` when the
/// variance is outside the attainable range `(0, 2χ√π w)`.
pub fn diffusivity_from_increment_variance(
    variance: f64,
    t: f64,
    width: f64,
    chi: f64,
) -> Option<f64> {
    let ceiling = 2.0 * chi * std::f64::consts::PI.sqrt() * width;
    if !(variance > 0.0 && variance < ceiling && t > 0.0) {
        return None;
    }
    let ratio = width * width / (width - variance / (2.0 * chi * std::f64::consts::PI.sqrt()));
    Some((ratio * ratio - width * width) / t)
}
