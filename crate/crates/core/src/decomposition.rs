//! Martingale plus additive-functional bookkeeping for the walker, and the
//! density observables built on top of a configuration.
//!
//! With `N_z` the number of `z`-jumps and `I_z = ∫ r_z(ξ_s) ds`,
//!
//! ```text
//! M_t = Σ_z z (N_z/√n − √n I_z)          (martingale part)
//! A_t = √n (∫ ω(ξ_s) ds − v t)            (additive functional)
//! (x_t − v n t)/√n = M_t + A_t
//! ⟨M⟩_t = ∫ Σ_z z² r_z(ξ_s) ds
//! ```
//!
//! `∫ω` is integrated on its own rather than as `Σ z I_z`, so the identity
//! is a real cross-check of the event accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::lattice::{Configuration, LocalFunction, SiteWeights, WalkRateSet};
use crate::mollifier;
use crate::theory::LocalMean;

/// Relative tolerance of the pathwise identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompositionError {
    #[error("decomposition identity broken at t = {time}: |defect| = {defect:e}")]
    IdentityBreach { time: f64, defect: f64 },
    #[error("trajectory jump sizes {found:?} do not match the rate set {expected:?}")]
    JumpMismatch { expected: Vec<i64>, found: Vec<i64> },
    #[error("probe (phi, epsilon = {epsilon}) was not tracked in this trajectory")]
    ProbeNotTracked { epsilon: f64 },
    #[error("mollifier window of {window} sites is wider than the torus of {lattice} sites")]
    WindowTooWide { window: usize, lattice: usize },
    #[error("trajectory has no samples")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub time: f64,
    pub position: i64,
    /// `(x_t − v n t)/√n`.
    pub centered_scaled: f64,
    pub martingale: f64,
    pub additive: f64,
    /// Predictable quadratic variation `⟨M⟩_t`.
    pub quadratic_variation: f64,
    /// Jump counts, in the order of [`DecompositionRecord::jumps`].
    pub counts: Vec<u64>,
    /// `M^{z}_t = N_z/√n − √n I_z` per jump size.
    pub jump_martingales: Vec<f64>,
}

impl DecompositionRow {
    /// `centered_scaled − (M + A)`.
    pub fn identity_defect(&self) -> f64 {
        self.centered_scaled - (self.martingale + self.additive)
    }

    /// `|defect| / (1 + |M| + |A|)`.
    pub fn relative_defect(&self) -> f64 {
        self.identity_defect().abs() / (1.0 + self.martingale.abs() + self.additive.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub jumps: Vec<i64>,
    pub rows: Vec<DecompositionRow>,
}

impl DecompositionRecord {
    pub fn last(&self) -> Option<&DecompositionRow> {
        self.rows.last()
    }

    pub fn max_relative_defect(&self) -> f64 {
        self.rows
            .iter()
            .map(DecompositionRow::relative_defect)
            .fold(0.0, f64::max)
    }
}

/// Build the decomposition at every sample time of `traj`. `speed` must be
/// `v(ρ)` for `rates`.
pub fn accumulate(
    traj: &Trajectory,
    rates: &WalkRateSet,
    speed: f64,
) -> Result<DecompositionRecord, DecompositionError> {
    let expected: Vec<i64> = rates.jumps().collect();
    if expected != traj.jumps {
        return Err(DecompositionError::JumpMismatch {
            expected,
            found: traj.jumps.clone(),
        });
    }
    let n = traj.n as f64;
    let root_n = n.sqrt();
    let rows = traj
        .samples
        .iter()
        .map(|s| {
            let t = s.time;
            let jump_martingales: Vec<f64> = s
                .counts
                .iter()
                .zip(&s.integrals.rates)
                .map(|(&count, &integral)| count as f64 / root_n - root_n * integral)
                .collect();
            let martingale = traj
                .jumps
                .iter()
                .zip(&jump_martingales)
                .map(|(&z, m)| z as f64 * m)
                .sum();
            let additive = root_n * (s.integrals.drift - speed * t);
            let row = DecompositionRow {
                time: t,
                position: s.position,
                centered_scaled: (s.position as f64 - speed * n * t) / root_n,
                martingale,
                additive,
                quadratic_variation: s.integrals.quadratic,
                counts: s.counts.clone(),
                jump_martingales,
            };
            if row.relative_defect() > IDENTITY_TOLERANCE {
                return Err(DecompositionError::IdentityBreach {
                    time: t,
                    defect: row.identity_defect(),
                });
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DecompositionRecord {
        jumps: traj.jumps.clone(),
        rows,
    })
}

/// `X^n(f) = n^{-1/2} Σ_x (η(x) − ρ) f(x/n)`, with `f(x/n)` given on the
/// sites `f.start, f.start + 1, …` (zero elsewhere).
pub fn fluctuation_field(config: &Configuration, f: &SiteWeights, n: u32, rho: f64) -> f64 {
    f.centered_sum(config, 0, rho) / (n as f64).sqrt()
}

/// `(φ_ε ⋆ ξ)(x0) = n^{-1} Σ_y φ_ε(y/n)(ξ(x0 + y) − ρ)`.
pub fn smoothed_density(
    config: &Configuration,
    epsilon: f64,
    n: u32,
    rho: f64,
    x0: i64,
) -> Result<f64, DecompositionError> {
    let weights = mollifier::site_weights(epsilon, n);
    if weights.len() >= config.len() {
        return Err(DecompositionError::WindowTooWide {
            window: weights.len(),
            lattice: config.len(),
        });
    }
    Ok(weights.centered_sum(config, x0, rho))
}

fn probe_index(
    traj: &Trajectory,
    phi: &LocalFunction,
    epsilon: f64,
) -> Result<usize, DecompositionError> {
    traj.probes
        .iter()
        .position(|p| &p.phi == phi && p.epsilon == epsilon)
        .ok_or(DecompositionError::ProbeNotTracked { epsilon })
}

/// `√n ∫_0^t [φ(ξ_s) − φ̄(ρ) − φ̄′(ρ)(ξ_s ⋆ φ_ε)(0)] ds` at every sample time.
pub fn replacement_residual_path(
    traj: &Trajectory,
    phi: &LocalFunction,
    epsilon: f64,
    mean: LocalMean,
) -> Result<Vec<f64>, DecompositionError> {
    let k = probe_index(traj, phi, epsilon)?;
    let root_n = (traj.n as f64).sqrt();
    Ok(traj
        .samples
        .iter()
        .map(|s| {
            root_n
                * (s.integrals.probe_local[k]
                    - mean.value * s.time
                    - mean.derivative * s.integrals.probe_smoothed[k])
        })
        .collect())
}

/// The replacement residual at the last sample time.
pub fn replacement_residual(
    traj: &Trajectory,
    phi: &LocalFunction,
    epsilon: f64,
    mean: LocalMean,
) -> Result<f64, DecompositionError> {
    replacement_residual_path(traj, phi, epsilon, mean)?
        .last()
        .copied()
        .ok_or(DecompositionError::NoSamples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, ResidualProbe, SimulationParams};
    use crate::lattice::{warmup_rates, ExchangeRate};
    use crate::theory::{asymptotic_speed, mean_local};
    use std::collections::BTreeMap;

    fn warmup(n: u32, rho: f64) -> (SimulationParams, WalkRateSet) {
        let (c, r) = warmup_rates(2.0, 1.0);
        (SimulationParams::new(n, rho, 1.0, c, r.clone()), r)
    }

    #[test]
    fn identity_holds_along_a_path() {
        let (p, r) = warmup(16, 0.7);
        let p = p.with_seed(11).with_uniform_samples(32);
        let traj = simulate(&p).unwrap();
        let v = asymptotic_speed(&r, 0.7);
        let rec = accumulate(&traj, &r, v).unwrap();
        assert_eq!(rec.rows.len(), 33);
        assert!(rec.max_relative_defect() <= IDENTITY_TOLERANCE);
        let first = &rec.rows[0];
        assert_eq!((first.martingale, first.additive, first.quadratic_variation), (0.0, 0.0, 0.0));
        for w in rec.rows.windows(2) {
            assert!(w[1].quadratic_variation >= w[0].quadratic_variation);
        }
        // warm-up rates sum to one, so <M>_t = t exactly
        for row in &rec.rows {
            assert!((row.quadratic_variation - row.time).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rates_give_zero_additive_part() {
        let mut entries = BTreeMap::new();
        entries.insert(1, LocalFunction::constant(0.7));
        entries.insert(-2, LocalFunction::constant(0.2));
        let r = WalkRateSet::new(entries);
        let p = SimulationParams::new(8, 0.4, 1.0, ExchangeRate::ssep(), r.clone())
            .with_seed(3)
            .with_uniform_samples(10);
        let traj = simulate(&p).unwrap();
        let v = asymptotic_speed(&r, 0.4);
        assert!((v - 0.3).abs() < 1e-15);
        let rec = accumulate(&traj, &r, v).unwrap();
        for row in &rec.rows {
            assert!(row.additive.abs() < 1e-12, "{}", row.additive);
        }
    }

    #[test]
    fn deterministic_environment_gives_zero_additive_part() {
        for rho in [0.0, 1.0] {
            let (p, r) = warmup(8, rho);
            let traj = simulate(&p.with_seed(2).with_uniform_samples(4)).unwrap();
            let rec = accumulate(&traj, &r, asymptotic_speed(&r, rho)).unwrap();
            assert!(rec.rows.iter().all(|row| row.additive.abs() < 1e-12));
        }
    }

    #[test]
    fn jump_mismatch_is_reported() {
        let (p, _) = warmup(4, 0.5);
        let traj = simulate(&p).unwrap();
        let mut other = BTreeMap::new();
        other.insert(2, LocalFunction::constant(1.0));
        assert!(matches!(
            accumulate(&traj, &WalkRateSet::new(other), 0.0),
            Err(DecompositionError::JumpMismatch { .. })
        ));
    }

    #[test]
    fn accumulation_is_additive_over_subintervals() {
        let (p, r) = warmup(16, 0.6);
        let v = asymptotic_speed(&r, 0.6);
        let whole = simulate(&p.clone().with_seed(8).with_sample_times(vec![1.0])).unwrap();
        let split = simulate(&p.with_seed(8).with_sample_times(vec![0.5, 1.0])).unwrap();
        let a = accumulate(&whole, &r, v).unwrap();
        let b = accumulate(&split, &r, v).unwrap();
        let total = b.rows[0].additive + (b.rows[1].additive - b.rows[0].additive);
        assert!((a.rows[0].additive - total).abs() < 1e-12);
        assert!((a.rows[0].additive - b.rows[1].additive).abs() < 1e-12);
        assert_eq!(a.rows[0].position, b.rows[1].position);
    }

    #[test]
    fn fluctuation_field_simple_cases() {
        let config = Configuration::full(40).unwrap();
        let zero = SiteWeights::sample(|_| 0.0, 8, -10, 10);
        assert_eq!(fluctuation_field(&config, &zero, 8, 0.3), 0.0);
        let f = SiteWeights::sample(|u| (-u * u).exp(), 8, -15, 15);
        let expected = (1.0 - 0.3) / 8f64.sqrt() * f.values.iter().sum::<f64>();
        assert!((fluctuation_field(&config, &f, 8, 0.3) - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothed_density_on_full_lattice() {
        let config = Configuration::full(200).unwrap();
        assert_eq!(smoothed_density(&config, 0.2, 32, 1.0, 0).unwrap(), 0.0);
        let mass: f64 = mollifier::site_weights(0.2, 32).values.iter().sum();
        let s = smoothed_density(&config, 0.2, 32, 0.5, 17).unwrap();
        assert!((s - 0.5 * mass).abs() < 1e-14);
        assert!((mass - 1.0).abs() < 1e-2);
        let small = Configuration::full(10).unwrap();
        assert!(matches!(
            smoothed_density(&small, 0.5, 64, 0.5, 0),
            Err(DecompositionError::WindowTooWide { .. })
        ));
    }

    #[test]
    fn constant_phi_has_zero_residual() {
        let (mut p, _) = warmup(16, 0.5);
        let phi = LocalFunction::constant(0.8);
        p.probes.push(ResidualProbe {
            phi: phi.clone(),
            epsilon: 0.25,
        });
        let traj = simulate(&p.with_seed(4).with_uniform_samples(4)).unwrap();
        let mean = mean_local(&phi, 0.5);
        assert_eq!(mean.derivative, 0.0);
        for value in replacement_residual_path(&traj, &phi, 0.25, mean).unwrap() {
            assert!(value.abs() < 1e-12);
        }
        assert!(matches!(
            replacement_residual(&traj, &phi, 0.1, mean),
            Err(DecompositionError::ProbeNotTracked { .. })
        ));
    }

    #[test]
    fn tracked_integrals_match_sampled_configurations() {
        // integrals of η(walker) sampled on a fine grid agree with the
        // event-exact accumulation up to discretisation error
        let (mut p, _) = warmup(4, 0.5);
        let phi = LocalFunction::occupation(0);
        p.probes.push(ResidualProbe {
            phi: phi.clone(),
            epsilon: 0.5,
        });
        p.record_configs = true;
        let steps = 20_000;
        let traj = simulate(&p.with_seed(6).with_uniform_samples(steps)).unwrap();
        let dt = 1.0 / steps as f64;
        let riemann: f64 = traj.samples[..steps]
            .iter()
            .map(|s| s.config.as_ref().unwrap().at(s.position) as u8 as f64 * dt)
            .sum();
        let exact = traj.samples[steps].integrals.probe_local[0];
        assert!((riemann - exact).abs() < 0.02, "{riemann} vs {exact}");
        let smoothed: f64 = traj.samples[..steps]
            .iter()
            .map(|s| {
                smoothed_density(s.config.as_ref().unwrap(), 0.5, 4, 0.5, s.position).unwrap() * dt
            })
            .sum();
        let exact = traj.samples[steps].integrals.probe_smoothed[0];
        assert!((smoothed - exact).abs() < 0.02, "{smoothed} vs {exact}");
    }
}
