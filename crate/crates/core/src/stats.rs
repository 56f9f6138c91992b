//! Ensembles and the estimators that compare them with the limit theory.
//!
//! An [`EnsembleSummary`] keeps one record per run keyed by run index, so
//! merging is a union and every estimator sees the runs in the same order no
//! matter how they were produced.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::decomposition::{accumulate, replacement_residual, DecompositionError};
use crate::dynamics::{simulate, DynamicsError, ResidualProbe, SimulationParams};
use crate::lattice::SiteWeights;
use crate::numeric::{covariance, mean, run_seed, variance, variance_standard_error};
use crate::theory::{self, LimitVariance, LocalMean, RateStatistics, TheoryError};

#[derive(Debug, Error)]
pub enum RunFailure {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("run {run} (seed {seed}) failed: {source}")]
    Run {
        run: u64,
        seed: u64,
        #[source]
        source: RunFailure,
    },
    #[error("run {0} appears in both summaries with different contents")]
    DuplicateRun(u64),
    #[error("summaries describe different models")]
    IncompatibleSummaries,
    #[error("no samples")]
    NoSamples,
    #[error("need at least {needed} samples, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

/// Decomposition at one sample time of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub time: f64,
    pub position: i64,
    pub centered_scaled: f64,
    pub martingale: f64,
    pub additive: f64,
    pub quadratic_variation: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: u64,
    pub seed: u64,
    pub points: Vec<RunPoint>,
    /// Replacement residual at the horizon, one per probe.
    pub residuals: Vec<f64>,
    pub max_relative_defect: f64,
    pub proposals: u64,
}

/// Simulate run `run` of the ensemble defined by `params`.
pub fn simulate_run(
    params: &SimulationParams,
    speed: f64,
    probe_means: &[LocalMean],
    run: u64,
) -> Result<RunRecord, RunFailure> {
    let seed = run_seed(params.seed, run);
    let p = params.clone().with_seed(seed);
    let traj = simulate(&p)?;
    let record = accumulate(&traj, &params.walk, speed)?;
    let residuals = params
        .probes
        .iter()
        .zip(probe_means)
        .map(|(probe, &m)| replacement_residual(&traj, &probe.phi, probe.epsilon, m))
        .collect::<Result<Vec<_>, _>>()?;
    let max_relative_defect = record.max_relative_defect();
    let points = record
        .rows
        .into_iter()
        .map(|r| RunPoint {
            time: r.time,
            position: r.position,
            centered_scaled: r.centered_scaled,
            martingale: r.martingale,
            additive: r.additive,
            quadratic_variation: r.quadratic_variation,
            counts: r.counts,
        })
        .collect();
    Ok(RunRecord {
        run,
        seed,
        points,
        residuals,
        max_relative_defect,
        proposals: traj.telemetry.exchange_proposals + traj.telemetry.walker_proposals,
    })
}

/// Mean and variance of a sample with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let variance = if values.len() > 1 { variance(values) } else { 0.0 };
        Self {
            mean: mean(values),
            mean_se: (variance / n).sqrt(),
            variance,
            variance_se: if values.len() > 3 {
                variance_standard_error(values)
            } else {
                f64::NAN
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub time: f64,
    pub count: usize,
    pub position: Moments,
    pub centered_scaled: Moments,
    pub martingale: Moments,
    pub additive: Moments,
    pub quadratic_variation: Moments,
    pub covariance: f64,
    pub covariance_se: f64,
    pub correlation: f64,
}

/// A value with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n: u32,
    pub rho: f64,
    pub horizon: f64,
    pub speed: f64,
    pub jumps: Vec<i64>,
    pub probes: Vec<ResidualProbe>,
    pub runs: BTreeMap<u64, RunRecord>,
}

/// Run `runs` independent trajectories with seeds `run_seed(params.seed, i)`.
pub fn run_ensemble(params: &SimulationParams, runs: u64) -> Result<EnsembleSummary, StatsError> {
    run_ensemble_range(params, 0..runs)
}

/// Runs with indices in `range`; a failing run aborts with the lowest failing
/// index reported.
pub fn run_ensemble_range(
    params: &SimulationParams,
    range: Range<u64>,
) -> Result<EnsembleSummary, StatsError> {
    let speed = theory::asymptotic_speed(&params.walk, params.rho);
    let means: Vec<LocalMean> = params
        .probes
        .iter()
        .map(|p| theory::mean_local(&p.phi, params.rho))
        .collect();
    let results: Vec<Result<RunRecord, StatsError>> = range
        .into_par_iter()
        .map(|run| {
            simulate_run(params, speed, &means, run).map_err(|source| StatsError::Run {
                run,
                seed: run_seed(params.seed, run),
                source,
            })
        })
        .collect();
    let mut summary = EnsembleSummary::empty(params, speed);
    for result in results {
        let record = result?;
        summary.runs.insert(record.run, record);
    }
    Ok(summary)
}

impl EnsembleSummary {
    pub fn empty(params: &SimulationParams, speed: f64) -> Self {
        Self {
            n: params.n,
            rho: params.rho,
            horizon: params.horizon,
            speed,
            jumps: params.walk.jumps().collect(),
            probes: params.probes.clone(),
            runs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Union of the run sets.
    pub fn merge(mut self, other: Self) -> Result<Self, StatsError> {
        if self.n != other.n
            || self.rho != other.rho
            || self.horizon != other.horizon
            || self.jumps != other.jumps
            || self.probes != other.probes
        {
            return Err(StatsError::IncompatibleSummaries);
        }
        for (run, record) in other.runs {
            match self.runs.get(&run) {
                Some(existing) if existing != &record => return Err(StatsError::DuplicateRun(run)),
                _ => {
                    self.runs.insert(run, record);
                }
            }
        }
        Ok(self)
    }

    /// Keep only the runs with index below `count`.
    pub fn truncated(&self, count: u64) -> Self {
        let mut out = self.clone();
        out.runs = self.runs.range(..count).map(|(&k, v)| (k, v.clone())).collect();
        out
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.runs
            .values()
            .next()
            .map(|r| r.points.iter().map(|p| p.time).collect())
            .unwrap_or_default()
    }

    /// One value per run at sample index `index`.
    pub fn column<F: Fn(&RunPoint) -> f64>(&self, index: usize, f: F) -> Vec<f64> {
        self.runs.values().map(|r| f(&r.points[index])).collect()
    }

    pub fn time_stats(&self) -> Result<Vec<TimeStats>, StatsError> {
        if self.is_empty() {
            return Err(StatsError::NoSamples);
        }
        let times = self.sample_times();
        Ok(times
            .iter()
            .enumerate()
            .map(|(k, &time)| {
                let m = self.column(k, |p| p.martingale);
                let a = self.column(k, |p| p.additive);
                let cov = if m.len() > 1 { covariance(&m, &a) } else { 0.0 };
                let martingale = Moments::of(&m);
                let additive = Moments::of(&a);
                let denom = (martingale.variance * additive.variance).sqrt();
                TimeStats {
                    time,
                    count: m.len(),
                    position: Moments::of(&self.column(k, |p| p.position as f64)),
                    centered_scaled: Moments::of(&self.column(k, |p| p.centered_scaled)),
                    martingale,
                    additive,
                    quadratic_variation: Moments::of(&self.column(k, |p| p.quadratic_variation)),
                    covariance: cov,
                    covariance_se: product_standard_error(&m, &a),
                    correlation: if denom > 0.0 { (cov / denom).clamp(-1.0, 1.0) } else { 0.0 },
                }
            })
            .collect())
    }

    /// Statistics at the last sample time.
    pub fn final_stats(&self) -> Result<TimeStats, StatsError> {
        self.time_stats()?.pop().ok_or(StatsError::NoSamples)
    }

    /// `x_T/(nT)` averaged over runs.
    pub fn speed_estimate(&self) -> Result<Estimate, StatsError> {
        let last = self.sample_times().len().checked_sub(1).ok_or(StatsError::NoSamples)?;
        let scale = self.n as f64 * self.runs.values().next().unwrap().points[last].time;
        let m = Moments::of(&self.column(last, |p| p.position as f64 / scale));
        Ok(Estimate {
            value: m.mean,
            standard_error: m.mean_se,
        })
    }

    /// `A` along the sample grid, one path per run.
    pub fn additive_paths(&self) -> Vec<Vec<f64>> {
        self.runs
            .values()
            .map(|r| r.points.iter().map(|p| p.additive).collect())
            .collect()
    }

    pub fn max_relative_defect(&self) -> f64 {
        self.runs
            .values()
            .map(|r| r.max_relative_defect)
            .fold(0.0, f64::max)
    }

    pub fn total_proposals(&self) -> u64 {
        self.runs.values().map(|r| r.proposals).sum()
    }

    /// Residual values of probe `index`, one per run.
    pub fn residuals(&self, index: usize) -> Vec<f64> {
        self.runs.values().map(|r| r.residuals[index]).collect()
    }
}

/// Standard error of the sample covariance, from the spread of the centered
/// products.
fn product_standard_error(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return f64::NAN;
    }
    let (ma, mb) = (mean(a), mean(b));
    let products: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    (variance(&products) / a.len() as f64).sqrt()
}

/// An observed statistic against its theoretical target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub observed: f64,
    pub standard_error: f64,
    pub target: f64,
}

impl Comparison {
    pub fn z_score(&self) -> f64 {
        let gap = self.observed - self.target;
        if gap == 0.0 {
            0.0
        } else {
            gap / self.standard_error
        }
    }

    pub fn within(&self, standard_errors: f64) -> bool {
        (self.observed - self.target).abs() <= standard_errors * self.standard_error
    }

    pub fn relative_error(&self) -> f64 {
        (self.observed - self.target).abs() / self.target.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub time: f64,
    /// `Var((x_T − vnT)/√n)` against `σ²T + v′² E[Z_T²]`.
    pub total: Comparison,
    /// `Var(M_T)` against `σ²T`.
    pub martingale: Comparison,
    /// `Var(A_T)` against `v′² E[Z_T²]`.
    pub additive: Comparison,
    /// `Var(M+A) − Var(M) − Var(A)` against 0.
    pub additivity: Comparison,
}

pub fn clt_check(
    summary: &EnsembleSummary,
    rates: &RateStatistics,
    lv: &LimitVariance,
) -> Result<CltReport, StatsError> {
    let last = summary.final_stats()?;
    let t = last.time;
    let z = theory::z_variance(t, lv)?;
    let slope2 = rates.v_prime * rates.v_prime;
    Ok(CltReport {
        time: t,
        total: Comparison {
            observed: last.centered_scaled.variance,
            standard_error: last.centered_scaled.variance_se,
            target: rates.sigma2 * t + slope2 * z,
        },
        martingale: Comparison {
            observed: last.martingale.variance,
            standard_error: last.martingale.variance_se,
            target: rates.sigma2 * t,
        },
        additive: Comparison {
            observed: last.additive.variance,
            standard_error: last.additive.variance_se,
            target: slope2 * z,
        },
        additivity: Comparison {
            observed: 2.0 * last.covariance,
            standard_error: 2.0 * last.covariance_se,
            target: 0.0,
        },
    })
}

/// Increment statistics of a family of paths at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementMoment {
    pub lag: usize,
    pub tau: f64,
    pub count: usize,
    pub variance: f64,
    /// `E|Δ|^λ`.
    pub abs_moment: f64,
}

/// Pool the increments `P(t+τ) − P(t)` over runs and start times on a uniform
/// grid of step `dt`. The variance is taken about the mean at each start time.
pub fn increment_moments(
    paths: &[Vec<f64>],
    dt: f64,
    lags: &[usize],
    lambda: f64,
) -> Result<Vec<IncrementMoment>, StatsError> {
    let len = paths.first().map(Vec::len).ok_or(StatsError::NoSamples)?;
    if paths.iter().any(|p| p.len() != len) {
        return Err(StatsError::DegenerateGrid("paths of unequal length".into()));
    }
    if paths.len() < 2 {
        return Err(StatsError::InsufficientSamples {
            needed: 2,
            found: paths.len(),
        });
    }
    lags.iter()
        .map(|&lag| {
            if lag == 0 || lag >= len {
                return Err(StatsError::DegenerateGrid(format!("lag {lag} for {len} grid points")));
            }
            let mut var_sum = 0.0;
            let mut abs_sum = 0.0;
            let mut count = 0;
            for start in 0..len - lag {
                let increments: Vec<f64> = paths.iter().map(|p| p[start + lag] - p[start]).collect();
                var_sum += variance(&increments);
                abs_sum += increments.iter().map(|d| d.abs().powf(lambda)).sum::<f64>();
                count += increments.len();
            }
            let starts = (len - lag) as f64;
            Ok(IncrementMoment {
                lag,
                tau: lag as f64 * dt,
                count,
                variance: var_sum / starts,
                abs_moment: abs_sum / count as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub points: usize,
}

impl LinearFit {
    pub fn least_squares(x: &[f64], y: &[f64]) -> Result<Self, StatsError> {
        if x.len() != y.len() || x.len() < 3 {
            return Err(StatsError::DegenerateGrid(format!("{} points", x.len())));
        }
        let (mx, my) = (mean(x), mean(y));
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        if sxx <= 0.0 {
            return Err(StatsError::DegenerateGrid("all abscissae equal".into()));
        }
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        let dof = (x.len() - 2) as f64;
        Ok(Self {
            slope,
            intercept,
            slope_se: (rss / dof / sxx).sqrt(),
            points: x.len(),
        })
    }

    /// Two-sided Student-t interval for the slope.
    pub fn slope_interval(&self, level: f64) -> (f64, f64) {
        let t = StudentsT::new(0.0, 1.0, (self.points - 2) as f64)
            .map(|d| d.inverse_cdf(0.5 + level / 2.0))
            .unwrap_or(f64::NAN);
        (self.slope - t * self.slope_se, self.slope + t * self.slope_se)
    }
}

fn log_log_fit(
    moments: &[IncrementMoment],
    value: impl Fn(&IncrementMoment) -> f64,
) -> Result<LinearFit, StatsError> {
    if moments.len() < 3 {
        return Err(StatsError::DegenerateGrid(format!("{} lags", moments.len())));
    }
    let (lo, hi) = moments.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), m| {
        (lo.min(m.tau), hi.max(m.tau))
    });
    if !(lo > 0.0) || (hi / lo).log10() < 1.5 - 1e-12 {
        return Err(StatsError::DegenerateGrid(format!(
            "lags span {:.2} decades, need 1.5",
            (hi / lo).log10()
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for m in moments {
        let v = value(m);
        if !(v > 0.0) {
            return Err(StatsError::DegenerateGrid(format!("nonpositive moment at tau {}", m.tau)));
        }
        x.push(m.tau.ln());
        y.push(v.ln());
    }
    LinearFit::least_squares(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstEstimate {
    pub hurst: f64,
    /// 95% interval from the regression residuals. It reflects lack of fit
    /// across lags, not the Monte Carlo error of each variance.
    pub interval: (f64, f64),
    pub fit: LinearFit,
}

/// `H = slope/2` of `log Var(Δ)` against `log τ`.
pub fn estimate_hurst(moments: &[IncrementMoment]) -> Result<HurstEstimate, StatsError> {
    let fit = log_log_fit(moments, |m| m.variance)?;
    let (lo, hi) = fit.slope_interval(0.95);
    Ok(HurstEstimate {
        hurst: fit.slope / 2.0,
        interval: (lo / 2.0, hi / 2.0),
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub lambda: f64,
    pub fit: LinearFit,
    /// `3λ/4`.
    pub target: f64,
    pub passes: bool,
}

/// Default moment order, inside `(4/3, 2)`.
pub const DEFAULT_TIGHTNESS_ORDER: f64 = 1.5;

/// Slope of `log E|Δ|^λ` against `log τ`; passes when at least `3λ/4 − 0.1`.
/// The moments must have been computed with the same `lambda`.
pub fn tightness_exponent(
    moments: &[IncrementMoment],
    lambda: f64,
) -> Result<TightnessReport, StatsError> {
    if !(lambda > 4.0 / 3.0 && lambda <= 2.0) {
        return Err(StatsError::InvalidParameter {
            field: "lambda",
            reason: format!("{lambda} is outside (4/3, 2]"),
        });
    }
    let fit = log_log_fit(moments, |m| m.abs_moment)?;
    let target = 0.75 * lambda;
    Ok(TightnessReport {
        lambda,
        fit,
        target,
        passes: fit.slope >= target - 0.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub samples: usize,
    pub correlation: f64,
    /// 95% Fisher interval.
    pub interval: (f64, f64),
    pub chi_square: f64,
    pub p_value: f64,
    pub passed: bool,
}

/// Minimum number of pairs for [`independence_test`] and [`normality_check`].
pub const MIN_TEST_SAMPLES: usize = 1000;

/// Pearson correlation plus a 2×2 contingency test on the quadrants defined
/// by the two medians.
pub fn independence_test(a: &[f64], b: &[f64]) -> Result<IndependenceReport, StatsError> {
    let n = a.len().min(b.len());
    if n < MIN_TEST_SAMPLES || a.len() != b.len() {
        return Err(StatsError::InsufficientSamples {
            needed: MIN_TEST_SAMPLES,
            found: n,
        });
    }
    let denom = (variance(a) * variance(b)).sqrt();
    let correlation = if denom > 0.0 {
        (covariance(a, b) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let fisher = correlation.clamp(-0.999_999_999, 0.999_999_999).atanh();
    let half = 1.96 / ((n - 3) as f64).sqrt();
    let interval = ((fisher - half).tanh(), (fisher + half).tanh());

    let (ma, mb) = (median(a), median(b));
    let mut table = [[0.0f64; 2]; 2];
    for (x, y) in a.iter().zip(b) {
        table[(*x > ma) as usize][(*y > mb) as usize] += 1.0;
    }
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let total = n as f64;
    let mut chi_square = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] * cols[j] / total;
            if expected > 0.0 {
                chi_square += (table[i][j] - expected).powi(2) / expected;
            }
        }
    }
    let p_value = erfc((chi_square / 2.0).sqrt());
    Ok(IndependenceReport {
        samples: n,
        correlation,
        interval,
        chi_square,
        p_value,
        passed: correlation.abs() <= 3.0 / total.sqrt() && p_value >= 0.01,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub samples: usize,
    pub mean: Comparison,
    pub variance: Comparison,
    /// Non-excess kurtosis against 3.
    pub kurtosis: Comparison,
    pub ks_distance: f64,
    /// `1.63/√N`, the 1% critical value.
    pub ks_threshold: f64,
    pub passed: bool,
}

/// Compare a sample that should be standard normal with `N(0, 1)`. Moments
/// use normal-theory standard errors and must lie within 3 of them; the
/// Kolmogorov–Smirnov distance must be below the 1% critical value.
pub fn normality_check(samples: &[f64]) -> Result<NormalityReport, StatsError> {
    let n = samples.len();
    if n < MIN_TEST_SAMPLES {
        return Err(StatsError::InsufficientSamples {
            needed: MIN_TEST_SAMPLES,
            found: n,
        });
    }
    let nf = n as f64;
    let m = mean(samples);
    let central2 = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf;
    let central4 = samples.iter().map(|x| (x - m).powi(4)).sum::<f64>() / nf;
    let mean_cmp = Comparison {
        observed: m,
        standard_error: (1.0 / nf).sqrt(),
        target: 0.0,
    };
    let variance_cmp = Comparison {
        observed: variance(samples),
        standard_error: (2.0 / (nf - 1.0)).sqrt(),
        target: 1.0,
    };
    let kurtosis_cmp = Comparison {
        observed: central4 / (central2 * central2),
        standard_error: (24.0 / nf).sqrt(),
        target: 3.0,
    };

    let normal = Normal::standard();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ks_distance = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            ((i + 1) as f64 / nf - f).max(f - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    let ks_threshold = 1.63 / nf.sqrt();
    let passed = ks_distance <= ks_threshold
        && mean_cmp.within(3.0)
        && variance_cmp.within(3.0)
        && kurtosis_cmp.within(3.0);
    Ok(NormalityReport {
        samples: n,
        mean: mean_cmp,
        variance: variance_cmp,
        kurtosis: kurtosis_cmp,
        ks_distance,
        ks_threshold,
        passed,
    })
}

/// Residual samples of one observable at one `(n, ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCell {
    pub n: u32,
    pub epsilon: f64,
    pub phi_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMoment {
    pub n: u32,
    pub epsilon: f64,
    pub phi_id: String,
    pub count: usize,
    pub second_moment: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayVerdict {
    pub phi_id: String,
    pub epsilon: f64,
    /// Second moment nonincreasing in `n` within 2 SE.
    pub monotone_in_n: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauVerdict {
    pub phi_id: String,
    /// Largest-`n` second moment does not grow as `ε` decreases (within 2 SE).
    pub monotone_in_epsilon: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub cells: Vec<CellMoment>,
    pub decay: Vec<DecayVerdict>,
    pub plateau: Vec<PlateauVerdict>,
    pub passed: bool,
}

impl ReplacementReport {
    pub fn decay_for<'a>(&'a self, phi_id: &'a str) -> impl Iterator<Item = &'a DecayVerdict> {
        self.decay.iter().filter(move |d| d.phi_id == phi_id)
    }

    pub fn plateau_for(&self, phi_id: &str) -> Option<&PlateauVerdict> {
        self.plateau.iter().find(|p| p.phi_id == phi_id)
    }
}

fn not_above(later: &Estimate, earlier: &Estimate, slack: f64) -> bool {
    let pooled = (later.standard_error.powi(2) + earlier.standard_error.powi(2)).sqrt();
    later.value <= earlier.value + slack * pooled
}

/// Second moments of replacement residuals per cell, with trend verdicts.
pub fn replacement_decay(cells: &[ResidualCell]) -> Result<ReplacementReport, StatsError> {
    if cells.is_empty() {
        return Err(StatsError::NoSamples);
    }
    let mut moments = Vec::new();
    for cell in cells {
        if cell.values.len() < 2 {
            return Err(StatsError::InsufficientSamples {
                needed: 2,
                found: cell.values.len(),
            });
        }
        let squares: Vec<f64> = cell.values.iter().map(|v| v * v).collect();
        let m = Moments::of(&squares);
        moments.push(CellMoment {
            n: cell.n,
            epsilon: cell.epsilon,
            phi_id: cell.phi_id.clone(),
            count: squares.len(),
            second_moment: Estimate {
                value: m.mean,
                standard_error: m.mean_se,
            },
        });
    }
    moments.sort_by(|a, b| {
        a.phi_id
            .cmp(&b.phi_id)
            .then(b.epsilon.total_cmp(&a.epsilon))
            .then(a.n.cmp(&b.n))
    });

    let mut groups: BTreeMap<String, Vec<(f64, Vec<&CellMoment>)>> = BTreeMap::new();
    for m in &moments {
        let eps_groups = groups.entry(m.phi_id.clone()).or_default();
        match eps_groups.last_mut() {
            Some((eps, list)) if *eps == m.epsilon => list.push(m),
            _ => eps_groups.push((m.epsilon, vec![m])),
        }
    }
    let mut decay = Vec::new();
    let mut plateau = Vec::new();
    for (phi_id, eps_groups) in &groups {
        if eps_groups.len() < 2 {
            return Err(StatsError::DegenerateGrid(format!(
                "{phi_id}: need at least 2 values of epsilon"
            )));
        }
        let mut plateaus = Vec::new();
        for (epsilon, list) in eps_groups {
            if list.len() < 3 {
                return Err(StatsError::DegenerateGrid(format!(
                    "{phi_id}, epsilon {epsilon}: need at least 3 values of n"
                )));
            }
            decay.push(DecayVerdict {
                phi_id: phi_id.clone(),
                epsilon: *epsilon,
                monotone_in_n: list
                    .windows(2)
                    .all(|w| not_above(&w[1].second_moment, &w[0].second_moment, 2.0)),
            });
            plateaus.push(list.last().unwrap().second_moment);
        }
        // eps_groups are ordered by decreasing epsilon
        plateau.push(PlateauVerdict {
            phi_id: phi_id.clone(),
            monotone_in_epsilon: plateaus.windows(2).all(|w| not_above(&w[1], &w[0], 2.0)),
        });
    }
    let passed =
        decay.iter().all(|d| d.monotone_in_n) && plateau.iter().all(|p| p.monotone_in_epsilon);
    Ok(ReplacementReport {
        cells: moments,
        decay,
        plateau,
        passed,
    })
}

/// Standard Brownian paths on the grid `k·dt`, `k = 0..=steps`.
pub fn brownian_paths(steps: usize, dt: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let scale = dt.sqrt();
    (0..count)
        .map(|_| {
            let mut path = Vec::with_capacity(steps + 1);
            let mut x = 0.0;
            path.push(x);
            for _ in 0..steps {
                let g: f64 = StandardNormal.sample(&mut rng);
                x += scale * g;
                path.push(x);
            }
            path
        })
        .collect()
}

/// Centered Gaussian paths vanishing at `times[0] = 0` with covariance
/// `cov(s, t)` on the remaining times, by Cholesky factorization.
pub fn gaussian_paths<F: Fn(f64, f64) -> f64>(
    times: &[f64],
    cov: F,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, StatsError> {
    if times.first() != Some(&0.0) || times.len() < 2 {
        return Err(StatsError::DegenerateGrid("grid must start at 0".into()));
    }
    let inner = &times[1..];
    let k = inner.len();
    let matrix = DMatrix::from_fn(k, k, |i, j| cov(inner[i], inner[j]));
    let factor = matrix
        .cholesky()
        .ok_or_else(|| StatsError::DegenerateGrid("covariance is not positive definite".into()))?
        .unpack();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let g = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let values = &factor * g;
            std::iter::once(0.0).chain(values.iter().copied()).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusivityEstimate {
    pub increment_variance: Estimate,
    pub diffusivity: f64,
    pub width: f64,
    pub lag: f64,
}

/// Recover `D` from `Var(X_t(f) − X_0(f))` for a Gaussian test function of
/// the given width, simulating the environment alone from `ν_ρ`.
pub fn estimate_diffusivity(
    params: &SimulationParams,
    runs: u64,
    width: f64,
    lag: f64,
) -> Result<DiffusivityEstimate, StatsError> {
    if !(lag > 0.0 && lag <= params.horizon) {
        return Err(StatsError::InvalidParameter {
            field: "lag",
            reason: format!("{lag} is outside (0, T]"),
        });
    }
    let mut p = params.clone();
    p.simulate_walker = false;
    p.record_configs = true;
    p.probes.clear();
    p.sample_times = vec![0.0, lag];
    let size = p.lattice_size() as i64;
    let n = p.n as f64;
    let first = -(size / 2);
    let weights = SiteWeights::sample(
        |u| (-u * u / (2.0 * width * width)).exp(),
        p.n,
        first,
        first + size - 1,
    );
    let rho = p.rho;
    let increments = (0..runs)
        .into_par_iter()
        .map(|run| {
            let seed = run_seed(p.seed, run);
            let traj = simulate(&p.clone().with_seed(seed)).map_err(|e| StatsError::Run {
                run,
                seed,
                source: e.into(),
            })?;
            let field = |k: usize| {
                let config = traj.samples[k].config.as_ref().expect("configs recorded");
                weights.centered_sum(config, 0, rho) / n.sqrt()
            };
            Ok(field(1) - field(0))
        })
        .collect::<Result<Vec<f64>, StatsError>>()?;
    let m = Moments::of(&increments);
    let diffusivity =
        theory::diffusivity_from_increment_variance(m.variance, lag, width, rho * (1.0 - rho))
            .unwrap_or(f64::NAN);
    Ok(DiffusivityEstimate {
        increment_variance: Estimate {
            value: m.variance,
            standard_error: m.variance_se,
        },
        diffusivity,
        width,
        lag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{warmup_rates, ExchangeRate, LocalFunction, WalkRateSet};
    use rand::Rng;

    fn warmup(n: u32, rho: f64) -> SimulationParams {
        let (c, r) = warmup_rates(2.0, 1.0);
        SimulationParams::new(n, rho, 1.0, c, r).with_uniform_samples(8)
    }

    #[test]
    fn single_run_summary_matches_record() {
        let p = warmup(8, 0.7).with_seed(4);
        let summary = run_ensemble(&p, 1).unwrap();
        let speed = theory::asymptotic_speed(&p.walk, 0.7);
        let record = simulate_run(&p, speed, &[], 0).unwrap();
        assert_eq!(summary.runs[&0], record);
        let last = summary.final_stats().unwrap();
        assert_eq!(last.martingale.mean, record.points.last().unwrap().martingale);
        assert_eq!(last.count, 1);
    }

    #[test]
    fn merge_is_order_insensitive() {
        let p = warmup(4, 0.5).with_seed(12);
        let all = run_ensemble(&p, 100).unwrap();
        let split = |k: u64| {
            let a = run_ensemble_range(&p, 0..k).unwrap();
            let b = run_ensemble_range(&p, k..100).unwrap();
            (a, b)
        };
        let (a, b) = split(50);
        assert_eq!(a.clone().merge(b.clone()).unwrap(), all);
        assert_eq!(b.merge(a).unwrap(), all);
        let (a, b) = split(25);
        assert_eq!(a.merge(b).unwrap(), all);
        assert_eq!(all.time_stats().unwrap(), run_ensemble(&p, 100).unwrap().time_stats().unwrap());
    }

    #[test]
    fn merge_rejects_conflicts() {
        let p = warmup(4, 0.5).with_seed(1);
        let a = run_ensemble(&p, 3).unwrap();
        let mut b = a.clone();
        b.runs.get_mut(&1).unwrap().seed ^= 1;
        assert!(matches!(a.clone().merge(b), Err(StatsError::DuplicateRun(1))));
        let other = run_ensemble(&warmup(4, 0.6), 1).unwrap();
        assert!(matches!(a.merge(other), Err(StatsError::IncompatibleSummaries)));
    }

    #[test]
    fn failing_run_reports_its_seed() {
        let mut p = warmup(4, 0.5).with_seed(1);
        p.event_budget = 1.0;
        match run_ensemble(&p, 4) {
            Err(StatsError::Run { run, seed, .. }) => {
                assert_eq!(run, 0);
                assert_eq!(seed, run_seed(1, 0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_summary_has_no_samples() {
        let p = warmup(4, 0.5);
        let s = EnsembleSummary::empty(&p, 0.0);
        assert!(matches!(s.time_stats(), Err(StatsError::NoSamples)));
    }

    #[test]
    fn constant_rates_have_no_additive_part() {
        let r = WalkRateSet::new(
            [(1, LocalFunction::constant(0.6)), (-1, LocalFunction::constant(0.4))]
                .into_iter()
                .collect(),
        );
        let p = SimulationParams::new(8, 0.5, 1.0, ExchangeRate::ssep(), r.clone())
            .with_seed(5)
            .with_uniform_samples(4);
        let summary = run_ensemble(&p, 2000).unwrap();
        let rates = RateStatistics::compute(&r, 0.5);
        assert_eq!(rates.v_prime, 0.0);
        let lv = LimitVariance::new(1.0, 0.5, rates.v).unwrap();
        let report = clt_check(&summary, &rates, &lv).unwrap();
        assert!(report.additive.observed < 1e-20);
        assert!(report.martingale.within(3.0), "{:?}", report.martingale);
        assert!(report.total.within(3.0), "{:?}", report.total);
    }

    #[test]
    fn comparison_scores() {
        let c = Comparison {
            observed: 1.2,
            standard_error: 0.1,
            target: 1.0,
        };
        assert!((c.z_score() - 2.0).abs() < 1e-12);
        assert!(c.within(3.0) && !c.within(1.0));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let fit = LinearFit::least_squares(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12 && (fit.intercept + 1.0).abs() < 1e-12);
        assert!(fit.slope_se < 1e-12);
        assert!(LinearFit::least_squares(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    fn dyadic_lags() -> Vec<usize> {
        vec![1, 2, 4, 8, 16, 32]
    }

    #[test]
    fn hurst_of_brownian_motion() {
        let paths = brownian_paths(64, 1.0 / 64.0, 4000, 7);
        let moments = increment_moments(&paths, 1.0 / 64.0, &dyadic_lags(), 2.0).unwrap();
        let h = estimate_hurst(&moments).unwrap();
        assert!(h.interval.0 <= 0.5 && 0.5 <= h.interval.1, "{h:?}");
        assert!((h.hurst - 0.5).abs() < 0.02);
    }

    #[test]
    fn hurst_of_theory_covariance() {
        let lv = LimitVariance::new(1.0, 0.5, 0.0).unwrap();
        let times: Vec<f64> = (0..=64).map(|k| k as f64 / 64.0).collect();
        let paths = gaussian_paths(
            &times,
            |s, t| theory::z_covariance(s, t, &lv).unwrap(),
            4000,
            8,
        )
        .unwrap();
        let moments = increment_moments(&paths, 1.0 / 64.0, &dyadic_lags(), 1.5).unwrap();
        let h = estimate_hurst(&moments).unwrap();
        assert!((h.hurst - 0.75).abs() < 0.02, "{h:?}");
        assert!(h.interval.0 < h.hurst && h.hurst < h.interval.1);
        let t = tightness_exponent(&moments, 1.5).unwrap();
        assert!((t.fit.slope - 1.125).abs() < 0.03, "{t:?}");
        assert!(t.passes);
    }

    #[test]
    fn tightness_of_brownian_motion() {
        let paths = brownian_paths(64, 1.0 / 64.0, 4000, 9);
        let moments = increment_moments(&paths, 1.0 / 64.0, &dyadic_lags(), 2.0).unwrap();
        let t = tightness_exponent(&moments, 2.0).unwrap();
        assert!((t.fit.slope - 1.0).abs() < 0.03);
        assert_eq!(t.target, 1.5);
        assert!(!t.passes);
        assert!(tightness_exponent(&moments, 1.2).is_err());
    }

    #[test]
    fn narrow_grid_is_degenerate() {
        let paths = brownian_paths(8, 0.1, 50, 1);
        let moments = increment_moments(&paths, 0.1, &[1, 2, 4], 2.0).unwrap();
        assert!(matches!(estimate_hurst(&moments), Err(StatsError::DegenerateGrid(_))));
        assert!(increment_moments(&paths, 0.1, &[9], 2.0).is_err());
    }

    fn normals(count: usize, seed: u64) -> Vec<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn independence_self_tests() {
        let a = normals(4000, 1);
        let b = normals(4000, 2);
        let report = independence_test(&a, &b).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.interval.0 <= 0.0 && report.interval.1 >= 0.0);
        let report = independence_test(&a, &a).unwrap();
        assert!(!report.passed);
        assert!((report.correlation - 1.0).abs() < 1e-12);
        assert!(independence_test(&a[..10], &b[..10]).is_err());
    }

    #[test]
    fn dependence_without_correlation_is_caught() {
        // b = |a| − E|a| is uncorrelated with a but not independent of it
        let a = normals(4000, 3);
        let noise = normals(4000, 4);
        let b: Vec<f64> = a
            .iter()
            .zip(&noise)
            .map(|(x, e)| x.signum() * (x.abs() + 0.1 * e))
            .collect();
        let report = independence_test(&a, &b).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn normality_self_tests() {
        let report = normality_check(&normals(4000, 5)).unwrap();
        assert!(report.passed, "{report:?}");
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        let uniforms: Vec<f64> = (0..4000)
            .map(|_| (rng.random::<f64>() - 0.5) * 12f64.sqrt())
            .collect();
        let report = normality_check(&uniforms).unwrap();
        assert!(!report.passed);
        assert!(report.ks_distance > report.ks_threshold || !report.kurtosis.within(3.0));
        assert!(normality_check(&uniforms[..999]).is_err());
    }

    fn cell(n: u32, epsilon: f64, phi: &str, scale: f64, seed: u64) -> ResidualCell {
        ResidualCell {
            n,
            epsilon,
            phi_id: phi.into(),
            values: normals(2000, seed).iter().map(|v| v * scale).collect(),
        }
    }

    #[test]
    fn replacement_decay_trends() {
        let mut cells = Vec::new();
        for (k, n) in [16u32, 32, 64].into_iter().enumerate() {
            for eps in [0.2, 0.1] {
                let scale = eps / (n as f64).sqrt();
                cells.push(cell(n, eps, "one_site", scale, k as u64 * 10 + (eps * 10.0) as u64));
                cells.push(cell(n, eps, "constant", 0.0, 0));
            }
        }
        let report = replacement_decay(&cells).unwrap();
        assert!(report.passed, "{report:?}");
        for c in report.cells.iter().filter(|c| c.phi_id == "constant") {
            assert_eq!(c.second_moment.value, 0.0);
        }
        assert!(report.plateau_for("one_site").unwrap().monotone_in_epsilon);

        // growing in n fails
        let growing: Vec<ResidualCell> = [16u32, 32, 64]
            .into_iter()
            .flat_map(|n| {
                [0.2, 0.1].map(|eps| cell(n, eps, "bad", (n as f64).sqrt(), n as u64))
            })
            .collect();
        let report = replacement_decay(&growing).unwrap();
        assert!(!report.passed);
        assert!(report.decay_for("bad").all(|d| !d.monotone_in_n));
    }

    #[test]
    fn replacement_decay_needs_a_grid() {
        let cells = vec![cell(16, 0.2, "x", 1.0, 1), cell(32, 0.2, "x", 1.0, 2)];
        assert!(matches!(replacement_decay(&cells), Err(StatsError::DegenerateGrid(_))));
        assert!(matches!(replacement_decay(&[]), Err(StatsError::NoSamples)));
    }

    #[test]
    fn ssep_diffusivity_is_one() {
        let p = SimulationParams::new(
            16,
            0.5,
            0.02,
            ExchangeRate::ssep(),
            warmup_rates(2.0, 1.0).1,
        )
        .with_seed(31);
        let est = estimate_diffusivity(&p, 4000, 0.25, 0.02).unwrap();
        assert!((est.diffusivity - 1.0).abs() < 0.15, "{est:?}");
    }
}
