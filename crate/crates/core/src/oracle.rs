//! Exact master-equation computations for the environment seen from the
//! walker on tiny tori.
//!
//! States are configurations of `L ≤ 14` sites indexed by their bit pattern
//! (bit `x` is the occupation of site `x`). The generator is kept in a
//! fixed-width sparse layout: every row lists one entry per bond, in bond
//! order, followed by one entry per walker jump. Entries whose target equals
//! the source are kept; they cancel against the diagonal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, SimulationParams};
use crate::lattice::Configuration;

/// Largest torus handled by the oracle.
pub const MAX_ORACLE_SIZE: usize = 14;
/// Largest torus accepted by [`entropy_curve`].
pub const MAX_ENTROPY_SIZE: usize = 12;
/// Total-variation budget for the truncated uniformization series.
pub const TRUNCATION_TOLERANCE: f64 = 1e-12;
/// Largest Poisson mean handled in a single uniformization step.
const MAX_STEP_MEAN: f64 = 20.0;
/// Series cap per step.
const MAX_SERIES_TERMS: usize = 10_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("torus of {size} sites exceeds the oracle limit of {limit}")]
    StateSpaceOverflow { size: usize, limit: usize },
    #[error(transparent)]
    Params(#[from] DynamicsError),
    #[error("uniformization series did not converge within {terms} terms")]
    SeriesCapExceeded { terms: usize },
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("distribution over {found} sites does not match a generator over {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Sparse rate matrix over `2^L` configurations.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    size: usize,
    jumps: Vec<i64>,
    row_len: usize,
    targets: Vec<u32>,
    rates: Vec<f64>,
    exit: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn states(&self) -> usize {
        1 << self.size
    }

    /// Number of stored off-diagonal entries, self-loops included.
    pub fn entry_count(&self) -> usize {
        self.rates.len()
    }

    pub fn jumps(&self) -> &[i64] {
        &self.jumps
    }

    /// Total rate of leaving `state`, self-loops included.
    pub fn exit_rate(&self, state: usize) -> f64 {
        self.exit[state]
    }

    /// `(target, rate)` pairs of one row.
    pub fn row(&self, state: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = state * self.row_len;
        (start..start + self.row_len).map(|k| (self.targets[k] as usize, self.rates[k]))
    }

    /// Rate of swapping the bond `(bond, bond+1)` from `state`.
    pub fn exchange_rate(&self, state: usize, bond: usize) -> f64 {
        self.rates[state * self.row_len + bond]
    }

    /// Largest row sum of `|G|` off the diagonal after cancelling self-loops.
    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().copied().fold(0.0, f64::max)
    }

    /// Largest `|Σ_j G(i, j)|` over rows.
    pub fn max_row_sum(&self) -> f64 {
        (0..self.states())
            .map(|s| {
                let off: f64 = self.row(s).map(|(_, r)| r).sum();
                (off - self.exit[s]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `p·G`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = p.iter().zip(&self.exit).map(|(x, e)| -x * e).collect();
        for (s, &mass) in p.iter().enumerate() {
            if mass != 0.0 {
                for (target, rate) in self.row(s) {
                    out[target] += mass * rate;
                }
            }
        }
        out
    }

    /// `p·(I + G/q)`; nonnegative whenever `q` dominates every exit rate.
    fn apply_uniformized(&self, p: &[f64], q: f64, out: &mut [f64]) {
        for ((o, &x), &e) in out.iter_mut().zip(p).zip(&self.exit) {
            *o = x * (1.0 - e / q);
        }
        for (s, &mass) in p.iter().enumerate() {
            if mass != 0.0 {
                let scaled = mass / q;
                for (target, rate) in self.row(s) {
                    out[target] += scaled * rate;
                }
            }
        }
    }
}

/// Build `n² L_b + n L^{rw}` on the environment seen from the walker. Walker
/// transitions are omitted when `params.simulate_walker` is false.
pub fn build_generator(params: &SimulationParams) -> Result<GeneratorMatrix, OracleError> {
    let size = params.lattice_size();
    if size > MAX_ORACLE_SIZE {
        return Err(OracleError::StateSpaceOverflow {
            size,
            limit: MAX_ORACLE_SIZE,
        });
    }
    let mut check = params.clone();
    check.event_budget = f64::INFINITY;
    check.validate()?;

    let n = params.n as f64;
    let jumps: Vec<i64> = if params.simulate_walker {
        params.walk.jumps().collect()
    } else {
        Vec::new()
    };
    let row_len = size + jumps.len();
    let states = 1usize << size;
    let mut targets = Vec::with_capacity(states * row_len);
    let mut rates = Vec::with_capacity(states * row_len);
    let mut exit = Vec::with_capacity(states);

    for state in 0..states {
        let config = Configuration::from_index(size, state as u64).expect("size checked");
        let mut total = 0.0;
        for bond in 0..size {
            let next = (bond + 1) % size;
            let bit_a = (state >> bond) & 1;
            let bit_b = (state >> next) & 1;
            let swapped = state ^ ((bit_a ^ bit_b) << bond) ^ ((bit_a ^ bit_b) << next);
            let rate = n * n * params.exchange.function.evaluate(&config, bond as i64);
            targets.push(swapped as u32);
            rates.push(rate);
            total += rate;
        }
        for &z in &jumps {
            let rate = n * params.walk.entries[&z].evaluate(&config, 0);
            targets.push(config.rotate(z).to_index() as u32);
            rates.push(rate);
            total += rate;
        }
        exit.push(total);
    }
    Ok(GeneratorMatrix {
        size,
        jumps,
        row_len,
        targets,
        rates,
        exit,
    })
}

/// `ν_ρ(state)` for a torus of `size` sites.
pub fn product_weight(state: usize, size: usize, rho: f64) -> f64 {
    let ones = state.count_ones() as i32;
    rho.powi(ones) * (1.0 - rho).powi(size as i32 - ones)
}

/// A probability vector over all configurations of a tiny torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionVector {
    size: usize,
    probs: Vec<f64>,
}

impl DistributionVector {
    fn check_size(size: usize) -> Result<(), OracleError> {
        if size > MAX_ORACLE_SIZE {
            return Err(OracleError::StateSpaceOverflow {
                size,
                limit: MAX_ORACLE_SIZE,
            });
        }
        Ok(())
    }

    /// Validates length, clips entries in `[-1e-12, 0)` to zero and checks the
    /// total mass.
    pub fn new(size: usize, mut probs: Vec<f64>) -> Result<Self, OracleError> {
        Self::check_size(size)?;
        if probs.len() != 1 << size {
            return Err(OracleError::InvalidDistribution(format!(
                "expected {} entries, found {}",
                1usize << size,
                probs.len()
            )));
        }
        for p in probs.iter_mut() {
            if !p.is_finite() || *p < -1e-12 {
                return Err(OracleError::InvalidDistribution(format!("entry {p}")));
            }
            *p = p.max(0.0);
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(OracleError::InvalidDistribution(format!("total mass {total}")));
        }
        Ok(Self { size, probs })
    }

    /// `ν_ρ`.
    pub fn product(size: usize, rho: f64) -> Result<Self, OracleError> {
        Self::check_size(size)?;
        let probs = (0..1usize << size)
            .map(|s| product_weight(s, size, rho))
            .collect();
        Self::new(size, probs)
    }

    pub fn point_mass(size: usize, state: usize) -> Result<Self, OracleError> {
        Self::check_size(size)?;
        let mut probs = vec![0.0; 1usize << size];
        if state >= probs.len() {
            return Err(OracleError::InvalidDistribution(format!("state {state} out of range")));
        }
        probs[state] = 1.0;
        Self::new(size, probs)
    }

    /// Empirical law of observed state indices.
    pub fn empirical<I: IntoIterator<Item = usize>>(size: usize, states: I) -> Result<Self, OracleError> {
        Self::check_size(size)?;
        let mut counts = vec![0u64; 1usize << size];
        let mut total = 0u64;
        for s in states {
            if s >= counts.len() {
                return Err(OracleError::InvalidDistribution(format!("state {s} out of range")));
            }
            counts[s] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(OracleError::InvalidDistribution("no observations".into()));
        }
        Self::new(size, counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// `dist · exp(tG)` by uniformization at rate `max exit rate`, split into
/// steps with Poisson mean at most 20.
pub fn evolve(
    dist: &DistributionVector,
    generator: &GeneratorMatrix,
    t: f64,
) -> Result<DistributionVector, OracleError> {
    if !(t >= 0.0) {
        return Err(OracleError::NegativeTime(t));
    }
    if dist.size != generator.size {
        return Err(OracleError::SizeMismatch {
            expected: generator.size,
            found: dist.size,
        });
    }
    let q = generator.max_exit_rate();
    if t == 0.0 || q == 0.0 {
        return Ok(dist.clone());
    }
    let steps = (q * t / MAX_STEP_MEAN).ceil().max(1.0) as usize;
    let mean = q * t / steps as f64;
    let step_tolerance = TRUNCATION_TOLERANCE / steps as f64;

    let mut current = dist.probs.clone();
    let mut power = vec![0.0; current.len()];
    let mut next = vec![0.0; current.len()];
    let mut result = vec![0.0; current.len()];
    for _ in 0..steps {
        power.copy_from_slice(&current);
        let mut weight = (-mean).exp();
        let mut accumulated = weight;
        for (r, p) in result.iter_mut().zip(&power) {
            *r = weight * p;
        }
        let mut k = 0;
        while 1.0 - accumulated > step_tolerance {
            k += 1;
            if k > MAX_SERIES_TERMS {
                return Err(OracleError::SeriesCapExceeded {
                    terms: MAX_SERIES_TERMS,
                });
            }
            generator.apply_uniformized(&power, q, &mut next);
            std::mem::swap(&mut power, &mut next);
            weight *= mean / k as f64;
            accumulated += weight;
            for (r, p) in result.iter_mut().zip(&power) {
                *r += weight * p;
            }
        }
        std::mem::swap(&mut current, &mut result);
    }
    Ok(DistributionVector {
        size: dist.size,
        probs: current,
    })
}

/// `H(μ | ν_ρ) = Σ μ log(μ/ν_ρ)` with `0 log 0 = 0`; infinite when `μ`
/// charges a state that `ν_ρ` does not.
pub fn relative_entropy(dist: &DistributionVector, rho: f64) -> f64 {
    dist.probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| {
            let reference = product_weight(s, dist.size, rho);
            if reference == 0.0 {
                f64::INFINITY
            } else {
                p * (p / reference).ln()
            }
        })
        .sum()
}

/// `max_s |(μG)(s)|`.
pub fn stationarity_residual(dist: &DistributionVector, generator: &GeneratorMatrix) -> f64 {
    generator
        .apply(&dist.probs)
        .iter()
        .fold(0.0, |m, x| m.max(x.abs()))
}

/// `max |ν_ρ(ξ) q(ξ, ξ^b) − ν_ρ(ξ^b) q(ξ^b, ξ)|` over states and bonds.
pub fn detailed_balance_defect(generator: &GeneratorMatrix, rho: f64) -> f64 {
    let size = generator.size;
    let mut worst: f64 = 0.0;
    for state in 0..generator.states() {
        for bond in 0..size {
            let next = (bond + 1) % size;
            let diff = ((state >> bond) ^ (state >> next)) & 1;
            let swapped = state ^ (diff << bond) ^ (diff << next);
            let forward = product_weight(state, size, rho) * generator.exchange_rate(state, bond);
            let backward = product_weight(swapped, size, rho) * generator.exchange_rate(swapped, bond);
            worst = worst.max((forward - backward).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub n: u32,
    pub t: f64,
    pub entropy: f64,
    /// `H/t`, NaN at `t = 0`.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCurve {
    pub rows: Vec<EntropyRow>,
    /// `sup_{t>0} H_n(t)/t` over the grid, per `n`.
    pub sup_rate: BTreeMap<u32, f64>,
    /// Grid points where `H` decreased, per `n`. Reported, not an error.
    pub decreases: Vec<(u32, f64)>,
}

/// Evolve `ν_ρ` under the full generator for each `n` and tabulate the
/// relative entropy on a sorted time grid.
pub fn entropy_curve(
    params: &SimulationParams,
    times: &[f64],
    ns: &[u32],
) -> Result<EntropyCurve, OracleError> {
    let size = params.lattice_size();
    if size > MAX_ENTROPY_SIZE {
        return Err(OracleError::StateSpaceOverflow {
            size,
            limit: MAX_ENTROPY_SIZE,
        });
    }
    let mut grid: Vec<f64> = times.to_vec();
    if grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(OracleError::NegativeTime(
            grid.iter().copied().find(|t| !(*t >= 0.0)).unwrap_or(f64::NAN),
        ));
    }
    grid.sort_by(f64::total_cmp);

    let mut rows = Vec::new();
    let mut sup_rate = BTreeMap::new();
    let mut decreases = Vec::new();
    for &n in ns {
        let mut p = params.clone();
        p.n = n;
        p.lattice_size = Some(size);
        let generator = build_generator(&p)?;
        let mut dist = DistributionVector::product(size, params.rho)?;
        let mut clock = 0.0;
        let mut previous = f64::NEG_INFINITY;
        let mut sup: f64 = 0.0;
        for &t in &grid {
            dist = evolve(&dist, &generator, t - clock)?;
            clock = t;
            let entropy = relative_entropy(&dist, params.rho);
            let rate = if t > 0.0 { entropy / t } else { f64::NAN };
            if t > 0.0 {
                sup = sup.max(rate);
            }
            if entropy < previous {
                decreases.push((n, t));
            }
            previous = entropy;
            rows.push(EntropyRow { n, t, entropy, rate });
        }
        sup_rate.insert(n, sup);
    }
    Ok(EntropyCurve {
        rows,
        sup_rate,
        decreases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{warmup_rates, ExchangeRate, LocalFunction, WalkRateSet};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn params(size: usize, n: u32, rho: f64) -> SimulationParams {
        let (c, r) = warmup_rates(2.0, 1.0);
        let mut p = SimulationParams::new(n, rho, 1.0, c, r);
        p.lattice_size = Some(size);
        p
    }

    fn exchange_only(size: usize, n: u32, rho: f64, c: ExchangeRate) -> SimulationParams {
        let mut p = params(size, n, rho);
        p.exchange = c;
        p.simulate_walker = false;
        p
    }

    fn speed_change() -> ExchangeRate {
        ExchangeRate::new(
            LocalFunction::tabulate(vec![-1], |b| 1.0 + 0.5 * b[0] as u8 as f64).unwrap(),
            1.0,
        )
    }

    #[test]
    fn ssep_generator_by_hand() {
        let g = build_generator(&exchange_only(4, 1, 0.5, ExchangeRate::ssep())).unwrap();
        assert_eq!(g.entry_count(), 4 * 16);
        // 0b0001: bonds (0,1) and (3,0) move the particle, the others are no-ops
        let row: Vec<(usize, f64)> = g.row(0b0001).collect();
        assert_eq!(row, vec![(0b0010, 1.0), (0b0001, 1.0), (0b0001, 1.0), (0b1000, 1.0)]);
        // 0b0101: every bond moves a particle
        let row: Vec<usize> = g.row(0b0101).map(|(s, _)| s).collect();
        assert_eq!(row, vec![0b0110, 0b0011, 0b1001, 0b1100]);
        assert_eq!(g.max_row_sum(), 0.0);
    }

    #[test]
    fn shift_entries_rotate() {
        let g = build_generator(&params(4, 3, 0.5)).unwrap();
        assert_eq!(g.entry_count(), (4 + 2) * 16);
        // jumps are ordered -1, +1; τ_{-1} moves site 1 to site 2, τ_{+1} to site 0
        let row: Vec<(usize, f64)> = g.row(0b0010).collect();
        assert_eq!(g.jumps(), &[-1, 1]);
        assert_eq!(row[4].0, 0b0100);
        assert_eq!(row[5].0, 0b0001);
        let (_, r) = warmup_rates(2.0, 1.0);
        let empty = Configuration::empty(4).unwrap();
        assert!((row[4].1 - 3.0 * r.entries[&-1].evaluate(&empty, 0)).abs() < 1e-15);
        assert!((row[5].1 - 3.0 * r.entries[&1].evaluate(&empty, 0)).abs() < 1e-15);
    }

    #[test]
    fn row_sums_vanish() {
        for n in [1, 3] {
            let mut p = params(6, n, 0.3);
            p.exchange = speed_change();
            let g = build_generator(&p).unwrap();
            assert!(g.max_row_sum() < 1e-10);
            assert!(g.entry_count() <= (6 + 2) * 64);
        }
    }

    #[test]
    fn torus_below_support_minimum_is_rejected() {
        let p = exchange_only(2, 1, 0.5, ExchangeRate::ssep());
        assert!(matches!(build_generator(&p), Err(OracleError::Params(_))));
    }

    #[test]
    fn oversized_torus_is_rejected() {
        let p = params(16, 1, 0.5);
        assert!(matches!(
            build_generator(&p),
            Err(OracleError::StateSpaceOverflow { size: 16, .. })
        ));
    }

    #[test]
    fn exchange_detailed_balance() {
        for size in 4..=8 {
            for rho in [0.2, 0.5, 0.9] {
                let g = build_generator(&exchange_only(size, 2, rho, speed_change())).unwrap();
                assert!(detailed_balance_defect(&g, rho) < 1e-13);
            }
        }
    }

    #[test]
    fn product_measure_is_stationary_for_exchange() {
        for c in [ExchangeRate::ssep(), speed_change()] {
            let g = build_generator(&exchange_only(8, 4, 0.7, c)).unwrap();
            let nu = DistributionVector::product(8, 0.7).unwrap();
            assert!(stationarity_residual(&nu, &g) <= 1e-12);
            let later = evolve(&nu, &g, 0.8).unwrap();
            assert!(later.total_variation(&nu) < 1e-12);
        }
    }

    #[test]
    fn evolve_at_zero_is_identity() {
        let g = build_generator(&params(5, 2, 0.5)).unwrap();
        let p = DistributionVector::point_mass(5, 3).unwrap();
        assert_eq!(evolve(&p, &g, 0.0).unwrap(), p);
        assert!(matches!(evolve(&p, &g, -1.0), Err(OracleError::NegativeTime(_))));
    }

    #[test]
    fn evolve_preserves_probability() {
        let mut p = params(6, 4, 0.4);
        p.exchange = speed_change();
        let g = build_generator(&p).unwrap();
        let mut dist = DistributionVector::point_mass(6, 0b000111).unwrap();
        for _ in 0..5 {
            dist = evolve(&dist, &g, 0.37).unwrap();
            assert!((dist.total() - 1.0).abs() < 1e-10);
            assert!(dist.probs().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn evolve_matches_single_particle_walk() {
        let g = build_generator(&exchange_only(4, 1, 0.5, ExchangeRate::ssep())).unwrap();
        let start = DistributionVector::point_mass(4, 0b0001).unwrap();
        let once = evolve(&start, &g, 1.0).unwrap();
        let twice = evolve(&evolve(&start, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        assert!(once.total_variation(&twice) < 1e-12);
        // single particle random walk on a 4-cycle: P(at 0, t) = (1 + 2e^{-2t} + e^{-4t})/4
        let exact = (1.0 + 2.0 * (-2.0f64).exp() + (-4.0f64).exp()) / 4.0;
        assert!((once.probs()[0b0001] - exact).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_reference_is_zero() {
        let nu = DistributionVector::product(6, 0.3).unwrap();
        assert_eq!(relative_entropy(&nu, 0.3), 0.0);
    }

    #[test]
    fn entropy_of_point_mass() {
        let p = DistributionVector::point_mass(6, 0).unwrap();
        assert!((relative_entropy(&p, 0.5) - 6.0 * 2f64.ln()).abs() < 1e-14);
        assert_eq!(relative_entropy(&p, 1.0), f64::INFINITY);
    }

    #[test]
    fn entropy_is_nonnegative() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..16).map(|_| rng.random::<f64>().powi(3)).collect();
            let total: f64 = raw.iter().sum();
            let dist = DistributionVector::new(4, raw.iter().map(|x| x / total).collect()).unwrap();
            let rho = rng.random_range(0.05..0.95);
            assert!(relative_entropy(&dist, rho) >= -1e-15);
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(DistributionVector::new(2, vec![0.5, 0.5, 0.0]).is_err());
        assert!(DistributionVector::new(1, vec![0.7, 0.7]).is_err());
        let clipped = DistributionVector::new(1, vec![1.0, -1e-13]).unwrap();
        assert_eq!(clipped.probs()[1], 0.0);
        assert!(DistributionVector::new(1, vec![1.1, -0.1]).is_err());
    }

    #[test]
    fn constant_walker_rates_keep_entropy_zero() {
        let mut p = params(6, 1, 0.6);
        p.walk = WalkRateSet::new(
            [(1, LocalFunction::constant(0.7)), (-1, LocalFunction::constant(0.3))]
                .into_iter()
                .collect(),
        );
        let curve = entropy_curve(&p, &[0.0, 0.5, 1.0], &[1, 2]).unwrap();
        for row in &curve.rows {
            assert!(row.entropy.abs() < 1e-10, "{row:?}");
        }
    }

    #[test]
    fn entropy_curve_starts_at_zero() {
        let curve = entropy_curve(&params(6, 1, 0.7), &[0.0, 0.25, 0.5], &[1, 2, 4]).unwrap();
        for row in curve.rows.iter().filter(|r| r.t == 0.0) {
            assert_eq!(row.entropy, 0.0);
            assert!(row.rate.is_nan());
        }
        assert_eq!(curve.sup_rate.len(), 3);
        assert!(curve.rows.iter().filter(|r| r.t > 0.0).all(|r| r.entropy > 0.0));
    }
}
