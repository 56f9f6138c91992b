//! Exact continuous-time simulation of the speed-`n²` lattice gas and the
//! speed-`n` walker that reads it.
//!
//! Both clocks are simulated by thinning against constant rate bounds:
//!
//! * exchanges are proposed at rate `L n² c_max` on a uniformly chosen bond
//!   and accepted with probability `c_x(η)/c_max`;
//! * walker jumps are proposed at rate `n Σ_z max r_z`, the jump size is
//!   picked proportionally to `max r_z` and accepted with probability
//!   `r_z(τ_x η)/max r_z`.
//!
//! The environment and the walker draw from separate random streams, so the
//! environment path does not depend on whether (or how) the walker moves.
//!
//! Between consecutive events every walker-dependent observable is constant,
//! so time integrals are accumulated exactly as `value × Δt`.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::Exp1;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{
    validate_rates, wrap, Configuration, ExchangeRate, LatticeError, LocalFunction, SiteWeights,
    ValidationReport, WalkRateSet,
};
use crate::mollifier;
use crate::numeric::{self, KahanSum};

/// Default cap on the expected number of proposals of one trajectory.
pub const DEFAULT_EVENT_BUDGET: f64 = 1e9;
/// Default torus factor: `L ≈ kappa · n · max(1, √T)`.
pub const DEFAULT_KAPPA: f64 = 16.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid rates: {0}")]
    InvalidRates(ValidationReport),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("expected {expected:.3e} proposals exceeds the event budget {budget:.3e}")]
    BudgetExceeded { expected: f64, budget: f64 },
    #[error("lattice: {0}")]
    Lattice(#[from] LatticeError),
    #[error("particle number changed from {before} to {after} at t = {time}")]
    ParticleLoss {
        before: usize,
        after: usize,
        time: f64,
    },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DynamicsError {
    DynamicsError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// A pair `(φ, ε)` whose time integrals `∫φ(ξ_s)ds` and `∫(ξ_s ⋆ φ_ε)(0)ds`
/// are tracked during the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualProbe {
    pub phi: LocalFunction,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationParams {
    /// Scaling parameter.
    pub n: u32,
    pub rho: f64,
    /// Macroscopic horizon `T`.
    pub horizon: f64,
    pub kappa: f64,
    /// Explicit torus size; overrides the `kappa` rule when set.
    pub lattice_size: Option<usize>,
    pub exchange: ExchangeRate,
    pub walk: WalkRateSet,
    pub seed: u64,
    pub sample_times: Vec<f64>,
    pub event_budget: f64,
    /// When false only the environment is simulated.
    pub simulate_walker: bool,
    /// Store the full configuration at every sample time.
    pub record_configs: bool,
    pub probes: Vec<ResidualProbe>,
}

impl SimulationParams {
    pub fn new(n: u32, rho: f64, horizon: f64, exchange: ExchangeRate, walk: WalkRateSet) -> Self {
        Self {
            n,
            rho,
            horizon,
            kappa: DEFAULT_KAPPA,
            lattice_size: None,
            exchange,
            walk,
            seed: 0,
            sample_times: vec![horizon],
            event_budget: DEFAULT_EVENT_BUDGET,
            simulate_walker: true,
            record_configs: false,
            probes: Vec::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sample_times(mut self, times: Vec<f64>) -> Self {
        self.sample_times = times;
        self
    }

    /// `k/steps · T` for `k = 0..=steps`.
    pub fn with_uniform_samples(mut self, steps: usize) -> Self {
        self.sample_times = (0..=steps)
            .map(|k| self.horizon * k as f64 / steps as f64)
            .collect();
        self
    }

    /// Smallest torus allowed by the rate supports: `2·diameter + 2`.
    pub fn minimum_lattice_size(&self) -> usize {
        let diameter = self
            .walk
            .diameter()
            .max(self.exchange.function.diameter() + 1);
        (2 * diameter + 2) as usize
    }

    /// `ceil(kappa · n · max(1, √T))` rounded up to even, unless overridden.
    pub fn lattice_size(&self) -> usize {
        if let Some(size) = self.lattice_size {
            return size;
        }
        let raw = (self.kappa * self.n as f64 * self.horizon.sqrt().max(1.0)).ceil() as usize;
        let even = raw + raw % 2;
        even.max(self.minimum_lattice_size())
    }

    pub fn exchange_proposal_rate(&self) -> f64 {
        let n = self.n as f64;
        self.lattice_size() as f64 * n * n * self.exchange.max_rate()
    }

    pub fn walker_proposal_rate(&self) -> f64 {
        if !self.simulate_walker {
            return 0.0;
        }
        let total: f64 = self.walk.entries.values().map(|f| f.max_value()).sum();
        self.n as f64 * total
    }

    /// Expected number of proposals over `[0, T]`.
    pub fn expected_proposals(&self) -> f64 {
        (self.exchange_proposal_rate() + self.walker_proposal_rate()) * self.horizon
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let report = validate_rates(&self.exchange, &self.walk);
        if !report.passed() {
            return Err(DynamicsError::InvalidRates(report));
        }
        if self.n == 0 {
            return Err(invalid("n", "must be a positive integer"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho", format!("{} is outside [0, 1]", self.rho)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", "must be positive and finite"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid("kappa", "must be positive and finite"));
        }
        let size = self.lattice_size();
        if size < self.minimum_lattice_size() {
            return Err(invalid(
                "lattice_size",
                format!(
                    "{size} is below the minimum {} for these rate supports",
                    self.minimum_lattice_size()
                ),
            ));
        }
        let mut previous = f64::NEG_INFINITY;
        for &t in &self.sample_times {
            if !(0.0..=self.horizon).contains(&t) {
                return Err(invalid("sample_times", format!("{t} is outside [0, T]")));
            }
            if t < previous {
                return Err(invalid("sample_times", "must be sorted"));
            }
            previous = t;
        }
        for probe in &self.probes {
            if !(probe.epsilon > 0.0 && probe.epsilon < 1.0) {
                return Err(invalid("probes", format!("epsilon {} not in (0, 1)", probe.epsilon)));
            }
            let window = mollifier::site_weights(probe.epsilon, self.n);
            if window.is_empty() {
                return Err(invalid("probes", "mollifier window holds no site"));
            }
            if window.len() + 1 >= size {
                return Err(invalid(
                    "probes",
                    format!("mollifier window of {} sites is wider than the torus", window.len()),
                ));
            }
        }
        let expected = self.expected_proposals();
        if !(expected <= self.event_budget) {
            return Err(DynamicsError::BudgetExceeded {
                expected,
                budget: self.event_budget,
            });
        }
        Ok(())
    }
}

/// Cumulative time integrals at a sample time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Integrals {
    /// `∫ r_z(ξ_s) ds`, one per jump size in ascending order.
    pub rates: Vec<f64>,
    /// `∫ ω(ξ_s) ds`, `ω = Σ z r_z`.
    pub drift: f64,
    /// `∫ Σ z² r_z(ξ_s) ds`.
    pub quadratic: f64,
    /// `∫ φ_k(ξ_s) ds` per probe.
    pub probe_local: Vec<f64>,
    /// `∫ (ξ_s ⋆ φ_ε)(0) ds` per probe.
    pub probe_smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    /// Walker position (unwrapped).
    pub position: i64,
    /// Accepted jumps per jump size, ascending order of jump size.
    pub counts: Vec<u64>,
    pub integrals: Integrals,
    pub config: Option<Configuration>,
}

impl Sample {
    /// `ξ = τ_{x} η`, the environment seen from the walker.
    pub fn environment(&self) -> Option<Configuration> {
        self.config.as_ref().map(|c| c.rotate(self.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerEvent {
    pub time: f64,
    pub jump: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Telemetry {
    pub exchange_proposals: u64,
    pub exchange_accepted: u64,
    pub walker_proposals: u64,
    pub walker_accepted: u64,
}

impl Telemetry {
    pub fn exchange_acceptance(&self) -> f64 {
        self.exchange_accepted as f64 / self.exchange_proposals.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: u32,
    pub rho: f64,
    pub horizon: f64,
    pub lattice_size: usize,
    pub seed: u64,
    /// Jump sizes in the order used by `counts` and `Integrals::rates`.
    pub jumps: Vec<i64>,
    pub probes: Vec<ResidualProbe>,
    pub walker_events: Vec<WalkerEvent>,
    pub samples: Vec<Sample>,
    pub telemetry: Telemetry,
}

impl Trajectory {
    /// Walker position at time `t`, from the event list.
    pub fn position_at(&self, t: f64) -> i64 {
        self.walker_events
            .iter()
            .take_while(|e| e.time <= t)
            .map(|e| e.jump)
            .sum()
    }
}

/// `ξ_s(x) = η_s(x + x_s)` at sample `index`; `None` if the sample index is
/// out of range or configurations were not recorded.
pub fn environment_view(traj: &Trajectory, index: usize, x: i64) -> Option<bool> {
    let sample = traj.samples.get(index)?;
    let config = sample.config.as_ref()?;
    Some(config.at(x + sample.position))
}

/// Values that are piecewise constant between events, with their integrals.
struct Tracker {
    rates: Vec<LocalFunction>,
    jump_sizes: Vec<f64>,
    probe_phi: Vec<LocalFunction>,
    probe_windows: Vec<SiteWeights>,
    rho: f64,
    rate_values: Vec<f64>,
    drift_value: f64,
    quadratic_value: f64,
    phi_values: Vec<f64>,
    window_values: Vec<f64>,
    rate_int: Vec<KahanSum>,
    drift_int: KahanSum,
    quadratic_int: KahanSum,
    phi_int: Vec<KahanSum>,
    window_int: Vec<KahanSum>,
    last_time: f64,
}

impl Tracker {
    fn new(params: &SimulationParams) -> Self {
        let rates: Vec<LocalFunction> = params.walk.entries.values().cloned().collect();
        let jump_sizes: Vec<f64> = params.walk.jumps().map(|z| z as f64).collect();
        let probe_phi: Vec<LocalFunction> = params.probes.iter().map(|p| p.phi.clone()).collect();
        let probe_windows: Vec<SiteWeights> = params
            .probes
            .iter()
            .map(|p| mollifier::site_weights(p.epsilon, params.n))
            .collect();
        let k = rates.len();
        let m = probe_phi.len();
        Self {
            rates,
            jump_sizes,
            probe_phi,
            probe_windows,
            rho: params.rho,
            rate_values: vec![0.0; k],
            drift_value: 0.0,
            quadratic_value: 0.0,
            phi_values: vec![0.0; m],
            window_values: vec![0.0; m],
            rate_int: vec![KahanSum::new(); k],
            drift_int: KahanSum::new(),
            quadratic_int: KahanSum::new(),
            phi_int: vec![KahanSum::new(); m],
            window_int: vec![KahanSum::new(); m],
            last_time: 0.0,
        }
    }

    /// Offsets (relative to the walker) that any tracked value reads.
    fn window_offsets(&self) -> Vec<i64> {
        let mut offsets: Vec<i64> = self
            .rates
            .iter()
            .chain(&self.probe_phi)
            .flat_map(|f| f.support().iter().copied())
            .collect();
        for w in &self.probe_windows {
            offsets.extend(w.offsets());
        }
        offsets
    }

    fn refresh(&mut self, config: &Configuration, position: i64) {
        self.drift_value = 0.0;
        self.quadratic_value = 0.0;
        for (k, f) in self.rates.iter().enumerate() {
            let r = f.evaluate(config, position);
            self.rate_values[k] = r;
            let z = self.jump_sizes[k];
            self.drift_value += z * r;
            self.quadratic_value += z * z * r;
        }
        for (k, f) in self.probe_phi.iter().enumerate() {
            self.phi_values[k] = f.evaluate(config, position);
        }
        for (k, w) in self.probe_windows.iter().enumerate() {
            self.window_values[k] = w.centered_sum(config, position, self.rho);
        }
    }

    fn advance(&mut self, t: f64) {
        let dt = t - self.last_time;
        if dt > 0.0 {
            for (acc, v) in self.rate_int.iter_mut().zip(&self.rate_values) {
                acc.add(v * dt);
            }
            self.drift_int.add(self.drift_value * dt);
            self.quadratic_int.add(self.quadratic_value * dt);
            for (acc, v) in self.phi_int.iter_mut().zip(&self.phi_values) {
                acc.add(v * dt);
            }
            for (acc, v) in self.window_int.iter_mut().zip(&self.window_values) {
                acc.add(v * dt);
            }
            self.last_time = t;
        }
    }

    fn snapshot(&self) -> Integrals {
        Integrals {
            rates: self.rate_int.iter().map(KahanSum::value).collect(),
            drift: self.drift_int.value(),
            quadratic: self.quadratic_int.value(),
            probe_local: self.phi_int.iter().map(KahanSum::value).collect(),
            probe_smoothed: self.window_int.iter().map(KahanSum::value).collect(),
        }
    }
}

/// Sample one trajectory on `[0, T]` started from product Bernoulli(ρ).
pub fn simulate(params: &SimulationParams) -> Result<Trajectory, DynamicsError> {
    params.validate()?;
    let size = params.lattice_size();
    let mut env_rng = Xoshiro256PlusPlus::seed_from_u64(numeric::stream_seed(params.seed, 0));
    let mut walk_rng = Xoshiro256PlusPlus::seed_from_u64(numeric::stream_seed(params.seed, 1));

    let mut config = Configuration::bernoulli_with(size, params.rho, &mut env_rng)?;
    let particles = config.particle_count();

    let c_max = params.exchange.max_rate();
    let exchange_is_constant = params.exchange.function.is_constant();
    let exchange_rate = params.exchange_proposal_rate();
    let inv_exchange_rate = 1.0 / exchange_rate;

    let jumps: Vec<i64> = params.walk.jumps().collect();
    let jump_max: Vec<f64> = params.walk.entries.values().map(|f| f.max_value()).collect();
    let jump_total: f64 = jump_max.iter().sum();
    let walker_rate = params.walker_proposal_rate();
    let walker_active = params.simulate_walker && walker_rate > 0.0;

    let mut tracker = Tracker::new(params);
    let mut in_window = vec![false; size];
    for o in tracker.window_offsets() {
        in_window[wrap(o, size)] = true;
    }
    // bond (r, r+1) relative to the walker touches a tracked site
    let relative_bonds: Vec<bool> = (0..size)
        .map(|r| in_window[r] | in_window[(r + 1) % size])
        .collect();
    let mut touching_bonds = relative_bonds.clone();

    let mut position: i64 = 0;
    let mut counts = vec![0u64; jumps.len()];
    let mut walker_events = Vec::new();
    let mut samples = Vec::with_capacity(params.sample_times.len());
    let mut telemetry = Telemetry::default();
    tracker.refresh(&config, position);

    let horizon = params.horizon;
    let draw_exp = |rng: &mut Xoshiro256PlusPlus| -> f64 { rng.sample::<f64, _>(Exp1) };
    let mut next_exchange = draw_exp(&mut env_rng) * inv_exchange_rate;
    let mut next_walker = if walker_active {
        draw_exp(&mut walk_rng) / walker_rate
    } else {
        f64::INFINITY
    };
    let mut sample_index = 0;
    let mut next_sample = params.sample_times.first().copied().unwrap_or(f64::INFINITY);

    loop {
        let next_event = next_exchange.min(next_walker);
        while next_sample <= next_event.min(horizon) {
            tracker.advance(next_sample);
            let recount = config.recount();
            if recount != particles {
                return Err(DynamicsError::ParticleLoss {
                    before: particles,
                    after: recount,
                    time: next_sample,
                });
            }
            samples.push(Sample {
                time: next_sample,
                position,
                counts: counts.clone(),
                integrals: tracker.snapshot(),
                config: params.record_configs.then(|| config.clone()),
            });
            sample_index += 1;
            next_sample = params
                .sample_times
                .get(sample_index)
                .copied()
                .unwrap_or(f64::INFINITY);
        }
        if next_event > horizon {
            break;
        }
        if next_exchange <= next_walker {
            let t = next_exchange;
            telemetry.exchange_proposals += 1;
            let bond = bounded(env_rng.next_u64(), size);
            let accept = exchange_is_constant || {
                let u: f64 = env_rng.random();
                u * c_max < params.exchange.function.evaluate(&config, bond as i64)
            };
            if accept {
                telemetry.exchange_accepted += 1;
                if touching_bonds[bond] {
                    if config.swap_in_place(bond) {
                        tracker.advance(t);
                        tracker.refresh(&config, position);
                    }
                } else {
                    config.swap_in_place(bond);
                }
            }
            next_exchange = t + draw_exp(&mut env_rng) * inv_exchange_rate;
        } else {
            let t = next_walker;
            telemetry.walker_proposals += 1;
            let pick = walk_rng.random::<f64>() * jump_total;
            let mut k = 0;
            let mut acc = jump_max[0];
            while pick >= acc && k + 1 < jump_max.len() {
                k += 1;
                acc += jump_max[k];
            }
            let u: f64 = walk_rng.random();
            if u * jump_max[k] < tracker.rate_values[k] {
                telemetry.walker_accepted += 1;
                tracker.advance(t);
                let z = jumps[k];
                position += z;
                let position_mod = wrap(position, size);
                touching_bonds[position_mod..].copy_from_slice(&relative_bonds[..size - position_mod]);
                touching_bonds[..position_mod].copy_from_slice(&relative_bonds[size - position_mod..]);
                counts[k] += 1;
                walker_events.push(WalkerEvent { time: t, jump: z });
                tracker.refresh(&config, position);
            }
            next_walker = t + draw_exp(&mut walk_rng) / walker_rate;
        }
    }

    Ok(Trajectory {
        n: params.n,
        rho: params.rho,
        horizon,
        lattice_size: size,
        seed: params.seed,
        jumps,
        probes: params.probes.clone(),
        walker_events,
        samples,
        telemetry,
    })
}

#[inline]
fn bounded(u: u64, size: usize) -> usize {
    ((u as u128 * size as u128) >> 64) as usize
}

/// Result of comparing `Var(x_T − v n T)/n` on two torus sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusReport {
    pub kappa: f64,
    pub lattice_size: usize,
    pub variance: f64,
    pub variance_se: f64,
    pub doubled_lattice_size: usize,
    pub doubled_variance: f64,
    pub doubled_variance_se: f64,
    pub shift: f64,
    pub pooled_se: f64,
    /// `|shift| > 2 · pooled_se`.
    pub significant: bool,
}

fn scaled_displacements(
    params: &SimulationParams,
    runs: usize,
    speed: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let mut base = params.clone();
    base.sample_times = vec![params.horizon];
    base.record_configs = false;
    base.probes.clear();
    let n = params.n as f64;
    (0..runs as u64)
        .into_par_iter()
        .map(|i| {
            let mut p = base.clone();
            p.seed = numeric::run_seed(params.seed, i);
            let traj = simulate(&p)?;
            let x = traj.samples.last().map_or(0, |s| s.position) as f64;
            Ok((x - speed * n * params.horizon) / n.sqrt())
        })
        .collect()
}

/// Rerun `runs` trajectories with `kappa` and `2·kappa` and report the shift
/// in `Var(x_T − v n T)/n`. `speed` is the asymptotic speed `v(ρ)`.
pub fn torus_sensitivity(
    params: &SimulationParams,
    runs: usize,
    speed: f64,
) -> Result<TorusReport, DynamicsError> {
    let mut small = params.clone();
    small.lattice_size = None;
    let mut large = small.clone();
    large.kappa = 2.0 * small.kappa;
    let a = scaled_displacements(&small, runs, speed)?;
    let b = scaled_displacements(&large, runs, speed)?;
    let (va, vb) = (numeric::variance(&a), numeric::variance(&b));
    let (sa, sb) = (
        numeric::variance_standard_error(&a),
        numeric::variance_standard_error(&b),
    );
    let pooled = (sa * sa + sb * sb).sqrt();
    let shift = vb - va;
    Ok(TorusReport {
        kappa: small.kappa,
        lattice_size: small.lattice_size(),
        variance: va,
        variance_se: sa,
        doubled_lattice_size: large.lattice_size(),
        doubled_variance: vb,
        doubled_variance_se: sb,
        shift,
        pooled_se: pooled,
        significant: shift.abs() > 2.0 * pooled,
    })
}
