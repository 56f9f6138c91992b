//! Shared fixtures for the benchmarks.

use rwdre::{warmup_rates, LocalFunction, ResidualProbe, SimulationParams};

/// Warm-up model (`α = 2`, `β = 1`) at density `rho`, sampled on 64 steps.
pub fn warmup_params(n: u32, rho: f64) -> SimulationParams {
    let (c, r) = warmup_rates(2.0, 1.0);
    SimulationParams::new(n, rho, 1.0, c, r).with_uniform_samples(64)
}

/// Same model with one centered one-site probe at `epsilon`.
pub fn probed_params(n: u32, rho: f64, epsilon: f64) -> SimulationParams {
    let mut p = warmup_params(n, rho);
    p.probes.push(ResidualProbe {
        phi: LocalFunction::centered_monomial(&[0], rho).expect("valid probe"),
        epsilon,
    });
    p
}
