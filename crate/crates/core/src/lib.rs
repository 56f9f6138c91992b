//! Random walks driven by conservative interacting particle systems.
//!
//! A walker on `Z` jumps at rates that depend on the local configuration of an
//! exclusion process evolving on a faster time scale. The crate simulates the
//! coupled system exactly, splits the walker's fluctuations into a martingale
//! part and an additive functional of the environment, evaluates the limiting
//! variance in closed form, and provides an exact small-torus oracle for the
//! relative entropy of the environment seen from the walker.

// `!(x <= bound)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decomposition;
pub mod dynamics;
pub mod lattice;
pub mod mollifier;
pub mod numeric;
pub mod oracle;
pub mod quadrature;
pub mod stats;
pub mod theory;

pub use decomposition::{
    accumulate, fluctuation_field, replacement_residual, smoothed_density, DecompositionError,
    DecompositionRecord, DecompositionRow,
};
pub use dynamics::{simulate, DynamicsError, ResidualProbe, SimulationParams, Trajectory};
pub use lattice::{
    validate_rates, warmup_rates, Configuration, ExchangeRate, LocalFunction, SiteWeights,
    ValidationReport, Violation, WalkRateSet,
};
pub use theory::{
    asymptotic_speed, mean_local, noise_coefficient, speed_derivative, z_variance, LimitVariance,
    LocalMean, RateStatistics, TheoryError,
};
