//! TOML run configuration.
//!
//! A file is parsed into [`RawConfig`], presets are expanded, and the result
//! is a [`Config`] with every rate table explicit. The canonical form is the
//! TOML serialization of a [`Config`]; the config hash is the SHA-256 of its
//! JSON serialization, which has a fixed field order.

use std::collections::BTreeSet;

use rwdre::dynamics::{DynamicsError, ResidualProbe, SimulationParams};
use rwdre::lattice::{warmup_rates, ExchangeRate, LocalFunction, WalkRateSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_KAPPA: f64 = 16.0;
pub const DEFAULT_SAMPLE_STEPS: usize = 64;
pub const DEFAULT_RUNS: u64 = 1;
pub const DEFAULT_BUDGET: f64 = 1e9;
pub const DEFAULT_DIFFUSIVITY: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("expected {expected:.3e} events exceed the budget of {budget:.3e}")]
    Budget { expected: f64, budget: f64 },
}

fn field(name: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: name.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeSpec {
    pub support: Vec<i64>,
    pub table: Vec<f64>,
    pub epsilon0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkSpec {
    pub z: i64,
    pub support: Vec<i64>,
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub id: String,
    pub support: Vec<i64>,
    pub table: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub preset: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub exchange: Option<ExchangeSpec>,
    pub walk: Option<Vec<WalkSpec>>,
    pub diffusivity: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRun {
    pub n: Option<u32>,
    pub rho: Option<f64>,
    pub horizon: Option<f64>,
    pub kappa: Option<f64>,
    pub lattice_size: Option<usize>,
    pub sample_steps: Option<usize>,
    pub seed: Option<u64>,
    pub runs: Option<u64>,
    pub budget_events: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub run: RawRun,
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub exchange: ExchangeSpec,
    /// Sorted by jump size.
    pub walk: Vec<WalkSpec>,
    pub diffusivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub n: u32,
    pub rho: f64,
    pub horizon: f64,
    pub kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice_size: Option<usize>,
    pub sample_steps: usize,
    pub seed: u64,
    pub runs: u64,
    pub budget_events: f64,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: Model,
    pub run: RunSpec,
    pub probes: Vec<ProbeSpec>,
}

/// Values given on the command line or through the environment, applied
/// before hashing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub runs: Option<u64>,
    pub seed: Option<u64>,
    pub budget_events: Option<f64>,
}

fn expand_preset(model: &RawModel) -> Result<(ExchangeSpec, Vec<WalkSpec>), ConfigError> {
    match model.preset.as_deref() {
        Some("warmup") => {
            if model.exchange.is_some() || model.walk.is_some() {
                return Err(field("model.preset", "a preset cannot be combined with explicit rate tables"));
            }
            let alpha = model.alpha.ok_or_else(|| field("model.alpha", "required by preset warmup"))?;
            let beta = model.beta.ok_or_else(|| field("model.beta", "required by preset warmup"))?;
            if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0 && (alpha + beta).is_finite()) {
                return Err(field(
                    "model.alpha",
                    format!("alpha={alpha}, beta={beta} must be nonnegative with a positive sum"),
                ));
            }
            let (c, r) = warmup_rates(alpha, beta);
            let exchange = ExchangeSpec {
                support: c.function.support().to_vec(),
                table: c.function.table().to_vec(),
                epsilon0: c.epsilon0,
            };
            let walk = r
                .entries
                .iter()
                .map(|(&z, f)| WalkSpec {
                    z,
                    support: f.support().to_vec(),
                    table: f.table().to_vec(),
                })
                .collect();
            Ok((exchange, walk))
        }
        Some(other) => Err(field("model.preset", format!("unknown preset `{other}`"))),
        None => {
            if model.alpha.is_some() || model.beta.is_some() {
                return Err(field("model.alpha", "alpha and beta only apply to a preset"));
            }
            let exchange = model
                .exchange
                .clone()
                .ok_or_else(|| field("model.exchange", "missing rate table"))?;
            let walk = model
                .walk
                .clone()
                .ok_or_else(|| field("model.walk", "missing rate table"))?;
            Ok((exchange, walk))
        }
    }
}

impl Config {
    pub fn parse(text: &str, overrides: Overrides) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::resolve(raw, overrides)
    }

    pub fn resolve(raw: RawConfig, overrides: Overrides) -> Result<Self, ConfigError> {
        let (exchange, mut walk) = expand_preset(&raw.model)?;
        walk.sort_by_key(|w| w.z);
        let run = raw.run;
        let config = Config {
            model: Model {
                exchange,
                walk,
                diffusivity: raw.model.diffusivity.unwrap_or(DEFAULT_DIFFUSIVITY),
            },
            run: RunSpec {
                n: run.n.ok_or_else(|| field("run.n", "missing"))?,
                rho: run.rho.ok_or_else(|| field("run.rho", "missing"))?,
                horizon: run.horizon.ok_or_else(|| field("run.horizon", "missing"))?,
                kappa: run.kappa.unwrap_or(DEFAULT_KAPPA),
                lattice_size: run.lattice_size,
                sample_steps: run.sample_steps.unwrap_or(DEFAULT_SAMPLE_STEPS),
                seed: overrides.seed.or(run.seed).unwrap_or(0),
                runs: overrides.runs.or(run.runs).unwrap_or(DEFAULT_RUNS),
                budget_events: overrides
                    .budget_events
                    .or(run.budget_events)
                    .unwrap_or(DEFAULT_BUDGET),
            },
            probes: raw.probes,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.model.diffusivity > 0.0 && self.model.diffusivity.is_finite()) {
            return Err(field("model.diffusivity", "must be positive"));
        }
        if self.run.sample_steps == 0 {
            return Err(field("run.sample_steps", "must be at least 1"));
        }
        if self.run.runs == 0 {
            return Err(field("run.runs", "must be at least 1"));
        }
        if !(self.run.budget_events > 0.0) {
            return Err(field("run.budget_events", "must be positive"));
        }
        let mut ids = BTreeSet::new();
        for (k, p) in self.probes.iter().enumerate() {
            if !ids.insert(p.id.as_str()) {
                return Err(field(format!("probes[{k}].id"), format!("duplicate id `{}`", p.id)));
            }
        }
        self.params().map(|_| ())
    }

    /// Simulation parameters, validated.
    pub fn params(&self) -> Result<SimulationParams, ConfigError> {
        let e = &self.model.exchange;
        let function = LocalFunction::new(e.support.clone(), e.table.clone())
            .map_err(|err| field("model.exchange", err.to_string()))?;
        let exchange = ExchangeRate::new(function, e.epsilon0);
        let mut entries = std::collections::BTreeMap::new();
        for w in &self.model.walk {
            let f = LocalFunction::new(w.support.clone(), w.table.clone())
                .map_err(|err| field(format!("model.walk[z={}]", w.z), err.to_string()))?;
            if entries.insert(w.z, f).is_some() {
                return Err(field(format!("model.walk[z={}]", w.z), "duplicate jump size"));
            }
        }
        let probes = self
            .probes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                LocalFunction::new(p.support.clone(), p.table.clone())
                    .map(|phi| ResidualProbe {
                        phi,
                        epsilon: p.epsilon,
                    })
                    .map_err(|err| field(format!("probes[{k}]"), err.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let r = &self.run;
        let mut params =
            SimulationParams::new(r.n, r.rho, r.horizon, exchange, WalkRateSet::new(entries))
                .with_seed(r.seed);
        params.kappa = r.kappa;
        params.lattice_size = r.lattice_size;
        params.event_budget = r.budget_events;
        params.probes = probes;
        if r.horizon > 0.0 && r.horizon.is_finite() {
            params = params.with_uniform_samples(r.sample_steps);
        }
        params.validate().map_err(|err| match err {
            DynamicsError::InvalidParameter { field: name, reason } => {
                field(format!("run.{name}"), reason)
            }
            DynamicsError::InvalidRates(report) => field("model", report.to_string()),
            DynamicsError::BudgetExceeded { expected, budget } => {
                ConfigError::Budget { expected, budget }
            }
            other => field("run", other.to_string()),
        })?;
        Ok(params)
    }

    /// The canonical TOML text; parsing it yields `self` again.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
