//! Run manifest and the record formats written by `simulate`.

use std::collections::BTreeMap;

use rwdre::numeric::run_seed;
use rwdre::stats::{EnsembleSummary, RunRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const RESIDUAL_FILE: &str = "residuals.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything that determines the outputs of a `simulate` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub tool_version: String,
    /// `splitmix64(splitmix64(master_seed) ^ run)`, one per run index.
    pub run_seeds: Vec<u64>,
    pub config: Config,
}

impl RunManifest {
    pub fn new(config: &Config) -> Self {
        Self {
            config_hash: config.hash(),
            master_seed: config.run.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run_seeds: (0..config.run.runs)
                .map(|i| run_seed(config.run.seed, i))
                .collect(),
            config: config.clone(),
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Telemetry {
    pub workers: usize,
    pub wall_clock_seconds: f64,
    pub total_events: u64,
    pub events_per_run: Vec<u64>,
    pub max_relative_defect: f64,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub manifest_hash: String,
    pub manifest: RunManifest,
    pub telemetry: Telemetry,
}

/// First line of every JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub manifest_hash: String,
    pub config_hash: String,
    pub kind: String,
    pub n: u32,
    pub rho: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub run: u64,
    pub t: f64,
    pub x: i64,
    /// `(x_t − v n t)/√n`.
    #[serde(rename = "X")]
    pub centered: f64,
    #[serde(rename = "M")]
    pub martingale: f64,
    #[serde(rename = "A")]
    pub additive: f64,
    pub qv: f64,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub run: u64,
    pub n: u32,
    pub epsilon: f64,
    pub phi_id: String,
    pub value: f64,
}

pub fn trajectory_rows<'a>(
    record: &'a RunRecord,
    jumps: &'a [i64],
) -> impl Iterator<Item = TrajectoryRow> + 'a {
    record.points.iter().map(move |p| TrajectoryRow {
        run: record.run,
        t: p.time,
        x: p.position,
        centered: p.centered_scaled,
        martingale: p.martingale,
        additive: p.additive,
        qv: p.quadratic_variation,
        counts: jumps
            .iter()
            .zip(&p.counts)
            .map(|(z, &c)| (z.to_string(), c))
            .collect(),
    })
}

pub fn residual_rows<'a>(
    record: &'a RunRecord,
    summary: &'a EnsembleSummary,
    config: &'a Config,
) -> impl Iterator<Item = ResidualRow> + 'a {
    config
        .probes
        .iter()
        .zip(&record.residuals)
        .map(move |(probe, &value)| ResidualRow {
            run: record.run,
            n: summary.n,
            epsilon: probe.epsilon,
            phi_id: probe.id.clone(),
            value,
        })
}
