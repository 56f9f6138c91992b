//! Post-processing of `simulate` output.

use std::collections::BTreeMap;
use std::io::BufRead;

use rwdre::numeric::covariance;
use rwdre::stats::{
    estimate_hurst, increment_moments, replacement_decay, tightness_exponent, HurstEstimate,
    IncrementMoment, Moments, ReplacementReport, ResidualCell, StatsError, TightnessReport,
    DEFAULT_TIGHTNESS_ORDER,
};
use serde::Serialize;
use thiserror::Error;

use crate::output::{Header, ResidualRow, TrajectoryRow};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}")]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeRow {
    pub t: f64,
    pub runs: usize,
    pub centered: Moments,
    pub martingale: Moments,
    pub additive: Moments,
    pub covariance_martingale_additive: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub manifest_hash: Option<String>,
    pub runs: usize,
    pub times: Vec<TimeRow>,
    pub increments: Vec<IncrementMoment>,
    pub hurst: Option<HurstEstimate>,
    pub tightness: Option<TightnessReport>,
    pub replacement: Option<ReplacementReport>,
    /// Estimators that could not be evaluated, with the reason.
    pub skipped: BTreeMap<String, String>,
}

fn read_lines<T, F>(path: &str, mut on_header: F) -> Result<Vec<T>, AnalyzeError>
where
    T: serde::de::DeserializeOwned,
    F: FnMut(Header),
{
    let file = std::fs::File::open(path).map_err(|source| AnalyzeError::Io {
        path: path.to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnalyzeError::Io {
            path: path.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |e: serde_json::Error| AnalyzeError::Parse {
            path: path.to_string(),
            line: k + 1,
            reason: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_error)?;
        if value.get("manifest_hash").is_some() {
            on_header(serde_json::from_value(value).map_err(parse_error)?);
        } else {
            rows.push(serde_json::from_value(value).map_err(parse_error)?);
        }
    }
    Ok(rows)
}

type RunPaths<'a> = BTreeMap<u64, Vec<&'a TrajectoryRow>>;

/// Per-run paths on a common time grid, keyed by run index.
fn paths(rows: &[TrajectoryRow]) -> Result<(Vec<f64>, RunPaths<'_>), StatsError> {
    let mut by_run: RunPaths = BTreeMap::new();
    for row in rows {
        by_run.entry(row.run).or_default().push(row);
    }
    for path in by_run.values_mut() {
        path.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    let first = by_run.values().next().ok_or(StatsError::NoSamples)?;
    let times: Vec<f64> = first.iter().map(|r| r.t).collect();
    for (run, path) in &by_run {
        if path.len() != times.len() || path.iter().zip(&times).any(|(r, t)| r.t != *t) {
            return Err(StatsError::DegenerateGrid(format!(
                "run {run} is sampled on a different time grid"
            )));
        }
    }
    Ok((times, by_run))
}

fn uniform_step(times: &[f64]) -> Option<f64> {
    let dt = times.get(2)? - times.get(1)?;
    let uniform = times
        .windows(2)
        .skip(1)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1.0));
    (uniform && dt > 0.0 && (times[1] - times[0] - dt).abs() <= 1e-9).then_some(dt)
}

/// Residual files are pooled, so runs at several `n` can be compared.
pub fn analyze(trajectory_path: &str, residual_paths: &[String]) -> Result<Report, AnalyzeError> {
    let mut manifest_hash = None;
    let rows: Vec<TrajectoryRow> = read_lines(trajectory_path, |h| manifest_hash = Some(h.manifest_hash))?;
    if rows.is_empty() {
        return Err(StatsError::NoSamples.into());
    }
    let (times, by_run) = paths(&rows)?;
    let column = |k: usize, f: fn(&TrajectoryRow) -> f64| -> Vec<f64> {
        by_run.values().map(|p| f(p[k])).collect()
    };
    let time_rows = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let m = column(k, |r| r.martingale);
            let a = column(k, |r| r.additive);
            TimeRow {
                t,
                runs: by_run.len(),
                centered: Moments::of(&column(k, |r| r.centered)),
                covariance_martingale_additive: covariance(&m, &a),
                martingale: Moments::of(&m),
                additive: Moments::of(&a),
            }
        })
        .collect();

    let mut skipped = BTreeMap::new();
    let mut increments = Vec::new();
    let mut hurst = None;
    let mut tightness = None;
    match uniform_step(&times) {
        Some(dt) => {
            let additive: Vec<Vec<f64>> = by_run
                .values()
                .map(|p| p.iter().map(|r| r.additive).collect())
                .collect();
            let lags: Vec<usize> = std::iter::successors(Some(1usize), |l| Some(l * 2))
                .take_while(|&l| l < times.len())
                .collect();
            match increment_moments(&additive, dt, &lags, DEFAULT_TIGHTNESS_ORDER) {
                Ok(m) => {
                    match estimate_hurst(&m) {
                        Ok(h) => hurst = Some(h),
                        Err(e) => {
                            skipped.insert("hurst".into(), e.to_string());
                        }
                    }
                    match tightness_exponent(&m, DEFAULT_TIGHTNESS_ORDER) {
                        Ok(t) => tightness = Some(t),
                        Err(e) => {
                            skipped.insert("tightness".into(), e.to_string());
                        }
                    }
                    increments = m;
                }
                Err(e) => {
                    skipped.insert("increments".into(), e.to_string());
                }
            }
        }
        None => {
            skipped.insert("increments".into(), "time grid is not uniform".into());
        }
    }

    let mut replacement = None;
    if !residual_paths.is_empty() {
        let mut rows: Vec<ResidualRow> = Vec::new();
        for path in residual_paths {
            rows.extend(read_lines::<ResidualRow, _>(path, |_| {})?);
        }
        let mut cells: BTreeMap<(u32, u64, String), Vec<f64>> = BTreeMap::new();
        for r in rows {
            cells
                .entry((r.n, r.epsilon.to_bits(), r.phi_id))
                .or_default()
                .push(r.value);
        }
        let cells: Vec<ResidualCell> = cells
            .into_iter()
            .map(|((n, eps, phi_id), values)| ResidualCell {
                n,
                epsilon: f64::from_bits(eps),
                phi_id,
                values,
            })
            .collect();
        match replacement_decay(&cells) {
            Ok(r) => replacement = Some(r),
            Err(e) => {
                skipped.insert("replacement".into(), e.to_string());
            }
        }
    }

    Ok(Report {
        manifest_hash,
        runs: by_run.len(),
        times: time_rows,
        increments,
        hurst,
        tightness,
        replacement,
        skipped,
    })
}

/// `tau,variance,abs_moment,count` with a commented header line.
pub fn variance_csv(report: &Report) -> String {
    let mut out = comment(report);
    out.push_str("tau,variance,abs_moment,count\n");
    for m in &report.increments {
        out.push_str(&format!("{},{},{},{}\n", m.tau, m.variance, m.abs_moment, m.count));
    }
    out
}

/// Log-log points of the variance fit with the fitted line.
pub fn hurst_csv(report: &Report) -> Option<String> {
    let h = report.hurst.as_ref()?;
    let mut out = comment(report);
    out.push_str(&format!("# hurst={} interval={:?}\n", h.hurst, h.interval));
    out.push_str("log_tau,log_variance,fitted\n");
    for m in &report.increments {
        let x = m.tau.ln();
        out.push_str(&format!(
            "{},{},{}\n",
            x,
            m.variance.ln(),
            h.fit.intercept + h.fit.slope * x
        ));
    }
    Some(out)
}

fn comment(report: &Report) -> String {
    match &report.manifest_hash {
        Some(h) => format!("# manifest_hash={h}\n"),
        None => String::new(),
    }
}
