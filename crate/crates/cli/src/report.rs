use gcldr_core::eval::MetricsReport;
use gcldr_core::trainer::{HistoryRow, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// One `fit` on one data draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub variant: Variant,
    pub seed: u64,
    pub repeat: usize,
    pub metrics: MetricsReport,
    pub history: Vec<HistoryRow>,
    pub wall_clock_s: f64,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub runs: usize,
    pub auc: Summary,
    pub far: Summary,
    pub frr: Summary,
    pub bfr: Summary,
    pub acc1: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
    pub aggregate: Vec<Aggregate>,
    pub wall_clock_s: f64,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

impl RunReport {
    pub fn new(config: ExperimentConfig, runs: Vec<RunEntry>, wall_clock_s: f64) -> Self {
        let mut aggregate = Vec::new();
        for &v in &config.training.variants {
            let mine: Vec<&RunEntry> = runs.iter().filter(|r| r.variant == v).collect();
            if mine.is_empty() {
                continue;
            }
            let col = |f: fn(&MetricsReport) -> f64| Summary::of(&mine.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
            aggregate.push(Aggregate {
                variant: v,
                runs: mine.len(),
                auc: col(|m| m.auc),
                far: col(|m| m.far),
                frr: col(|m| m.frr),
                bfr: col(|m| m.bfr),
                acc1: col(|m| m.acc1),
            });
        }
        RunReport {
            schema_version: SCHEMA_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&config),
            config,
            runs,
            aggregate,
            wall_clock_s,
        }
    }

    pub fn aggregate_for(&self, v: Variant) -> Option<&Aggregate> {
        self.aggregate.iter().find(|a| a.variant == v)
    }

    /// Largest absolute difference between the metrics and histories of two
    /// reports over the same runs; `None` if the runs differ.
    pub fn max_metric_difference(&self, other: &RunReport) -> Option<f64> {
        if self.runs.len() != other.runs.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.runs.iter().zip(&other.runs) {
            if (a.variant, a.seed, a.repeat) != (b.variant, b.seed, b.repeat) || a.history.len() != b.history.len() {
                return None;
            }
            let (m, n) = (&a.metrics, &b.metrics);
            for (x, y) in [(m.auc, n.auc), (m.far, n.far), (m.frr, n.frr), (m.bfr, n.bfr), (m.acc1, n.acc1)] {
                worst = worst.max((x - y).abs());
            }
            for (h, g) in a.history.iter().zip(&b.history) {
                for (x, y) in [(h.l_cd, g.l_cd), (h.l_ci, g.l_ci), (h.l_ac, g.l_ac), (h.l_d, g.l_d), (h.l_u, g.l_u)] {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        Some(worst)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Parses and checks a report document.
    pub fn from_json(text: &str) -> Result<RunReport, CliError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("report: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(CliError::Config(format!("report schema version {v}, expected {SCHEMA_VERSION}"))),
            None => return Err(CliError::Config("report has no schema_version".into())),
        }
        let report: RunReport = serde_json::from_value(value).map_err(|e| CliError::Config(format!("report: {e}")))?;
        report.check()?;
        Ok(report)
    }

    /// Structural invariants: seeds match the config and each run has one
    /// history row per completed epoch.
    pub fn check(&self) -> Result<(), CliError> {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut want = self.config.evaluation.seeds.clone();
        want.sort_unstable();
        if seeds != want {
            return Err(CliError::Config(format!("report seeds {seeds:?} differ from config seeds {want:?}")));
        }
        for r in &self.runs {
            if r.history.is_empty() || r.history.len() > self.config.training.epochs {
                return Err(CliError::Config(format!("run {} seed {} has {} history rows", r.variant, r.seed, r.history.len())));
            }
        }
        if self.config_hash != config_hash(&self.config) {
            return Err(CliError::Config("config hash does not match embedded config".into()));
        }
        Ok(())
    }
}
