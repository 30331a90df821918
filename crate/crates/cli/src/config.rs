//! Experiment configuration: a sectioned TOML file with one scalar or flat
//! list per key.

use std::path::Path;

use gcldr_core::autodiff::OptimizerKind;
use gcldr_core::data::{Cell, DataConfig, NuisanceKind, NuisanceSpec, SplitSpec};
use gcldr_core::meta::MetaGradientMode;
use gcldr_core::model::BundleConfig;
use gcldr_core::trainer::{LossWeights, TrainConfig, Variant};
use gcldr_core::GcldrError;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub dim: usize,
    pub per_combo: usize,
    pub noise: f64,
    pub seed: u64,
    /// `diagonal`, `three_domain`, `two_platform` or `custom`.
    pub split: String,
    /// Number of class sets (and domains) for the `diagonal` split.
    pub class_sets: usize,
    /// Custom table, rows separated by `;`, cells by `,` (`train`, `test`, `absent`).
    pub cells: String,
    /// Custom class sets, rows separated by `;`, class ids by `,`.
    pub sets: String,
    pub nuisance: NuisanceKind,
    pub magnitude: f64,
    pub validation_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            classes: 6,
            dim: 20,
            per_combo: 200,
            noise: 0.3,
            seed: 0,
            split: "diagonal".into(),
            class_sets: 2,
            cells: String::new(),
            sets: String::new(),
            nuisance: NuisanceKind::AdditiveOffset,
            magnitude: 2.0,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mapping_width: usize,
    pub feature_width: usize,
    pub domains: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { mapping_width: 512, feature_width: 128, domains: 2, dropout: 0.5, bn_momentum: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub variants: Vec<Variant>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub gamma: f64,
    pub alpha: f64,
    pub w_cd: f64,
    pub w_ci: f64,
    pub w_ac: f64,
    pub w_d: f64,
    pub w_u: f64,
    /// 0 disables early stopping.
    pub patience: usize,
    pub meta_gradient: MetaGradientMode,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            variants: vec![Variant::Full],
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            gamma: t.gamma,
            alpha: t.alpha,
            w_cd: 1.0,
            w_ci: 1.0,
            w_ac: 1.0,
            w_d: 1.0,
            w_u: 1.0,
            patience: 0,
            meta_gradient: t.meta_gradient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// FAR/FRR threshold; 0 means `1/c`.
    pub tau: f64,
    pub seeds: Vec<u64>,
    /// Independent data draws per seed.
    pub repeat: usize,
    pub taylor_alphas: Vec<f64>,
    pub gradcheck_seeds: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { tau: 0.0, seeds: vec![0], repeat: 1, taylor_alphas: vec![1e-1, 1e-2, 1e-3], gradcheck_seeds: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

fn parse_table<T>(text: &str, what: &str, cell: impl Fn(&str) -> Option<T>) -> Result<Vec<Vec<T>>, CliError> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|c| cell(c.trim()).ok_or_else(|| CliError::Config(format!("bad {what} entry {:?}", c.trim()))))
                .collect()
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn split(&self) -> Result<SplitSpec, CliError> {
        let d = &self.dataset;
        let spec = match d.split.as_str() {
            "diagonal" => SplitSpec::diagonal(d.classes, d.class_sets)?,
            "three_domain" => SplitSpec::three_domain(d.classes)?,
            "two_platform" => SplitSpec::two_platform(),
            "custom" => {
                let cells = parse_table(&d.cells, "cell", |c| match c {
                    "train" => Some(Cell::Train),
                    "test" => Some(Cell::Test),
                    "absent" => Some(Cell::Absent),
                    _ => None,
                })?;
                let sets = parse_table(&d.sets, "class", |c| c.parse::<usize>().ok())?;
                SplitSpec::new(cells, sets)?
            }
            other => return Err(CliError::Config(format!("unknown split {other:?}"))),
        };
        Ok(spec)
    }

    /// Data settings for one run; `offset` shifts the generator seed.
    pub fn data_config(&self, offset: u64) -> Result<DataConfig, CliError> {
        let d = &self.dataset;
        Ok(DataConfig {
            classes: d.classes,
            dim: d.dim,
            per_combo: d.per_combo,
            noise: d.noise,
            seed: d.seed.wrapping_add(offset),
            split: self.split()?,
            nuisance: NuisanceSpec { kind: d.nuisance, magnitude: d.magnitude },
        })
    }

    pub fn bundle_config(&self, seed: u64) -> BundleConfig {
        let m = &self.model;
        BundleConfig {
            mapping_width: m.mapping_width,
            feature_width: m.feature_width,
            dropout: m.dropout,
            bn_momentum: m.bn_momentum,
            seed,
            ..BundleConfig::new(self.dataset.dim, self.dataset.classes, m.domains)
        }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            seed,
            variant,
            gamma: t.gamma,
            alpha: t.alpha,
            weights: LossWeights { cd: t.w_cd, ci: t.w_ci, ac: t.w_ac, d: t.w_d, u: t.w_u },
            patience: (t.patience > 0).then_some(t.patience),
            meta_gradient: t.meta_gradient,
        }
    }

    pub fn tau(&self) -> f64 {
        if self.evaluation.tau > 0.0 {
            self.evaluation.tau
        } else {
            1.0 / self.dataset.classes as f64
        }
    }

    /// Rejects every inconsistency before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.data_config(0)?.validate()?;
        self.bundle_config(0).validate()?;
        if self.split()?.domains() != self.model.domains {
            log::warn!(
                "model uses k = {} latent domains, data has {} generating domains",
                self.model.domains,
                self.split()?.domains()
            );
        }
        if self.training.variants.is_empty() {
            return Err(CliError::Config("training.variants is empty".into()));
        }
        for &v in &self.training.variants {
            self.train_config(v, 0).validate()?;
        }
        let e = &self.evaluation;
        if e.seeds.is_empty() {
            return Err(CliError::Config("evaluation.seeds is empty".into()));
        }
        let mut s = e.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != e.seeds.len() {
            return Err(CliError::Config("evaluation.seeds has duplicates".into()));
        }
        if e.repeat == 0 {
            return Err(CliError::Config("evaluation.repeat must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&e.tau) {
            return Err(CliError::Config(format!("evaluation.tau {} outside [0,1]", e.tau)));
        }
        if !(0.0..1.0).contains(&self.dataset.validation_fraction) {
            return Err(CliError::Config("dataset.validation_fraction outside [0,1)".into()));
        }
        if e.taylor_alphas.is_empty() || e.taylor_alphas.windows(2).any(|w| w[1] >= w[0]) || e.taylor_alphas.iter().any(|a| *a < 0.0) {
            return Err(CliError::Config("evaluation.taylor_alphas must be nonempty, nonnegative and descending".into()));
        }
        if e.gradcheck_seeds == 0 {
            return Err(CliError::Config("evaluation.gradcheck_seeds must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl From<GcldrError> for CliError {
    fn from(e: GcldrError) -> Self {
        match e {
            GcldrError::Config(m) => CliError::Config(m),
            GcldrError::Parse { line, msg } => CliError::Config(format!("line {line}: {msg}")),
            GcldrError::Divergence { context } => CliError::Divergence(context),
            other => CliError::Core(other),
        }
    }
}
