//! Run configuration shared by every command: one document with a section per
//! module, plus the data pipeline that turns it into standardized splits.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::WeightedCeConfig;
use crate::dataset::{generate_synthetic, load_csv, split, DataSplits, PanelScheme, SplitSpec, Standardizer, SyntheticSpec};
use crate::encoder::EmConfig;
use crate::env::{EnvConfig, ResetMode, ShapingParams, DEFAULT_COST_UNIT};
use crate::error::{Error, Result};
use crate::io::derive_seed;
use crate::pareto::{log_space, Metric, SweepGrid};
use crate::policy::PpoConfig;
use crate::trainer::{ClassifierMode, SmDdpoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Where records come from. With `source = "synthetic"` either `synthetic_spec`
/// points at a JSON [`SyntheticSpec`] or the built-in cheap-informative task is
/// drawn with `n` and `positive_prior`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub positive_prior: f64,
    pub synthetic_spec: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub scheme: Option<PathBuf>,
    pub fractions: [f64; 5],
    /// Z-score features with statistics of the two training parts.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n: 20_000,
            positive_prior: 0.1,
            synthetic_spec: None,
            csv: None,
            scheme: None,
            fractions: SplitSpec::default().fractions,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub outer_loops: usize,
    pub policy_loops: usize,
    pub classifier_loops: usize,
    pub classifier_mode: ClassifierMode,
    pub pretrain_epochs: usize,
    pub pretrain_masks: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = SmDdpoConfig::default();
        Self {
            outer_loops: d.outer_loops,
            policy_loops: d.policy_loops,
            classifier_loops: d.classifier_loops,
            classifier_mode: d.classifier_mode,
            pretrain_epochs: d.pretrain_epochs,
            pretrain_masks: d.pretrain_masks,
        }
    }
}

/// Reward weights for single-instance training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub lambda: f64,
    pub rho: f64,
    pub cost_unit: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            rho: -0.3,
            cost_unit: DEFAULT_COST_UNIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Full lambda by rho product.
    Product,
    /// Lambda pinned to the training class ratio, rho swept alone.
    Am,
}

/// Log-spaced grid ranges. Rho magnitudes are given positive and negated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mode: SweepMode,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_lambda: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub n_rho: usize,
    pub metric: Metric,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            mode: SweepMode::Product,
            lambda_min: 0.25,
            lambda_max: 16.0,
            n_lambda: 19,
            rho_min: 0.01,
            rho_max: 3.0,
            n_rho: 10,
            metric: Metric::F1,
        }
    }
}

impl SweepSection {
    pub fn rhos(&self) -> Vec<f64> {
        log_space(self.rho_min, self.rho_max, self.n_rho).into_iter().map(|r| -r).collect()
    }

    /// The grid; `class_ratio` is only read in AM mode.
    pub fn grid(&self, class_ratio: f64) -> Result<SweepGrid> {
        let g = match self.mode {
            SweepMode::Product => SweepGrid::product(&log_space(self.lambda_min, self.lambda_max, self.n_lambda), &self.rhos()),
            SweepMode::Am => SweepGrid::am(class_ratio, &self.rhos()),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64, n: usize| lo > 0.0 && hi >= lo && hi.is_finite() && n >= 1 && (n > 1 || lo == hi);
        if !ok(self.lambda_min, self.lambda_max, self.n_lambda) {
            return Err(Error::Spec("lambda range must satisfy 0 < min <= max with n >= 1".into()));
        }
        if !ok(self.rho_min, self.rho_max, self.n_rho) {
            return Err(Error::Spec("rho magnitude range must satisfy 0 < min <= max with n >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub instances: usize,
    /// Largest acceptable F1 gap between the shaped solutions and the exact front.
    pub eps_limit: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            instances: 20,
            eps_limit: 0.01,
        }
    }
}

/// Everything one invocation needs. The seed always comes from the command
/// line; it is stored here so the resolved document reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub jobs: usize,
    pub data: DataConfig,
    pub encoder: EmConfig,
    pub classifier: WeightedCeConfig,
    pub ppo: PpoConfig,
    pub trainer: TrainerSection,
    pub env: EnvSection,
    pub sweep: SweepSection,
    pub oracle: OracleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            jobs: 1,
            data: DataConfig::default(),
            encoder: EmConfig::default(),
            classifier: WeightedCeConfig::default(),
            ppo: PpoConfig::default(),
            trainer: TrainerSection::default(),
            env: EnvSection::default(),
            sweep: SweepSection::default(),
            oracle: OracleSection::default(),
        }
    }
}

impl RunConfig {
    /// Short schedules for a laptop: tenfold fewer outer loops, a fifth of the
    /// encoder iterations, faster learning rates.
    pub fn desk() -> Self {
        let t = SmDdpoConfig::desk();
        let mut cfg = Self::default();
        cfg.encoder.iterations = 100;
        cfg.classifier = t.classifier;
        cfg.ppo = t.ppo;
        cfg.trainer.outer_loops = t.outer_loops;
        cfg
    }

    pub fn trainer_config(&self) -> SmDdpoConfig {
        SmDdpoConfig {
            outer_loops: self.trainer.outer_loops,
            policy_loops: self.trainer.policy_loops,
            classifier_loops: self.trainer.classifier_loops,
            classifier_mode: self.trainer.classifier_mode,
            pretrain_epochs: self.trainer.pretrain_epochs,
            pretrain_masks: self.trainer.pretrain_masks,
            classifier: self.classifier.clone(),
            ppo: self.ppo.clone(),
        }
    }

    pub fn shaping(&self) -> Result<ShapingParams> {
        ShapingParams::new(self.env.lambda, self.env.rho)
    }

    pub fn env_config(&self, scheme: PanelScheme, shaping: ShapingParams) -> EnvConfig {
        let mut cfg = EnvConfig::new(scheme, shaping, ResetMode::Train);
        cfg.cost_unit = self.env.cost_unit;
        cfg
    }

    /// Checks every section; errors name the offending section.
    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, e: Error| match e {
            Error::Spec(m) => Error::Spec(format!("{section}: {m}")),
            other => Error::Spec(format!("{section}: {other}")),
        };
        if self.jobs == 0 {
            return Err(Error::Spec("jobs: must be >= 1".into()));
        }
        self.split_spec().validate().map_err(|e| at("data.fractions", e))?;
        match self.data.source {
            DataSource::Synthetic => {
                if let Some(p) = &self.data.synthetic_spec {
                    require_file("data.synthetic_spec", p)?;
                } else if self.data.n == 0 || !(self.data.positive_prior > 0.0 && self.data.positive_prior < 1.0) {
                    return Err(Error::Spec("data: n must be positive and positive_prior in (0,1)".into()));
                }
            }
            DataSource::Csv => {
                let csv = self.data.csv.as_ref().ok_or_else(|| Error::Spec("data.csv: required when source = \"csv\"".into()))?;
                require_file("data.csv", csv)?;
                let scheme = self.data.scheme.as_ref().ok_or_else(|| Error::Spec("data.scheme: required when source = \"csv\"".into()))?;
                require_file("data.scheme", scheme)?;
            }
        }
        self.encoder.validate().map_err(|e| at("encoder", e))?;
        self.classifier.validate().map_err(|e| at("classifier", e))?;
        self.ppo.validate().map_err(|e| at("ppo", e))?;
        self.trainer_config().validate().map_err(|e| at("trainer", e))?;
        self.shaping().map_err(|e| at("env", e))?;
        if !(self.env.cost_unit > 0.0 && self.env.cost_unit.is_finite()) {
            return Err(Error::Spec("env.cost_unit: must be positive".into()));
        }
        self.sweep.validate().map_err(|e| at("sweep", e))?;
        if !(self.oracle.eps_limit >= 0.0) {
            return Err(Error::Spec("oracle.eps_limit: must be non-negative".into()));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            fractions: self.data.fractions,
            seed: derive_seed(self.seed, "split", 0),
        }
    }

    /// Loads or draws the records, splits them and standardizes every part.
    pub fn load_data(&self) -> Result<PreparedData> {
        let (records, scheme) = match self.data.source {
            DataSource::Synthetic => {
                let spec = match &self.data.synthetic_spec {
                    Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                    None => SyntheticSpec::cheap_informative(self.data.n, self.data.positive_prior),
                };
                generate_synthetic(&spec, derive_seed(self.seed, "data", 0))?
            }
            DataSource::Csv => {
                let scheme = PanelScheme::load(self.data.scheme.as_deref().expect("validated"))?;
                let records = load_csv(self.data.csv.as_deref().expect("validated"), &scheme)?;
                (records, scheme)
            }
        };
        let mut splits = split(&records, &self.split_spec())?;
        if self.data.standardize {
            let std = Standardizer::fit([&splits.encoder_train[..], &splits.rl_train[..]])?;
            for p in splits.parts_mut() {
                std.apply(p);
            }
        }
        Ok(PreparedData { scheme, splits })
    }
}

fn require_file(field: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Spec(format!("{field}: file {} does not exist", p.display())))
    }
}

/// Standardized splits plus the panel layout.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scheme: PanelScheme,
    pub splits: DataSplits,
}

impl PreparedData {
    pub fn train(&self) -> Arc<Vec<crate::dataset::PatientRecord>> {
        Arc::new(self.splits.rl_train.clone())
    }

    pub fn val(&self) -> Arc<Vec<crate::dataset::PatientRecord>> {
        Arc::new(self.splits.rl_val.clone())
    }

    pub fn test(&self) -> Arc<Vec<crate::dataset::PatientRecord>> {
        Arc::new(self.splits.test.clone())
    }

    /// Negatives per positive in the RL training part.
    pub fn class_ratio(&self) -> f64 {
        let pos = self.splits.rl_train.iter().filter(|r| r.label.is_positive()).count();
        (self.splits.rl_train.len() - pos) as f64 / pos as f64
    }
}
