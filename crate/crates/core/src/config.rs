//! Run configuration: one TOML file covering every stage, with unknown
//! keys rejected and a content hash stamped into all outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{AugmentConfig, GridCounts, SamplingBounds};
use crate::designcvae::{AuditConfig, CvaeConfig};
use crate::emodel::{CavityConfig, FrequencyGrid, Substrate};
use crate::error::{Error, Result};
use crate::nets::CurveArch;
use crate::respsearch::{Notch, SearchConfig, TargetSpec};
use crate::respvae::VaeTrainConfig;
use crate::scoring::{OracleConfig, SurrogateConfig};
use crate::train::mix;
use crate::tto::{PenaltyConfig, SearchBudget};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub bounds: SamplingBounds,
    pub counts: GridCounts,
    /// Grid jitter as a fraction of a cell.
    pub jitter: f64,
    /// Convex-hull augmentation; a target total no larger than the grid
    /// keeps the grid only.
    pub augment: AugmentConfig,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            bounds: SamplingBounds::default(),
            counts: GridCounts::default(),
            jitter: 0.0,
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Out-of-band hinge level in dB for oracle scores; off when absent.
    pub out_of_band_hinge_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Target notches as `f_ghz:bw_ghz:depth_db`, one single-notch target each.
    pub targets: Vec<String>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            targets: vec!["2.4:0.2:-15".into(), "3.5:0.25:-20".into(), "5.2:0.3:-15".into()],
            budgets: vec![1, 5, 10, 25, 50],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn target_specs(&self) -> Result<Vec<TargetSpec>> {
        self.targets
            .iter()
            .map(|t| Ok(TargetSpec::new(vec![t.parse::<Notch>()?])))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub vae: PathBuf,
    pub cvae: PathBuf,
    pub surrogate: PathBuf,
    /// Directory for histories, reports and experiment tables.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "run/dataset.csv".into(),
            vae: "run/vae.ckpt".into(),
            cvae: "run/cvae.ckpt".into(),
            surrogate: "run/surrogate.ckpt".into(),
            out_dir: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every random stream of the run.
    pub seed: u64,
    pub substrate: Substrate,
    pub grid: FrequencyGrid,
    pub cavity: CavityConfig,
    pub dataset: DatasetConfig,
    pub arch: CurveArch,
    pub vae: VaeTrainConfig,
    pub cvae: CvaeConfig,
    pub audit: AuditConfig,
    pub surrogate: SurrogateConfig,
    pub search: SearchConfig,
    pub penalty: PenaltyConfig,
    pub scoring: ScoringConfig,
    pub budget: SearchBudget,
    pub experiment: ExperimentConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            substrate: Substrate::default(),
            grid: FrequencyGrid::default(),
            cavity: CavityConfig::default(),
            dataset: DatasetConfig::default(),
            arch: CurveArch::default(),
            vae: VaeTrainConfig::default(),
            cvae: CvaeConfig::default(),
            audit: AuditConfig::default(),
            surrogate: SurrogateConfig::default(),
            search: SearchConfig::default(),
            penalty: PenaltyConfig::default(),
            scoring: ScoringConfig::default(),
            budget: SearchBudget::default(),
            experiment: ExperimentConfig::default(),
            paths: PathsConfig::default(),
        };
        c.set_seed(0);
        c
    }
}

impl RunConfig {
    /// Parses TOML; missing keys take defaults, unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Missing(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Sets the run seed and the per-stage seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.vae.seed = mix(seed, 101);
        self.cvae.seed = mix(seed, 102);
        self.surrogate.seed = mix(seed, 103);
        self.audit.seed = mix(seed, 104);
        self.budget.seed = mix(seed, 105);
    }

    /// Seed of the dataset sampler and split.
    pub fn dataset_seed(&self) -> u64 {
        mix(self.seed, 100)
    }

    pub fn validate(&self) -> Result<()> {
        self.substrate.validate()?;
        self.grid.validate()?;
        self.cavity.validate()?;
        self.dataset.bounds.validate()?;
        self.arch.validate()?;
        self.vae.validate()?;
        self.cvae.validate()?;
        self.surrogate.validate()?;
        self.search.validate()?;
        self.penalty.validate()?;
        self.budget.validate()?;
        self.experiment.target_specs()?;
        if self.arch.n != self.grid.n {
            return Err(Error::Config(format!(
                "network length {} differs from the grid's {} samples",
                self.arch.n, self.grid.n
            )));
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(Error::Config("dataset.val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            cavity: self.cavity,
            out_of_band_hinge_db: self.scoring.out_of_band_hinge_db,
        }
    }

    /// Fully resolved configuration as TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_toml().as_bytes()))
    }
}
