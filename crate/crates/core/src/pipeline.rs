//! Config-driven glue shared by the command-line tool and end-to-end
//! checks: dataset generation, splits and checkpoint loading.

use std::path::Path;

use diffcore::Checkpoint;

use crate::config::RunConfig;
use crate::dataset::{build_dataset, grid_sample, hull_augment, split, DatasetRecord};
use crate::designcvae::DesignCvae;
use crate::error::{Error, Result};
use crate::respvae::RespVae;
use crate::scoring::Surrogate;
use crate::train::mix;

/// Grid designs plus hull augmentation up to the configured total,
/// simulated on the configured grid.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Vec<DatasetRecord>> {
    let seed = cfg.dataset_seed();
    let mut designs = grid_sample(&cfg.dataset.bounds, cfg.dataset.counts, seed, cfg.dataset.jitter)?;
    let extra = hull_augment(&designs, &cfg.dataset.augment, mix(seed, 1))?;
    designs.extend(extra);
    build_dataset(&designs, &cfg.substrate, &cfg.cavity, &cfg.grid)
}

/// Deterministic (train, validation) split of `records`.
pub fn split_records(cfg: &RunConfig, records: &[DatasetRecord]) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    split(records, cfg.dataset.val_fraction, mix(cfg.dataset_seed(), 2))
}

fn read_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(format!("{what} checkpoint {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn load_vae(path: &Path) -> Result<RespVae> {
    RespVae::from_checkpoint(&read_checkpoint(path, "response VAE")?)
}

pub fn load_cvae(path: &Path) -> Result<DesignCvae> {
    DesignCvae::from_checkpoint(&read_checkpoint(path, "design CVAE")?)
}

pub fn load_surrogate(path: &Path) -> Result<Surrogate> {
    Surrogate::from_checkpoint(&read_checkpoint(path, "surrogate")?)
}

/// Stamps the configuration hash into a checkpoint.
pub fn save_checkpoint(mut ck: Checkpoint, path: &Path, config_hash: &str) -> Result<()> {
    ck.set_meta("config_hash", config_hash);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(ck.save(path)?)
}
