//! Small models and data shared by the integration tests.

#![allow(dead_code)]

use patchdesign::dataset::{build_dataset, grid_sample, split, DatasetRecord, GridCounts, SamplingBounds};
use patchdesign::designcvae::{train_cvae, CvaeConfig, DesignCvae};
use patchdesign::emodel::{CavityConfig, FrequencyGrid, Substrate};
use patchdesign::nets::CurveArch;
use patchdesign::respvae::{train_vae, RespVae, VaeTrainConfig};
use patchdesign::scoring::{train_surrogate, Surrogate, SurrogateConfig};

pub const N: usize = 64;

pub fn grid() -> FrequencyGrid {
    FrequencyGrid::new(1.0, 10.0, N).unwrap()
}

pub fn arch() -> CurveArch {
    CurveArch {
        n: N,
        enc_channels: vec![1, 4, 8],
        dec_channels: vec![8, 4],
        latent: 6,
        ..CurveArch::default()
    }
}

pub fn records() -> Vec<DatasetRecord> {
    let designs = grid_sample(&SamplingBounds::default(), GridCounts { l: 4, ratio: 3, p: 3 }, 1, 0.0).unwrap();
    build_dataset(&designs, &Substrate::default(), &CavityConfig::default(), &grid()).unwrap()
}

pub fn cvae_config(eta: f64) -> CvaeConfig {
    CvaeConfig {
        epochs: 3,
        batch: 8,
        eta,
        latent: 3,
        encoder_hidden: 8,
        decoder_hidden: vec![16, 16, 16, 8],
        anneal_epochs: 2,
        ..CvaeConfig::default()
    }
}

pub struct Trained {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub vae: RespVae,
    pub cvae: DesignCvae,
    pub surrogate: Surrogate,
}

pub fn trained() -> Trained {
    let all = records();
    let (train, val) = split(&all, 0.25, 3).unwrap();
    let vcfg = VaeTrainConfig {
        epochs: 3,
        batch: 8,
        anneal_epochs: 2,
        ..VaeTrainConfig::default()
    };
    let (vae, _) = train_vae(&train, &val, &arch(), &vcfg, &mut |_| {}).unwrap();
    let (cvae, _) = train_cvae(&train, &val, &vae, &cvae_config(0.1), &mut |_| {}).unwrap();
    let scfg = SurrogateConfig {
        epochs: 3,
        batch: 8,
        ..SurrogateConfig::default()
    };
    let (surrogate, _) = train_surrogate(&train, &val, &arch(), &scfg, &mut |_| {}).unwrap();
    Trained {
        train,
        val,
        vae,
        cvae,
        surrogate,
    }
}
