//! Stage 1: β-VAE over S11 curves with a 64-dimensional latent space.

use diffcore::{Adam, Checkpoint, Ctx, Mode, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::emodel::{FrequencyGrid, ResponseCurve};
use crate::error::{Error, Result};
use crate::nets::{CurveArch, CurveDecoder, CurveEncoder};
use crate::train::{self, EpochLog};

/// Rows per forward pass when encoding or decoding many curves.
const EVAL_CHUNK: usize = 128;

/// Affine map from dB to a zero-mean, unit-variance scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Statistics over every sample of every training curve.
    pub fn fit(records: &[DatasetRecord]) -> Result<Self> {
        let n: usize = records.iter().map(|r| r.curve.len()).sum();
        if n == 0 {
            return Err(Error::Invalid("cannot fit normalization on an empty set".into()));
        }
        let mean = records.iter().flat_map(|r| &r.curve.values).sum::<f64>() / n as f64;
        let var = records
            .iter()
            .flat_map(|r| &r.curve.values)
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        Ok(Normalizer {
            mean,
            std: var.sqrt().max(1e-6),
        })
    }

    pub fn forward(&self, db: &[f64]) -> Vec<f64> {
        db.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.std + self.mean).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kld_weight: f64,
    pub anneal_epochs: usize,
    /// Derived from the run seed; not settable on its own.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 250,
            batch: 32,
            lr: 1e-3,
            kld_weight: 0.016,
            anneal_epochs: 100,
            seed: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1 && self.batch >= 2 && self.lr > 0.0 && self.kld_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad VAE training config {self:?}")))
        }
    }
}

pub struct RespVae {
    pub arch: CurveArch,
    pub grid: FrequencyGrid,
    pub norm: Normalizer,
    store: ParamStore,
    encoder: CurveEncoder,
    decoder: CurveDecoder,
}

impl RespVae {
    /// Freshly initialized model.
    pub fn new(arch: &CurveArch, grid: FrequencyGrid, norm: Normalizer, seed: u64) -> Result<Self> {
        if arch.n != grid.n {
            return Err(Error::Config(format!(
                "network expects {} samples but the grid has {}",
                arch.n, grid.n
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = CurveEncoder::new(&mut store, "enc.", arch, &mut rng)?;
        let decoder = CurveDecoder::new(&mut store, "dec.", arch, arch.latent, 1, &mut rng)?;
        Ok(RespVae {
            arch: arch.clone(),
            grid,
            norm,
            store,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &CurveEncoder {
        &self.encoder
    }

    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.decoder.param_ids()
    }

    /// Evaluation-mode context over this model's parameters, all frozen.
    pub fn frozen_ctx(&self) -> Ctx<'_> {
        let mut cx = Ctx::new(&self.store, Mode::Eval, 0);
        cx.freeze(self.store.ids());
        cx
    }

    /// Normalized curve `[B, n]` for latent codes `z: [B, latent]` on `cx`.
    pub fn decode_var(&self, cx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        self.decoder.forward_flat(cx, z)
    }

    fn check_curve(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.arch.n {
            return Err(Error::Invalid(format!(
                "curve has {} samples, model expects {}",
                c.len(),
                self.arch.n
            )));
        }
        Ok(())
    }

    /// Posterior `(mu, logvar)` for curves given in dB.
    pub fn encode(&self, curves_db: &[&[f64]]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let n = self.arch.n;
        let d = self.arch.latent;
        let mut out = Vec::with_capacity(curves_db.len());
        for chunk in curves_db.chunks(EVAL_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * n);
            for c in chunk {
                self.check_curve(c)?;
                data.extend(self.norm.forward(c));
            }
            let mut cx = self.frozen_ctx();
            let x = cx.input(&Tensor::new([chunk.len(), 1, n], data)?);
            let (mu, lv) = self.encoder.forward(&mut cx, x)?;
            let (mu, lv) = (cx.graph.value(mu), cx.graph.value(lv));
            for i in 0..chunk.len() {
                out.push((mu[i * d..(i + 1) * d].to_vec(), lv[i * d..(i + 1) * d].to_vec()));
            }
        }
        Ok(out)
    }

    pub fn encode_mean(&self, curves_db: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode(curves_db)?.into_iter().map(|(mu, _)| mu).collect())
    }

    /// Decoded curves in normalized units.
    pub fn decode_normalized(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.arch.n;
        let d = self.arch.latent;
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(EVAL_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for z in chunk {
                if z.len() != d || z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("latent code must be {d} finite values")));
                }
                data.extend_from_slice(z);
            }
            let mut cx = self.frozen_ctx();
            let z = cx.input(&Tensor::new([chunk.len(), d], data)?);
            let y = self.decode_var(&mut cx, z)?;
            out.extend(cx.graph.value(y).chunks(n).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Decoded curves in dB.
    pub fn decode(&self, zs: &[Vec<f64>]) -> Result<Vec<ResponseCurve>> {
        self.decode_normalized(zs)?
            .into_iter()
            .map(|y| ResponseCurve::new(self.norm.inverse(&y), self.grid))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.set_meta("kind", "response_vae");
        train::put_arch(&mut ck, &self.arch);
        train::put_grid(&mut ck, &self.grid);
        ck.set_meta("norm.mean", format!("{:?}", self.norm.mean));
        ck.set_meta("norm.std", format!("{:?}", self.norm.std));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        train::expect_kind(ck, "response_vae")?;
        let arch = train::get_arch(ck)?;
        let grid = train::get_grid(ck)?;
        let norm = Normalizer {
            mean: train::meta_parse(ck, "norm.mean")?,
            std: train::meta_parse(ck, "norm.std")?,
        };
        let mut vae = RespVae::new(&arch, grid, norm, 0)?;
        ck.load_store("", &mut vae.store)?;
        Ok(vae)
    }
}

/// Level defining a notch band: samples at or below it around a minimum.
pub const NOTCH_BAND_DB: f64 = -3.0;

/// Weights selecting the notch bands of a curve: every sample at or below
/// −3 dB (each such run surrounds a local minimum). A curve that never
/// reaches −3 dB is represented by its global minimum ±2 samples.
pub fn notch_band_mask(values: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = values
        .iter()
        .map(|&v| if v <= NOTCH_BAND_DB { 1.0 } else { 0.0 })
        .collect();
    if w.iter().all(|&x| x == 0.0) && !values.is_empty() {
        let m = values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a })
            .0;
        for x in &mut w[m.saturating_sub(2)..(m + 3).min(values.len())] {
            *x = 1.0;
        }
    }
    w
}

/// Pooled RMSE (dB) between reconstructions and originals over the notch
/// bands of the originals.
pub fn notch_band_rmse(originals: &[&[f64]], recon: &[&[f64]]) -> f64 {
    let (mut se, mut count) = (0.0, 0.0);
    for (y, r) in originals.iter().zip(recon) {
        for ((w, a), b) in notch_band_mask(y).iter().zip(y.iter()).zip(r.iter()) {
            se += w * (a - b) * (a - b);
            count += w;
        }
    }
    (se / count).sqrt()
}

/// Notch-band RMSE of `decode(mu(y))` against `y` over `records`.
pub fn reconstruction_rmse(vae: &RespVae, records: &[DatasetRecord]) -> Result<f64> {
    let ys: Vec<&[f64]> = records.iter().map(|r| r.curve.values.as_slice()).collect();
    let rec = vae.decode(&vae.encode_mean(&ys)?)?;
    let rs: Vec<&[f64]> = rec.iter().map(|c| c.values.as_slice()).collect();
    Ok(notch_band_rmse(&ys, &rs))
}

fn stack(records: &[DatasetRecord], idx: &[usize], norm: &Normalizer) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| norm.forward(&records[i].curve.values))
        .collect()
}

/// Validation losses with `z = mu`: (per-curve summed squared error, KLD).
fn validate(vae: &RespVae, val: &[DatasetRecord]) -> Result<(f64, f64)> {
    let n = vae.arch.n;
    let (mut se, mut kld) = (0.0, 0.0);
    for chunk in (0..val.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let target = stack(val, chunk, &vae.norm);
        let mut cx = vae.frozen_ctx();
        let x = cx.input(&Tensor::new([chunk.len(), 1, n], target.clone())?);
        let (mu, lv) = vae.encoder.forward(&mut cx, x)?;
        let y = vae.decode_var(&mut cx, mu)?;
        let recon = cx.graph.weighted_sq_err(y, &target, &vec![1.0; n], 1.0)?;
        let k = cx.graph.kld_gauss(mu, lv)?;
        se += cx.graph.value(recon)[0];
        kld += cx.graph.value(k)[0] * chunk.len() as f64;
    }
    Ok((se / val.len() as f64, kld / val.len() as f64))
}

/// Trains with the annealed β-VAE objective and returns the parameters of
/// the epoch with the lowest validation loss (reconstruction + full-weight
/// KLD, encoder mean as the latent).
pub fn train_vae(
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    arch: &CurveArch,
    cfg: &VaeTrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(RespVae, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be nonempty".into()));
    }
    let grid = train[0].curve.grid;
    let norm = Normalizer::fit(train)?;
    let mut vae = RespVae::new(arch, grid, norm, cfg.seed)?;
    let n = arch.n;
    let ids = vae.store.trainable_ids();
    let mut opt = Adam::new(&vae.store, &ids, cfg.lr);
    let ones = vec![1.0; n];
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let beta = train::annealed(cfg.kld_weight, epoch, cfg.anneal_epochs);
        let (mut sum_recon, mut sum_kld, mut seen) = (0.0, 0.0, 0usize);
        for (b, idx) in train::epoch_batches(train.len(), cfg.batch, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let bs = idx.len();
            let target = stack(train, &idx, &vae.norm);
            let step_seed = train::mix(train::mix(cfg.seed, epoch as u64), b as u64);
            let mut cx = Ctx::new(&vae.store, Mode::Train, step_seed);
            let x = cx.input(&Tensor::new([bs, 1, n], target.clone())?);
            let (mu, lv) = vae.encoder.forward(&mut cx, x)?;
            let z = cx.reparam(mu, lv)?;
            let y = vae.decode_var(&mut cx, z)?;
            let recon = cx.graph.weighted_sq_err(y, &target, &ones, 1.0 / bs as f64)?;
            let kld = cx.graph.kld_gauss(mu, lv)?;
            let weighted = cx.graph.scale(kld, beta);
            let loss = cx.graph.add(recon, weighted)?;
            let r = train::check_finite(epoch, "reconstruction loss", cx.graph.value(recon)[0])?;
            let k = train::check_finite(epoch, "KL divergence", cx.graph.value(kld)[0])?;
            debug_assert!(k >= -1e-9, "KL divergence must be non-negative, got {k}");
            sum_recon += r * bs as f64;
            sum_kld += k * bs as f64;
            seen += bs;
            let (graph, updates) = cx.finish();
            train::apply_step(&mut vae.store, &graph, loss, updates, &mut opt)?;
        }
        let (val_recon, val_kld) = validate(&vae, val)?;
        let val_total = train::check_finite(epoch, "validation loss", val_recon + cfg.kld_weight * val_kld)?;
        let log = EpochLog {
            epoch,
            values: vec![
                ("beta", beta),
                ("train_recon", sum_recon / seen.max(1) as f64),
                ("train_kld", sum_kld / seen.max(1) as f64),
                ("val_recon", val_recon),
                ("val_kld", val_kld),
                ("val_total", val_total),
                ("val_rmse_db", (val_recon / n as f64).sqrt() * vae.norm.std),
            ],
        };
        progress(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(v, _)| val_total < *v) {
            best = Some((val_total, vae.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        vae.store = store;
    }
    Ok((vae, history))
}
