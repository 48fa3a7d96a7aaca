//! Stage 2: conditional VAE mapping (z_x, curve) to designs, with an
//! adversarial predictor that discourages z_x from carrying curve
//! information.

use diffcore::{Activation, Adam, Checkpoint, Ctx, Linear, Mode, Module, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::emodel::DesignParams;
use crate::error::{Error, Result};
use crate::nets::{CurveArch, CurveDecoder, CurveEncoder, Mlp};
use crate::respvae::{Normalizer, RespVae};
use crate::train::{self, EpochLog};

const EVAL_CHUNK: usize = 128;
const LEAKY_SLOPE: f64 = 0.2;

/// Per-component affine normalization of (L, W, p).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignNormalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DesignNormalizer {
    pub fn fit(records: &[DatasetRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("cannot fit design normalization on an empty set".into()));
        }
        let n = records.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for r in records {
            for (k, v) in r.design.to_array().into_iter().enumerate() {
                mean[k] += v / n;
            }
        }
        for r in records {
            for (k, v) in r.design.to_array().into_iter().enumerate() {
                std[k] += (v - mean[k]) * (v - mean[k]) / n;
            }
        }
        Ok(DesignNormalizer {
            mean,
            std: std.map(|v| v.sqrt().max(1e-6)),
        })
    }

    pub fn forward(&self, d: &DesignParams) -> [f64; 3] {
        let x = d.to_array();
        [0, 1, 2].map(|k| (x[k] - self.mean[k]) / self.std[k])
    }

    pub fn inverse(&self, x: &[f64]) -> DesignParams {
        DesignParams::new(
            x[0] * self.std[0] + self.mean[0],
            x[1] * self.std[1] + self.mean[1],
            x[2] * self.std[2] + self.mean[2],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kld_weight: f64,
    pub anneal_epochs: usize,
    /// Weight of the adversarial term in the encoder/decoder objective.
    pub eta: f64,
    /// Predictor updates per encoder/decoder update.
    pub predictor_steps: usize,
    pub latent: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    /// Keep the curve embedder at its stage-1 weights.
    pub freeze_embedder: bool,
    /// Condition the encoder on the curve embedding as well as the design.
    pub encoder_uses_curve: bool,
    /// Derived from the run seed; not settable on its own.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            epochs: 300,
            batch: 32,
            lr: 1e-3,
            kld_weight: 0.016,
            anneal_epochs: 50,
            eta: 0.1,
            predictor_steps: 1,
            latent: 16,
            encoder_hidden: 64,
            decoder_hidden: vec![128, 128, 128, 64],
            freeze_embedder: false,
            encoder_uses_curve: false,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.batch >= 2
            && self.lr > 0.0
            && self.kld_weight > 0.0
            && self.eta >= 0.0
            && self.latent > 0
            && self.encoder_hidden > 0
            && !self.decoder_hidden.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad CVAE config {self:?}")))
        }
    }
}

/// Predictor from z_x to a normalized curve: a dense map into the stage-1
/// decoder architecture.
pub struct CurvePredictor {
    input: Linear,
    decoder: CurveDecoder,
}

impl CurvePredictor {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        arch: &CurveArch,
        latent_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(CurvePredictor {
            input: Linear::new(ps, &format!("{prefix}map"), latent_in, arch.latent, rng)?,
            decoder: CurveDecoder::new(ps, &format!("{prefix}dec."), arch, arch.latent, 1, rng)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        let h = self.input.forward(cx, z)?;
        self.decoder.forward_flat(cx, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.param_ids();
        ids.extend(self.decoder.param_ids());
        ids
    }
}

pub struct DesignCvae {
    pub cfg: CvaeConfig,
    pub arch: CurveArch,
    pub curve_norm: Normalizer,
    pub design_norm: DesignNormalizer,
    store: ParamStore,
    encoder: Mlp,
    embedder: CurveEncoder,
    decoder: Mlp,
    predictor: CurvePredictor,
}

impl DesignCvae {
    pub fn new(
        cfg: &CvaeConfig,
        arch: &CurveArch,
        curve_norm: Normalizer,
        design_norm: DesignNormalizer,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_in = 3 + if cfg.encoder_uses_curve { arch.latent } else { 0 };
        let encoder = Mlp::new(
            &mut store,
            "xenc.",
            &[enc_in, cfg.encoder_hidden, 2 * cfg.latent],
            Activation::LeakyRelu(LEAKY_SLOPE),
            &mut rng,
        )?;
        let embedder = CurveEncoder::new(&mut store, "emb.", arch, &mut rng)?;
        let mut dims = vec![cfg.latent + arch.latent];
        dims.extend(&cfg.decoder_hidden);
        dims.push(3);
        let decoder = Mlp::new(&mut store, "xdec.", &dims, Activation::Gelu, &mut rng)?;
        let predictor = CurvePredictor::new(&mut store, "pred.", arch, cfg.latent, &mut rng)?;
        Ok(DesignCvae {
            cfg: cfg.clone(),
            arch: arch.clone(),
            curve_norm,
            design_norm,
            store,
            encoder,
            embedder,
            decoder,
            predictor,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn predictor_param_ids(&self) -> Vec<ParamId> {
        self.predictor.param_ids()
    }

    /// Encoder, embedder and decoder parameters (everything the generator
    /// step updates). The embedding is the embedder's mean, so its
    /// log-variance head is never trained here.
    pub fn generator_param_ids(&self, include_embedder: bool) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.decoder.param_ids());
        if include_embedder {
            ids.extend(self.embedder.mean_param_ids());
        }
        ids
    }

    pub fn frozen_ctx(&self) -> Ctx<'_> {
        let mut cx = Ctx::new(&self.store, Mode::Eval, 0);
        cx.freeze(self.store.ids());
        cx
    }

    /// Curve embedding `[B, latent_y]` from normalized curves `[B, n]`.
    pub fn embed_var(&self, cx: &mut Ctx<'_>, y: Var) -> Result<Var> {
        let h = self.embedder.features(cx, y)?;
        Ok(self.embedder.mu.forward(cx, h)?)
    }

    /// Posterior `(mu, logvar)` of z_x from normalized designs `[B, 3]`.
    pub fn encode_var(&self, cx: &mut Ctx<'_>, x: Var, emb: Option<Var>) -> Result<(Var, Var)> {
        let input = match (self.cfg.encoder_uses_curve, emb) {
            (true, Some(e)) => cx.graph.concat_last(x, e)?,
            (true, None) => return Err(Error::Invalid("encoder needs the curve embedding".into())),
            (false, _) => x,
        };
        let h = self.encoder.forward(cx, input)?;
        let l = self.cfg.latent;
        Ok((cx.graph.slice_last(h, 0, l)?, cx.graph.slice_last(h, l, l)?))
    }

    /// Normalized design `[B, 3]` from `z: [B, latent]` and an embedding.
    pub fn decode_var(&self, cx: &mut Ctx<'_>, z: Var, emb: Var) -> Result<Var> {
        let h = cx.graph.concat_last(z, emb)?;
        self.decoder.forward(cx, h)
    }

    /// Design `[B, 3]` in millimetres (affine denormalization on the tape).
    pub fn decode_design_var(&self, cx: &mut Ctx<'_>, z: Var, emb: Var) -> Result<Var> {
        let xn = self.decode_var(cx, z, emb)?;
        let b = cx.graph.shape(xn)[0];
        let scale: Vec<f64> = (0..b).flat_map(|_| self.design_norm.std).collect();
        let shift: Vec<f64> = (0..b).flat_map(|_| self.design_norm.mean).collect();
        let s = cx.input(&Tensor::new([b, 3], scale)?);
        let scaled = cx.graph.mul(xn, s)?;
        Ok(cx.graph.add_const(scaled, &shift)?)
    }

    pub fn predict_var(&self, cx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        self.predictor.forward(cx, z)
    }

    /// Embeddings of curves given in dB.
    pub fn embed(&self, curves_db: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let n = self.arch.n;
        let mut out = Vec::with_capacity(curves_db.len());
        for chunk in curves_db.chunks(EVAL_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * n);
            for c in chunk {
                if c.len() != n {
                    return Err(Error::Invalid(format!("curve has {} samples, expected {n}", c.len())));
                }
                data.extend(self.curve_norm.forward(c));
            }
            let mut cx = self.frozen_ctx();
            let y = cx.input(&Tensor::new([chunk.len(), n], data)?);
            let e = self.embed_var(&mut cx, y)?;
            out.extend(cx.graph.value(e).chunks(self.arch.latent).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Posterior means of z_x for designs (and their curves, used only when
    /// the encoder is curve-conditioned).
    pub fn encode_mean(&self, records: &[DatasetRecord]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode_posterior(records)?.into_iter().map(|(mu, _)| mu).collect())
    }

    /// Posterior `(mu, logvar)` of z_x for each record.
    pub fn encode_posterior(&self, records: &[DatasetRecord]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_CHUNK) {
            let mut cx = self.frozen_ctx();
            let xs: Vec<f64> = chunk.iter().flat_map(|r| self.design_norm.forward(&r.design)).collect();
            let x = cx.input(&Tensor::new([chunk.len(), 3], xs)?);
            let emb = if self.cfg.encoder_uses_curve {
                let ys: Vec<f64> = chunk
                    .iter()
                    .flat_map(|r| self.curve_norm.forward(&r.curve.values))
                    .collect();
                let y = cx.input(&Tensor::new([chunk.len(), self.arch.n], ys)?);
                Some(self.embed_var(&mut cx, y)?)
            } else {
                None
            };
            let (mu, lv) = self.encode_var(&mut cx, x, emb)?;
            let l = self.cfg.latent;
            out.extend(
                cx.graph
                    .value(mu)
                    .chunks(l)
                    .zip(cx.graph.value(lv).chunks(l))
                    .map(|(m, v)| (m.to_vec(), v.to_vec())),
            );
        }
        Ok(out)
    }

    /// Designs for latent codes paired with precomputed embeddings.
    pub fn decode_with_embeddings(&self, zs: &[Vec<f64>], embs: &[Vec<f64>]) -> Result<Vec<DesignParams>> {
        if zs.len() != embs.len() {
            return Err(Error::Invalid("one embedding per latent code is required".into()));
        }
        let mut out = Vec::with_capacity(zs.len());
        for (zc, ec) in zs.chunks(EVAL_CHUNK).zip(embs.chunks(EVAL_CHUNK)) {
            if zc
                .iter()
                .any(|z| z.len() != self.cfg.latent || z.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Invalid(format!(
                    "latent codes must be {} finite values",
                    self.cfg.latent
                )));
            }
            let mut cx = self.frozen_ctx();
            let z = cx.input(&Tensor::new([zc.len(), self.cfg.latent], zc.concat())?);
            let e = cx.input(&Tensor::new([ec.len(), self.arch.latent], ec.concat())?);
            let xn = self.decode_var(&mut cx, z, e)?;
            out.extend(cx.graph.value(xn).chunks(3).map(|x| self.design_norm.inverse(x)));
        }
        Ok(out)
    }

    /// Design for `z` conditioned on a curve in dB.
    pub fn decode(&self, z: &[f64], curve_db: &[f64]) -> Result<DesignParams> {
        let emb = self.embed(&[curve_db])?;
        Ok(self.decode_with_embeddings(&[z.to_vec()], &emb)?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.set_meta("kind", "design_cvae");
        train::put_arch(&mut ck, &self.arch);
        ck.set_meta("norm.mean", format!("{:?}", self.curve_norm.mean));
        ck.set_meta("norm.std", format!("{:?}", self.curve_norm.std));
        for k in 0..3 {
            ck.set_meta(&format!("design.mean{k}"), format!("{:?}", self.design_norm.mean[k]));
            ck.set_meta(&format!("design.std{k}"), format!("{:?}", self.design_norm.std[k]));
        }
        ck.set_meta("cvae.latent", self.cfg.latent);
        ck.set_meta("cvae.encoder_hidden", self.cfg.encoder_hidden);
        ck.set_meta(
            "cvae.decoder_hidden",
            self.cfg
                .decoder_hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        ck.set_meta("cvae.encoder_uses_curve", self.cfg.encoder_uses_curve);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        train::expect_kind(ck, "design_cvae")?;
        let arch = train::get_arch(ck)?;
        let curve_norm = Normalizer {
            mean: train::meta_parse(ck, "norm.mean")?,
            std: train::meta_parse(ck, "norm.std")?,
        };
        let mut design_norm = DesignNormalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        for k in 0..3 {
            design_norm.mean[k] = train::meta_parse(ck, &format!("design.mean{k}"))?;
            design_norm.std[k] = train::meta_parse(ck, &format!("design.std{k}"))?;
        }
        let decoder_hidden = train::meta_str(ck, "cvae.decoder_hidden")?
            .split(',')
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Config("bad decoder widths in checkpoint".into()))
            })
            .collect::<Result<Vec<usize>>>()?;
        let cfg = CvaeConfig {
            latent: train::meta_parse(ck, "cvae.latent")?,
            encoder_hidden: train::meta_parse(ck, "cvae.encoder_hidden")?,
            decoder_hidden,
            encoder_uses_curve: train::meta_parse(ck, "cvae.encoder_uses_curve")?,
            ..CvaeConfig::default()
        };
        let mut m = DesignCvae::new(&cfg, &arch, curve_norm, design_norm, 0)?;
        ck.load_store("", &mut m.store)?;
        Ok(m)
    }
}

/// Normalized designs and curves of a minibatch.
fn batch_tensors(m: &DesignCvae, recs: &[DatasetRecord], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let xs = idx
        .iter()
        .flat_map(|&i| m.design_norm.forward(&recs[i].design))
        .collect();
    let ys = idx
        .iter()
        .flat_map(|&i| m.curve_norm.forward(&recs[i].curve.values))
        .collect();
    (xs, ys)
}

/// Losses of one forward pass.
struct GenLosses {
    total: Var,
    recon: Var,
    kld: Var,
    pred: Option<Var>,
}

/// Generator objective `recon + β·KLD − η·L_pred` on `cx`; the predictor
/// must already be frozen on `cx` when `eta > 0`.
fn generator_losses(
    m: &DesignCvae,
    cx: &mut Ctx<'_>,
    xs: &[f64],
    ys: &[f64],
    bs: usize,
    beta: f64,
    sample: bool,
) -> Result<GenLosses> {
    let n = m.arch.n;
    let x = cx.input(&Tensor::new([bs, 3], xs.to_vec())?);
    let y = cx.input(&Tensor::new([bs, n], ys.to_vec())?);
    let emb = m.embed_var(cx, y)?;
    let (mu, lv) = m.encode_var(cx, x, Some(emb))?;
    let z = if sample { cx.reparam(mu, lv)? } else { mu };
    let xhat = m.decode_var(cx, z, emb)?;
    let recon = cx.graph.weighted_sq_err(xhat, xs, &[1.0; 3], 1.0 / bs as f64)?;
    let kld = cx.graph.kld_gauss(mu, lv)?;
    let bk = cx.graph.scale(kld, beta);
    let mut total = cx.graph.add(recon, bk)?;
    let mut pred = None;
    if m.cfg.eta > 0.0 {
        let yhat = m.predict_var(cx, mu)?;
        let lp = cx
            .graph
            .weighted_sq_err(yhat, ys, &vec![1.0; n], 1.0 / (bs * n) as f64)?;
        let adv = cx.graph.scale(lp, -m.cfg.eta);
        total = cx.graph.add(total, adv)?;
        pred = Some(lp);
    }
    Ok(GenLosses {
        total,
        recon,
        kld,
        pred,
    })
}

/// Predictor objective: mean squared error from detached z_x means.
fn predictor_loss(m: &DesignCvae, cx: &mut Ctx<'_>, xs: &[f64], ys: &[f64], bs: usize) -> Result<Var> {
    let n = m.arch.n;
    let x = cx.input(&Tensor::new([bs, 3], xs.to_vec())?);
    let emb = if m.cfg.encoder_uses_curve {
        let y = cx.input(&Tensor::new([bs, n], ys.to_vec())?);
        Some(m.embed_var(cx, y)?)
    } else {
        None
    };
    let (mu, _) = m.encode_var(cx, x, emb)?;
    let yhat = m.predict_var(cx, mu)?;
    Ok(cx
        .graph
        .weighted_sq_err(yhat, ys, &vec![1.0; n], 1.0 / (bs * n) as f64)?)
}

/// One predictor update with everything but the predictor frozen.
pub fn predictor_step(m: &mut DesignCvae, opt: &mut Adam, xs: &[f64], ys: &[f64], bs: usize, seed: u64) -> Result<f64> {
    let mut cx = Ctx::new(&m.store, Mode::Train, seed);
    cx.freeze(m.generator_param_ids(true));
    let loss = predictor_loss(m, &mut cx, xs, ys, bs)?;
    let v = cx.graph.value(loss)[0];
    let (graph, updates) = cx.finish();
    train::apply_step(&mut m.store, &graph, loss, updates, opt)?;
    Ok(v)
}

/// Gradient of `L_pred` with respect to the encoder parameters as seen by
/// the predictor step and by the generator step (`η = 1`), for auditing the
/// sign convention.
pub fn adversarial_encoder_grads(m: &DesignCvae, xs: &[f64], ys: &[f64], bs: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let enc_ids = m.encoder.param_ids();
    let collect = |store: &ParamStore| -> Vec<f64> {
        enc_ids
            .iter()
            .flat_map(|&id| store.get(id).grad().unwrap_or(&[]).to_vec())
            .collect()
    };
    // Predictor objective, differentiated with respect to the encoder.
    let mut s1 = m.store.clone();
    s1.zero_grads();
    {
        let mut cx = Ctx::new(&m.store, Mode::Eval, 0);
        cx.freeze(m.predictor.param_ids());
        let loss = predictor_loss(m, &mut cx, xs, ys, bs)?;
        let (graph, _) = cx.finish();
        diffcore::accumulate_grads(&graph, loss, &mut s1)?;
    }
    // Adversarial component of the generator objective: −η·L_pred.
    let mut s2 = m.store.clone();
    s2.zero_grads();
    {
        let mut cx = Ctx::new(&m.store, Mode::Eval, 0);
        cx.freeze(m.predictor.param_ids());
        let lp = predictor_loss(m, &mut cx, xs, ys, bs)?;
        let adv = cx.graph.scale(lp, -1.0);
        let (graph, _) = cx.finish();
        diffcore::accumulate_grads(&graph, adv, &mut s2)?;
    }
    Ok((collect(&s1), collect(&s2)))
}

/// Alternating adversarial training. The stage-1 encoder initializes the
/// curve embedder. Returns the epoch with the lowest validation design
/// reconstruction loss.
pub fn train_cvae(
    train_set: &[DatasetRecord],
    val: &[DatasetRecord],
    stage1: &RespVae,
    cfg: &CvaeConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(DesignCvae, Vec<EpochLog>)> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be nonempty".into()));
    }
    let design_norm = DesignNormalizer::fit(train_set)?;
    let mut m = DesignCvae::new(cfg, &stage1.arch, stage1.norm, design_norm, cfg.seed)?;
    let copied = m.store.copy_matching_from(stage1.store(), "enc.", "emb.")?;
    if copied == 0 {
        return Err(Error::Config(
            "stage-1 encoder weights did not match the embedder".into(),
        ));
    }
    let gen_ids = m.generator_param_ids(!cfg.freeze_embedder);
    let mut gen_opt = Adam::new(&m.store, &gen_ids, cfg.lr);
    let mut pred_opt = Adam::new(&m.store, &m.predictor.param_ids(), cfg.lr);
    let mut frozen = m.predictor.param_ids();
    if cfg.freeze_embedder {
        frozen.extend(m.embedder.param_ids());
    }
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let beta = train::annealed(cfg.kld_weight, epoch, cfg.anneal_epochs);
        let (mut s_recon, mut s_kld, mut s_pred, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in train::epoch_batches(train_set.len(), cfg.batch, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let bs = idx.len();
            let (xs, ys) = batch_tensors(&m, train_set, &idx);
            let step_seed = train::mix(train::mix(cfg.seed, epoch as u64), b as u64);
            if cfg.eta > 0.0 {
                for k in 0..cfg.predictor_steps {
                    let lp = predictor_step(
                        &mut m,
                        &mut pred_opt,
                        &xs,
                        &ys,
                        bs,
                        train::mix(step_seed, 1000 + k as u64),
                    )?;
                    s_pred += train::check_finite(epoch, "predictor loss", lp)? * bs as f64;
                }
            }
            let mut cx = Ctx::new(&m.store, Mode::Train, step_seed);
            cx.freeze(frozen.iter().copied());
            let l = generator_losses(&m, &mut cx, &xs, &ys, bs, beta, true)?;
            s_recon +=
                train::check_finite(epoch, "design reconstruction loss", cx.graph.value(l.recon)[0])? * bs as f64;
            s_kld += train::check_finite(epoch, "KL divergence", cx.graph.value(l.kld)[0])? * bs as f64;
            train::check_finite(epoch, "generator loss", cx.graph.value(l.total)[0])?;
            seen += bs;
            let (graph, updates) = cx.finish();
            train::apply_step(&mut m.store, &graph, l.total, updates, &mut gen_opt)?;
        }
        let (val_recon, val_pred) = validate(&m, val)?;
        let val_recon = train::check_finite(epoch, "validation loss", val_recon)?;
        let seen = seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            values: vec![
                ("beta", beta),
                ("train_recon", s_recon / seen),
                ("train_kld", s_kld / seen),
                ("train_pred", s_pred / seen / cfg.predictor_steps.max(1) as f64),
                ("val_recon", val_recon),
                ("val_pred", val_pred),
            ],
        };
        progress(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(v, _)| val_recon < *v) {
            best = Some((val_recon, m.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        m.store = store;
    }
    Ok((m, history))
}

/// Validation design reconstruction (z = mu) and predictor loss.
fn validate(m: &DesignCvae, val: &[DatasetRecord]) -> Result<(f64, f64)> {
    let (mut recon, mut pred) = (0.0, 0.0);
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (xs, ys) = batch_tensors(m, val, chunk);
        let mut cx = m.frozen_ctx();
        let l = generator_losses(m, &mut cx, &xs, &ys, chunk.len(), 0.0, false)?;
        recon += cx.graph.value(l.recon)[0] * chunk.len() as f64;
        if let Some(p) = l.pred {
            pred += cx.graph.value(p)[0] * chunk.len() as f64;
        }
    }
    Ok((recon / val.len() as f64, pred / val.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Derived from the run seed; not settable on its own.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            epochs: 60,
            batch: 32,
            lr: 1e-3,
            seed: 17,
        }
    }
}

/// Trains a fresh predictor from frozen z_x means to curves on `train_set`
/// and returns its best validation MSE divided by the MSE of predicting
/// the training mean curve (normalized units). Values near 1 mean z_x
/// carries little curve information.
pub fn disentanglement_audit(
    m: &DesignCvae,
    train_set: &[DatasetRecord],
    val: &[DatasetRecord],
    cfg: &AuditConfig,
) -> Result<f64> {
    let zt = m.encode_mean(train_set)?;
    let zv = m.encode_mean(val)?;
    let yt: Vec<Vec<f64>> = train_set
        .iter()
        .map(|r| m.curve_norm.forward(&r.curve.values))
        .collect();
    let yv: Vec<Vec<f64>> = val.iter().map(|r| m.curve_norm.forward(&r.curve.values)).collect();
    audit_ratio(&zt, &yt, &zv, &yv, &m.arch, cfg)
}

/// Core of [`disentanglement_audit`] on explicit codes and normalized curves.
pub fn audit_ratio(
    zt: &[Vec<f64>],
    yt: &[Vec<f64>],
    zv: &[Vec<f64>],
    yv: &[Vec<f64>],
    arch: &CurveArch,
    cfg: &AuditConfig,
) -> Result<f64> {
    if zt.len() < 2 || zv.is_empty() {
        return Err(Error::Invalid(
            "audit needs at least two training and one validation pair".into(),
        ));
    }
    let n = arch.n;
    let d = zt[0].len();
    let mean_curve: Vec<f64> = (0..n)
        .map(|j| yt.iter().map(|y| y[j]).sum::<f64>() / yt.len() as f64)
        .collect();
    let baseline = yv
        .iter()
        .map(|y| y.iter().zip(&mean_curve).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (yv.len() * n) as f64;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pred = CurvePredictor::new(&mut store, "audit.", arch, d, &mut rng)?;
    let mut opt = Adam::new(&store, &pred.param_ids(), cfg.lr);
    let ones = vec![1.0; n];
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut se = 0.0;
        for (zc, yc) in zv.chunks(EVAL_CHUNK).zip(yv.chunks(EVAL_CHUNK)) {
            let mut cx = Ctx::new(store, Mode::Eval, 0);
            let z = cx.input(&Tensor::new([zc.len(), d], zc.concat())?);
            let y = pred.forward(&mut cx, z)?;
            let l = cx.graph.weighted_sq_err(y, &yc.concat(), &ones, 1.0)?;
            se += cx.graph.value(l)[0];
        }
        Ok(se / (zv.len() * n) as f64)
    };
    let mut best = eval(&store)?;
    for epoch in 0..cfg.epochs {
        for (b, idx) in train::epoch_batches(zt.len(), cfg.batch, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let bs = idx.len();
            let zs: Vec<f64> = idx.iter().flat_map(|&i| zt[i].iter().copied()).collect();
            let ys: Vec<f64> = idx.iter().flat_map(|&i| yt[i].iter().copied()).collect();
            let mut cx = Ctx::new(
                &store,
                Mode::Train,
                train::mix(train::mix(cfg.seed, epoch as u64), b as u64),
            );
            let z = cx.input(&Tensor::new([bs, d], zs)?);
            let y = pred.forward(&mut cx, z)?;
            let loss = cx.graph.weighted_sq_err(y, &ys, &ones, 1.0 / (bs * n) as f64)?;
            train::check_finite(epoch, "audit predictor loss", cx.graph.value(loss)[0])?;
            let (graph, updates) = cx.finish();
            train::apply_step(&mut store, &graph, loss, updates, &mut opt)?;
        }
        best = best.min(eval(&store)?);
    }
    Ok(best / baseline)
}
