//! Ranking candidate designs against a target curve, either with the
//! analytic oracle or with a learned mean/variance surrogate.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use diffcore::{Adam, Checkpoint, Ctx, Linear, Mode, Module, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::designcvae::DesignNormalizer;
use crate::emodel::{s11_curve, CavityConfig, DesignParams, FrequencyGrid, Substrate};
use crate::error::{Error, Result};
use crate::nets::{CurveArch, CurveDecoder};
use crate::respvae::Normalizer;
use crate::train::{self, EpochLog};

const EVAL_CHUNK: usize = 128;
/// Smallest predicted variance (normalized units).
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    Oracle,
    Surrogate,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::Oracle => "oracle",
            ScoreMethod::Surrogate => "surrogate",
        })
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ScoreMethod::Oracle),
            "surrogate" => Ok(ScoreMethod::Surrogate),
            _ => Err(Error::Invalid(format!(
                "unknown scorer `{s}` (expected oracle or surrogate)"
            ))),
        }
    }
}

/// A score; lower is better. Scores are comparable only for the same
/// method and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub method: ScoreMethod,
    pub feasible: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub cavity: CavityConfig,
    /// Adds `Σ max(0, t − y)²` over masked-out samples when set.
    pub out_of_band_hinge_db: Option<f64>,
}

/// Masked mean squared error (dB²) between the oracle curve of `design`
/// and `y_star`. Infeasible designs score `+∞` and are flagged.
pub fn oracle_score(
    design: &DesignParams,
    y_star: &[f64],
    mask: &[f64],
    sub: &Substrate,
    grid: &FrequencyGrid,
    cfg: &OracleConfig,
) -> Result<Score> {
    check_target(y_star, mask, grid.n)?;
    if !design.feasible() {
        return Ok(Score {
            value: f64::INFINITY,
            method: ScoreMethod::Oracle,
            feasible: false,
        });
    }
    let y = s11_curve(design, sub, &cfg.cavity, grid)?;
    let wsum: f64 = mask.iter().sum();
    let mut value = y
        .values
        .iter()
        .zip(y_star)
        .zip(mask)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum::<f64>()
        / wsum;
    if let Some(t) = cfg.out_of_band_hinge_db {
        value += y
            .values
            .iter()
            .zip(mask)
            .filter(|(_, &w)| w == 0.0)
            .map(|(&v, _)| (t - v).max(0.0).powi(2))
            .sum::<f64>();
    }
    Ok(Score {
        value,
        method: ScoreMethod::Oracle,
        feasible: true,
    })
}

fn check_target(y_star: &[f64], mask: &[f64], n: usize) -> Result<()> {
    if y_star.len() != n || mask.len() != n {
        return Err(Error::Invalid(format!(
            "target ({}) and mask ({}) must both have {n} samples",
            y_star.len(),
            mask.len()
        )));
    }
    if !(mask.iter().sum::<f64>() > 0.0) {
        return Err(Error::Invalid("mask selects no samples".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Exponent of the variance weighting in the β-NLL loss.
    pub beta: f64,
    /// Derived from the run seed; not settable on its own.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            epochs: 500,
            batch: 64,
            lr: 5e-3,
            beta: 0.5,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs >= 1 && self.batch >= 2 && self.lr > 0.0 && (0.0..=1.0).contains(&self.beta) {
            Ok(())
        } else {
            Err(Error::Config(format!("bad surrogate config {self:?}")))
        }
    }
}

/// Predicted curve with per-sample variance, both in dB units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Design → (mean curve, variance curve): a dense map into the curve
/// decoder with two output channels.
pub struct Surrogate {
    pub arch: CurveArch,
    pub grid: FrequencyGrid,
    pub curve_norm: Normalizer,
    pub design_norm: DesignNormalizer,
    store: ParamStore,
    input: Linear,
    decoder: CurveDecoder,
}

impl Surrogate {
    pub fn new(
        arch: &CurveArch,
        grid: FrequencyGrid,
        curve_norm: Normalizer,
        design_norm: DesignNormalizer,
        seed: u64,
    ) -> Result<Self> {
        if arch.n != grid.n {
            return Err(Error::Config("surrogate architecture and grid disagree".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Linear::new(&mut store, "sur.map", 3, arch.latent, &mut rng)?;
        let decoder = CurveDecoder::new(&mut store, "sur.dec.", arch, arch.latent, 2, &mut rng)?;
        Ok(Surrogate {
            arch: arch.clone(),
            grid,
            curve_norm,
            design_norm,
            store,
            input,
            decoder,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.param_ids();
        ids.extend(self.decoder.param_ids());
        ids
    }

    /// Normalized `(mean, variance)`, each `[B, n]`, from normalized designs.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let n = self.arch.n;
        let h = self.input.forward(cx, x)?;
        let y = self.decoder.forward_flat(cx, h)?;
        let mu = cx.graph.slice_last(y, 0, n)?;
        let lv = cx.graph.slice_last(y, n, n)?;
        Ok((mu, cx.graph.exp_floor(lv, VAR_FLOOR)))
    }

    fn design_tensor(&self, designs: &[DesignParams]) -> Result<Tensor> {
        Ok(Tensor::new(
            [designs.len(), 3],
            designs.iter().flat_map(|d| self.design_norm.forward(d)).collect(),
        )?)
    }

    /// Predictions in dB for any designs (feasible or not).
    pub fn predict(&self, designs: &[DesignParams]) -> Result<Vec<Prediction>> {
        let n = self.arch.n;
        let s2 = self.curve_norm.std * self.curve_norm.std;
        let mut out = Vec::with_capacity(designs.len());
        for chunk in designs.chunks(EVAL_CHUNK) {
            let mut cx = Ctx::new(&self.store, Mode::Eval, 0);
            cx.freeze(self.store.ids());
            let x = cx.input(&self.design_tensor(chunk)?);
            let (mu, var) = self.forward(&mut cx, x)?;
            for (m, v) in cx.graph.value(mu).chunks(n).zip(cx.graph.value(var).chunks(n)) {
                out.push(Prediction {
                    mean: self.curve_norm.inverse(m),
                    var: v.iter().map(|v| v * s2).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.set_meta("kind", "surrogate");
        train::put_arch(&mut ck, &self.arch);
        train::put_grid(&mut ck, &self.grid);
        ck.set_meta("norm.mean", format!("{:?}", self.curve_norm.mean));
        ck.set_meta("norm.std", format!("{:?}", self.curve_norm.std));
        for k in 0..3 {
            ck.set_meta(&format!("design.mean{k}"), format!("{:?}", self.design_norm.mean[k]));
            ck.set_meta(&format!("design.std{k}"), format!("{:?}", self.design_norm.std[k]));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        train::expect_kind(ck, "surrogate")?;
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
        let mut s = Surrogate::new(&train::get_arch(ck)?, train::get_grid(ck)?, curve_norm, design_norm, 0)?;
        ck.load_store("", &mut s.store)?;
        Ok(s)
    }
}

/// Precision-weighted masked squared error `mean_mask (μ − y*)² / σ²`.
pub fn precision_weighted_mse(pred: &Prediction, y_star: &[f64], mask: &[f64]) -> f64 {
    let (mut s, mut wsum) = (0.0, 0.0);
    for (((m, v), t), w) in pred.mean.iter().zip(&pred.var).zip(y_star).zip(mask) {
        s += w * (m - t) * (m - t) / v;
        wsum += w;
    }
    s / wsum
}

/// Surrogate scores for a batch of designs. Feasibility is reported but
/// does not change the value.
pub fn surrogate_scores(designs: &[DesignParams], y_star: &[f64], mask: &[f64], sur: &Surrogate) -> Result<Vec<Score>> {
    check_target(y_star, mask, sur.arch.n)?;
    Ok(sur
        .predict(designs)?
        .iter()
        .zip(designs)
        .map(|(p, d)| Score {
            value: precision_weighted_mse(p, y_star, mask),
            method: ScoreMethod::Surrogate,
            feasible: d.feasible(),
        })
        .collect())
}

pub fn surrogate_score(design: &DesignParams, y_star: &[f64], mask: &[f64], sur: &Surrogate) -> Result<Score> {
    Ok(surrogate_scores(&[*design], y_star, mask, sur)?[0])
}

/// Mean β-NLL (normalized units) of `sur` on `records`.
pub fn surrogate_nll(sur: &Surrogate, records: &[DatasetRecord], beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for chunk in records.chunks(EVAL_CHUNK) {
        let designs: Vec<DesignParams> = chunk.iter().map(|r| r.design).collect();
        let target: Vec<f64> = chunk
            .iter()
            .flat_map(|r| sur.curve_norm.forward(&r.curve.values))
            .collect();
        let mut cx = Ctx::new(&sur.store, Mode::Eval, 0);
        cx.freeze(sur.store.ids());
        let x = cx.input(&sur.design_tensor(&designs)?);
        let (mu, var) = sur.forward(&mut cx, x)?;
        let l = cx.graph.beta_nll(mu, var, &target, beta)?;
        total += cx.graph.value(l)[0] * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// Fraction of samples with `|y − μ| ≤ k·σ` over `records`.
pub fn coverage(sur: &Surrogate, records: &[DatasetRecord], k: f64) -> Result<f64> {
    let designs: Vec<DesignParams> = records.iter().map(|r| r.design).collect();
    let preds = sur.predict(&designs)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, r) in preds.iter().zip(records) {
        for ((m, v), y) in p.mean.iter().zip(&p.var).zip(&r.curve.values) {
            hit += usize::from((y - m).abs() <= k * v.sqrt());
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Trains with β-NLL in normalized curve space; returns the epoch with the
/// lowest validation loss.
pub fn train_surrogate(
    train_set: &[DatasetRecord],
    val: &[DatasetRecord],
    arch: &CurveArch,
    cfg: &SurrogateConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(Surrogate, Vec<EpochLog>)> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be nonempty".into()));
    }
    let grid = train_set[0].curve.grid;
    let mut sur = Surrogate::new(
        arch,
        grid,
        Normalizer::fit(train_set)?,
        DesignNormalizer::fit(train_set)?,
        cfg.seed,
    )?;
    let mut opt = Adam::new(&sur.store, &sur.param_ids(), cfg.lr);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum, mut seen) = (0.0, 0usize);
        for (b, idx) in train::epoch_batches(train_set.len(), cfg.batch, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let designs: Vec<DesignParams> = idx.iter().map(|&i| train_set[i].design).collect();
            let target: Vec<f64> = idx
                .iter()
                .flat_map(|&i| sur.curve_norm.forward(&train_set[i].curve.values))
                .collect();
            let mut cx = Ctx::new(
                &sur.store,
                Mode::Train,
                train::mix(train::mix(cfg.seed, epoch as u64), b as u64),
            );
            let x = cx.input(&sur.design_tensor(&designs)?);
            let (mu, var) = sur.forward(&mut cx, x)?;
            let loss = cx.graph.beta_nll(mu, var, &target, cfg.beta)?;
            sum += train::check_finite(epoch, "surrogate loss", cx.graph.value(loss)[0])? * idx.len() as f64;
            seen += idx.len();
            let (graph, updates) = cx.finish();
            train::apply_step(&mut sur.store, &graph, loss, updates, &mut opt)?;
        }
        let val_nll = train::check_finite(epoch, "surrogate validation loss", surrogate_nll(&sur, val, cfg.beta)?)?;
        let log = EpochLog {
            epoch,
            values: vec![("train_nll", sum / seen.max(1) as f64), ("val_nll", val_nll)],
        };
        progress(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(v, _)| val_nll < *v) {
            best = Some((val_nll, sur.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        sur.store = store;
    }
    Ok((sur, history))
}

/// Ranks with ties sharing their average rank (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// One ranked candidate with everything needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub design: DesignParams,
    /// Index of the response curve within the pool and its initial seed.
    pub curve_index: usize,
    pub curve_seed: u64,
    pub design_index: usize,
    pub design_seed: u64,
    pub z_y: Vec<f64>,
    pub z_x: Vec<f64>,
    /// Feed offset moved off the `p = 0` boundary before scoring.
    pub nudged: bool,
    pub penalty_optimized: bool,
    pub score: Score,
}

pub fn write_scores<W: Write>(mut w: W, ranked: &[ScoredCandidate], config_hash: &str) -> Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "rank,L_mm,W_mm,p_mm,score,method,feasible")?;
    for (i, c) in ranked.iter().enumerate() {
        writeln!(
            w,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{},{}",
            i + 1,
            c.design.l,
            c.design.w,
            c.design.p,
            c.score.value,
            c.score.method,
            c.score.feasible
        )?;
    }
    Ok(())
}

pub fn save_scores(path: &Path, ranked: &[ScoredCandidate], config_hash: &str) -> Result<()> {
    write_scores(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        ranked,
        config_hash,
    )
}
