//! Idealized Lorentzian targets, frequency masks and masked gradient search
//! over the stage-1 latent space.

use std::fmt;
use std::str::FromStr;

use diffcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::emodel::{gamma_to_db, FrequencyGrid, ResponseCurve};
use crate::error::{Error, Result};
use crate::respvae::RespVae;

/// One Lorentzian notch: centre (GHz), bandwidth (GHz), depth (dB, < 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notch {
    pub f: f64,
    pub bw: f64,
    pub depth_db: f64,
}

impl FromStr for Notch {
    type Err = Error;

    /// `f_ghz:bw_ghz:depth_db`, e.g. `2.4:0.2:-15`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidSpec(format!("notch `{s}` must be f_ghz:bw_ghz:depth_db")));
        }
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidSpec(format!("notch `{s}`: `{t}` is not a number")))
        };
        Ok(Notch {
            f: num(parts[0])?,
            bw: num(parts[1])?,
            depth_db: num(parts[2])?,
        })
    }
}

impl fmt::Display for Notch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.f, self.bw, self.depth_db)
    }
}

/// A set of notches describing the desired response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub notches: Vec<Notch>,
}

impl TargetSpec {
    pub fn new(notches: Vec<Notch>) -> Self {
        TargetSpec { notches }
    }

    pub fn validate(&self, grid: &FrequencyGrid) -> Result<()> {
        if self.notches.is_empty() {
            return Err(Error::InvalidSpec("at least one notch is required".into()));
        }
        for n in &self.notches {
            if !n.f.is_finite() || !grid.contains(n.f) {
                return Err(Error::InvalidSpec(format!(
                    "notch at {} GHz is outside the grid [{}, {}] GHz",
                    n.f, grid.f_min, grid.f_max
                )));
            }
            if !(n.bw > 0.0 && n.bw.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "notch bandwidth must be positive, got {}",
                    n.bw
                )));
            }
            if !(n.depth_db < 0.0 && n.depth_db.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "notch depth must be negative, got {}",
                    n.depth_db
                )));
            }
        }
        Ok(())
    }
}

/// Lorentzian line shape `(BW/2)² / ((f − f_k)² + (BW/2)²)`.
pub fn lorentzian(n: &Notch, f: f64) -> f64 {
    let hw = n.bw / 2.0;
    hw * hw / ((f - n.f) * (f - n.f) + hw * hw)
}

/// Linear |S11| of the product of notches at `f`.
pub fn target_linear(spec: &TargetSpec, f: f64) -> f64 {
    spec.notches
        .iter()
        .map(|n| 1.0 - (1.0 - 10f64.powf(n.depth_db / 20.0)) * lorentzian(n, f))
        .product()
}

/// Idealized target in dB on `grid`.
pub fn lorentzian_target(spec: &TargetSpec, grid: &FrequencyGrid) -> Result<ResponseCurve> {
    grid.validate()?;
    spec.validate(grid)?;
    let values = (0..grid.n)
        .map(|i| gamma_to_db(target_linear(spec, grid.freq(i))))
        .collect();
    ResponseCurve::new(values, *grid)
}

/// Binary weights: 1 within `band_factor · BW_k` of any notch centre.
pub fn build_mask(spec: &TargetSpec, grid: &FrequencyGrid, band_factor: f64) -> Result<Vec<f64>> {
    if !(band_factor > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "band factor must be positive, got {band_factor}"
        )));
    }
    let w: Vec<f64> = (0..grid.n)
        .map(|i| {
            let f = grid.freq(i);
            let inside = spec.notches.iter().any(|n| (f - n.f).abs() <= band_factor * n.bw);
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidSpec("mask selects no grid frequency".into()));
    }
    Ok(w)
}

/// `Σ w (a − b)²`.
pub fn masked_sq_dist(a: &[f64], b: &[f64], mask: &[f64]) -> f64 {
    a.iter().zip(b).zip(mask).map(|((x, y), w)| w * (x - y) * (x - y)).sum()
}

/// `Σ w (a − b)² / Σ w`.
pub fn masked_mse(a: &[f64], b: &[f64], mask: &[f64]) -> f64 {
    masked_sq_dist(a, b, mask) / mask.iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    Random,
    KClosest,
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::Random => "random",
            InitStrategy::KClosest => "k-closest",
        })
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitStrategy::Random),
            "k-closest" | "kclosest" => Ok(InitStrategy::KClosest),
            _ => Err(Error::Config(format!(
                "unknown init strategy `{s}` (random | k-closest)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub step: f64,
    pub iterations: usize,
    pub reg: f64,
    /// Half-width of each masked band in units of the notch bandwidth.
    pub band_factor: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            step: 0.05,
            iterations: 200,
            reg: 1e-3,
            band_factor: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step > 0.0 && self.iterations >= 1 && self.reg >= 0.0 && self.band_factor > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("bad search config {self:?}")))
        }
    }
}

/// Standard-normal latent draw from a dedicated seed.
pub fn random_latent(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Dataset indices sorted by masked squared distance to `y_star` (ties by
/// index), with their distances.
pub fn closest_records(y_star: &[f64], mask: &[f64], dataset: &[DatasetRecord], k: usize) -> Result<Vec<(usize, f64)>> {
    if k > dataset.len() {
        return Err(Error::Invalid(format!(
            "requested {k} closest curves from a dataset of {}",
            dataset.len()
        )));
    }
    let mut d: Vec<(usize, f64)> = dataset
        .iter()
        .enumerate()
        .map(|(i, r)| (i, masked_sq_dist(&r.curve.values, y_star, mask)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1));
    d.truncate(k);
    Ok(d)
}

/// Initial latent codes. Random draws use seeds `seeds[i]` so that longer
/// lists extend shorter ones; k-closest returns encoder means of the `k`
/// nearest dataset curves in ascending distance.
pub fn init_latents(
    strategy: InitStrategy,
    k: usize,
    y_star: &[f64],
    mask: &[f64],
    dataset: &[DatasetRecord],
    vae: &RespVae,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Invalid("need at least one initial latent".into()));
    }
    match strategy {
        InitStrategy::Random => {
            if seeds.len() < k {
                return Err(Error::Invalid("one seed per random latent is required".into()));
            }
            Ok(seeds[..k].iter().map(|&s| random_latent(vae.latent_dim(), s)).collect())
        }
        InitStrategy::KClosest => {
            if dataset.is_empty() {
                return Err(Error::Invalid("k-closest initialization needs a dataset".into()));
            }
            let nearest = closest_records(y_star, mask, dataset, k)?;
            let curves: Vec<&[f64]> = nearest
                .iter()
                .map(|&(i, _)| dataset[i].curve.values.as_slice())
                .collect();
            vae.encode_mean(&curves)
        }
    }
}

/// Outcome of one latent search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub z: Vec<f64>,
    /// Decoded curve at `z`, in dB.
    pub curve: ResponseCurve,
    /// Masked squared error (normalized units) at `z`.
    pub masked_loss: f64,
    /// Full objective at `z`.
    pub objective: f64,
    /// Iteration at which `z` was reached (0 = initial point).
    pub iteration: usize,
}

/// One code's evaluation: losses, gradient and decoded curve (normalized units).
#[derive(Clone)]
struct RowEval {
    masked: f64,
    objective: f64,
    grad: Vec<f64>,
    curve: Vec<f64>,
}

/// Objective `Σ w (decode(z) − ŷ*)² + λ‖z‖²` in normalized units for a
/// batch of codes, with its gradient.
fn objective_and_grad(vae: &RespVae, zs: &[Vec<f64>], target: &[f64], mask: &[f64], reg: f64) -> Result<Vec<RowEval>> {
    let d = vae.latent_dim();
    let n = target.len();
    let b = zs.len();
    let mut cx = vae.frozen_ctx();
    let z = cx.leaf(&Tensor::new([b, d], zs.concat())?);
    let y = vae.decode_var(&mut cx, z)?;
    let tiled: Vec<f64> = (0..b).flat_map(|_| target.iter().copied()).collect();
    let data = cx.graph.weighted_sq_err(y, &tiled, mask, 1.0)?;
    let z2 = cx.graph.square(z);
    let norm = cx.graph.sum(z2);
    let regv = cx.graph.scale(norm, reg);
    let loss = cx.graph.add(data, regv)?;
    // Candidates are independent, so the summed loss separates per row.
    let (graph, _) = cx.finish();
    let grads = graph.backward(loss)?;
    let g = grads.wrt(z).expect("latent is a leaf").to_vec();
    let yv = graph.value(y);
    Ok((0..b)
        .map(|i| {
            let row = &yv[i * n..(i + 1) * n];
            let masked = masked_sq_dist(row, target, mask);
            let zn: f64 = zs[i].iter().map(|v| v * v).sum();
            RowEval {
                masked,
                objective: masked + reg * zn,
                grad: g[i * d..(i + 1) * d].to_vec(),
                curve: row.to_vec(),
            }
        })
        .collect())
}

/// Plain gradient descent on each code in `z0s` (run as one batch) through
/// the frozen decoder; each result is the best iterate of its trajectory.
pub fn latent_search(
    z0s: &[Vec<f64>],
    y_star_db: &[f64],
    mask: &[f64],
    vae: &RespVae,
    cfg: &SearchConfig,
) -> Result<Vec<SearchResult>> {
    cfg.validate()?;
    if z0s.is_empty() {
        return Ok(Vec::new());
    }
    if y_star_db.len() != vae.arch.n || mask.len() != vae.arch.n {
        return Err(Error::Invalid("target and mask must match the model's grid".into()));
    }
    let target = vae.norm.forward(y_star_db);
    let mut zs: Vec<Vec<f64>> = z0s.to_vec();
    // Best (iteration, code, evaluation) seen so far for each candidate.
    let mut best: Vec<Option<(usize, Vec<f64>, RowEval)>> = vec![None; zs.len()];
    for it in 0..=cfg.iterations {
        let evals = objective_and_grad(vae, &zs, &target, mask, cfg.reg)?;
        for (i, e) in evals.iter().enumerate() {
            if !e.objective.is_finite() {
                return Err(Error::NonFinite(it));
            }
            if best[i].as_ref().is_none_or(|b| e.objective < b.2.objective) {
                best[i] = Some((it, zs[i].clone(), e.clone()));
            }
        }
        if it == cfg.iterations {
            break;
        }
        for (z, e) in zs.iter_mut().zip(&evals) {
            z.iter_mut().zip(&e.grad).for_each(|(a, b)| *a -= cfg.step * b);
        }
    }
    best.into_iter()
        .map(|b| {
            let (iteration, z, e) = b.expect("at least one evaluation");
            Ok(SearchResult {
                z,
                curve: ResponseCurve::new(vae.norm.inverse(&e.curve), vae.grid)?,
                masked_loss: e.masked,
                objective: e.objective,
                iteration,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec1() -> TargetSpec {
        TargetSpec::new(vec![Notch {
            f: 2.4,
            bw: 0.2,
            depth_db: -15.0,
        }])
    }

    #[test]
    fn target_formula_values() {
        let g = FrequencyGrid::default();
        let s = spec1();
        let at = |f: f64| gamma_to_db(target_linear(&s, f));
        assert!((at(2.4) + 15.0).abs() < 1e-12);
        // (1 + 10^(−15/20)) / 2 = 0.58891…
        let expect = 20.0 * ((1.0 + 10f64.powf(-0.75)) / 2.0).log10();
        assert!((at(2.5) - expect).abs() < 1e-12);
        assert!((at(2.3) + 4.60).abs() < 5e-3, "{}", at(2.3));
        // Lorentzian tail: X ≈ (BW/2)² / Δf², so the dB offset decays as 1/Δf²
        let far = at(2.4 + 50.0 * 0.2);
        let x = 0.01 / (100.0 + 0.01);
        assert!((far - 20.0 * (1.0 - (1.0 - 10f64.powf(-0.75)) * x).log10()).abs() < 1e-15);
        assert!(far < 0.0 && far > -1e-3);
        let t = lorentzian_target(&s, &g).unwrap();
        assert!(t.values.iter().all(|&v| (-15.0 - 1e-12..=0.0).contains(&v)));
    }

    #[test]
    fn nested_form_agrees_with_simplified() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut u = || rand::Rng::random::<f64>(&mut rng);
        for _ in 0..1000 {
            let n = Notch {
                f: 1.0 + 9.0 * u(),
                bw: 0.01 + u(),
                depth_db: -40.0 * u() - 0.1,
            };
            let f = 1.0 + 9.0 * u();
            let hw2 = (n.bw / 2.0) * (n.bw / 2.0);
            let verbatim =
                1.0 - (1.0 - 10f64.powf(n.depth_db / 20.0)) * (1.0 - (1.0 - hw2 / ((f - n.f).powi(2) + hw2)));
            let spec = TargetSpec::new(vec![n]);
            assert!((verbatim - target_linear(&spec, f)).abs() <= 1e-12);
        }
    }

    #[test]
    fn multi_notch_is_product() {
        let g = FrequencyGrid::default();
        let a = Notch {
            f: 2.0,
            bw: 0.1,
            depth_db: -10.0,
        };
        let b = Notch {
            f: 5.0,
            bw: 0.3,
            depth_db: -20.0,
        };
        let both = lorentzian_target(&TargetSpec::new(vec![a, b]), &g).unwrap();
        let ta = lorentzian_target(&TargetSpec::new(vec![a]), &g).unwrap();
        let tb = lorentzian_target(&TargetSpec::new(vec![b]), &g).unwrap();
        for i in 0..g.n {
            assert!((both.values[i] - (ta.values[i] + tb.values[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn spec_validation_and_parsing() {
        let g = FrequencyGrid::default();
        let n: Notch = "2.4:0.2:-15".parse().unwrap();
        assert_eq!(n, spec1().notches[0]);
        assert!("2.4:0.2".parse::<Notch>().is_err());
        assert!("a:0.2:-1".parse::<Notch>().is_err());
        let bad = |f, bw, d| {
            TargetSpec::new(vec![Notch { f, bw, depth_db: d }])
                .validate(&g)
                .is_err()
        };
        assert!(bad(99.0, 0.1, -10.0));
        assert!(bad(2.0, 0.0, -10.0));
        assert!(bad(2.0, 0.1, 0.0));
        assert!(TargetSpec::new(vec![]).validate(&g).is_err());
    }

    #[test]
    fn mask_counts_match_enumeration() {
        let g = FrequencyGrid::default();
        let s = TargetSpec::new(vec![
            Notch {
                f: 2.4,
                bw: 0.2,
                depth_db: -15.0,
            },
            Notch {
                f: 7.0,
                bw: 0.05,
                depth_db: -10.0,
            },
        ]);
        let m = build_mask(&s, &g, 1.0).unwrap();
        let count = |f0: f64, half: f64| (0..g.n).filter(|&i| (g.freq(i) - f0).abs() <= half).count();
        assert_eq!(m.iter().sum::<f64>() as usize, count(2.4, 0.2) + count(7.0, 0.05));
        // two disjoint contiguous blocks
        let edges = m.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(edges, 4);
        assert!(build_mask(&s, &g, 0.0).is_err());
    }

    #[test]
    fn masked_distance_ignores_masked_out() {
        let a = [1.0, 2.0, 3.0];
        let mut b = [1.0, 1.0, 3.0];
        let m = [1.0, 1.0, 0.0];
        let d0 = masked_sq_dist(&a, &b, &m);
        b[2] = 100.0;
        assert_eq!(masked_sq_dist(&a, &b, &m), d0);
        assert_eq!(masked_mse(&a, &b, &m), 0.5);
    }

    #[test]
    fn random_latents_reproducible() {
        assert_eq!(random_latent(64, 9), random_latent(64, 9));
        assert_ne!(random_latent(64, 9), random_latent(64, 10));
    }
}
