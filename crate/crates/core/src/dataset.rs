//! Design sampling, convex-hull augmentation, curve generation, CSV
//! persistence and train/validation splitting.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emodel::{self, CavityConfig, DesignParams, FrequencyGrid, ResponseCurve, Substrate};
use crate::error::{Error, Result};
use crate::hull::{ConvexHull, Point3};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub design: DesignParams,
    pub curve: ResponseCurve,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingBounds {
    pub l_min: f64,
    pub l_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Most negative feed offset (mm).
    pub p_min: f64,
    /// Fraction of the half-length the feed may reach towards the edge.
    pub edge_margin: f64,
}

impl Default for SamplingBounds {
    fn default() -> Self {
        SamplingBounds {
            l_min: 7.5,
            l_max: 52.5,
            ratio_min: 0.8,
            ratio_max: 2.0,
            p_min: -6.0,
            edge_margin: 0.95,
        }
    }
}

impl SamplingBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.l_min
            && self.l_min < self.l_max
            && 0.0 < self.ratio_min
            && self.ratio_min <= self.ratio_max
            && self.p_min < 0.0
            && 0.0 < self.edge_margin
            && self.edge_margin < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad sampling bounds {self:?}")))
        }
    }

    /// Most negative feed offset emitted for a patch of length `l`.
    pub fn p_lower(&self, l: f64) -> f64 {
        -(-self.p_min).min(self.edge_margin * l / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridCounts {
    pub l: usize,
    pub ratio: usize,
    pub p: usize,
}

impl Default for GridCounts {
    fn default() -> Self {
        GridCounts { l: 12, ratio: 7, p: 10 }
    }
}

impl GridCounts {
    pub fn total(&self) -> usize {
        self.l * self.ratio * self.p
    }
}

/// Regular grid: geometric in L, linear in W/L, square-law warped in p
/// (dense near the radiating edge). `jitter` (fraction of a cell, default 0)
/// perturbs each point with seeded uniform noise.
pub fn grid_sample(bounds: &SamplingBounds, counts: GridCounts, seed: u64, jitter: f64) -> Result<Vec<DesignParams>> {
    bounds.validate()?;
    if counts.l < 2 || counts.ratio < 2 || counts.p < 2 {
        return Err(Error::Invalid(format!(
            "grid counts must be >= 2 per axis, got {counts:?}"
        )));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::Invalid(format!("jitter must lie in [0, 0.5), got {jitter}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_ratio = (bounds.l_max / bounds.l_min).ln();
    let mut out = Vec::with_capacity(counts.total());
    for i in 0..counts.l {
        for j in 0..counts.ratio {
            for k in 0..counts.p {
                let mut u = [
                    i as f64 / (counts.l - 1) as f64,
                    j as f64 / (counts.ratio - 1) as f64,
                    k as f64 / counts.p as f64,
                ];
                if jitter > 0.0 {
                    let cells = [counts.l - 1, counts.ratio - 1, counts.p];
                    for d in 0..3 {
                        let delta = (rng.random::<f64>() * 2.0 - 1.0) * jitter / cells[d] as f64;
                        u[d] = (u[d] + delta).clamp(0.0, if d == 2 { 1.0 - 1e-6 } else { 1.0 });
                    }
                }
                let l = bounds.l_min * (u[0] * log_ratio).exp();
                let ratio = bounds.ratio_min + (bounds.ratio_max - bounds.ratio_min) * u[1];
                let lo = bounds.p_lower(l);
                let p = lo - lo * u[2] * u[2];
                out.push(DesignParams::new(l, ratio * l, p));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Dataset size after augmentation.
    pub target_total: usize,
    /// Initial exclusion radius in box-normalized L∞ units.
    pub initial_radius: f64,
    pub shrink: f64,
    /// Consecutive rejections before the radius shrinks.
    pub patience: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_total: 1292,
            initial_radius: 0.2,
            shrink: 0.9,
            patience: 200,
        }
    }
}

/// Box-normalized coordinates of a design.
fn normalize(d: &DesignParams, lo: &Point3, span: &Point3) -> Point3 {
    let x = d.to_array();
    [
        (x[0] - lo[0]) / span[0],
        (x[1] - lo[1]) / span[1],
        (x[2] - lo[2]) / span[2],
    ]
}

/// Maximin rejection sampling inside the convex hull of `existing` until the
/// union reaches `cfg.target_total` designs. Returns only the new designs.
pub fn hull_augment(existing: &[DesignParams], cfg: &AugmentConfig, seed: u64) -> Result<Vec<DesignParams>> {
    if cfg.target_total <= existing.len() {
        return Ok(Vec::new());
    }
    if !(cfg.initial_radius > 0.0 && cfg.shrink > 0.0 && cfg.shrink < 1.0 && cfg.patience > 0) {
        return Err(Error::Invalid(format!("bad augmentation config {cfg:?}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for d in existing {
        for (k, v) in d.to_array().into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let span = [0, 1, 2].map(|k| hi[k] - lo[k]);
    if existing.len() < 4 || span.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateHull(format!(
            "{} designs spanning {span:?} do not enclose a volume",
            existing.len()
        )));
    }
    let mut points: Vec<Point3> = existing.iter().map(|d| normalize(d, &lo, &span)).collect();
    // Kept points lie inside the hull, so the hull of the union never changes.
    let hull = ConvexHull::new(&points)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radius = cfg.initial_radius;
    let mut misses = 0;
    let mut added = Vec::with_capacity(cfg.target_total - existing.len());
    while existing.len() + added.len() < cfg.target_total {
        let u: Point3 = [rng.random(), rng.random(), rng.random()];
        let accept = hull.contains(&u)
            && points
                .iter()
                .all(|q| (0..3).map(|k| (u[k] - q[k]).abs()).fold(0.0, f64::max) > radius);
        let design = DesignParams::new(lo[0] + u[0] * span[0], lo[1] + u[1] * span[1], lo[2] + u[2] * span[2]);
        if accept && design.feasible() {
            points.push(u);
            added.push(design);
            misses = 0;
        } else {
            misses += 1;
            if misses >= cfg.patience {
                radius *= cfg.shrink;
                misses = 0;
            }
        }
    }
    log::debug!(
        "hull augmentation added {} designs, final radius {radius:.4}",
        added.len()
    );
    Ok(added)
}

/// Round to the nine significant digits used on disk.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn quantize_design(d: &DesignParams) -> DesignParams {
    DesignParams::new(quantize(d.l), quantize(d.w), quantize(d.p))
}

/// Simulate every design. Designs and curve values are rounded to the
/// persisted precision so saved records reload bit-identically.
pub fn build_dataset(
    designs: &[DesignParams],
    substrate: &Substrate,
    cavity: &CavityConfig,
    grid: &FrequencyGrid,
) -> Result<Vec<DatasetRecord>> {
    designs
        .par_iter()
        .map(|d| {
            let design = quantize_design(d);
            let mut curve = emodel::s11_curve(&design, substrate, cavity, grid)?;
            curve.values.iter_mut().for_each(|v| *v = quantize(*v));
            Ok(DatasetRecord { design, curve })
        })
        .collect()
}

/// Seeded shuffle into (train, validation) with `ceil(n·val_fraction)`
/// validation records (at least one on each side when n ≥ 2).
pub fn split(
    records: &[DatasetRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = ((n as f64 * val_fraction) - 1e-9).ceil().max(0.0) as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx[..n_val].iter().map(|&i| records[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

pub fn write_csv<W: Write>(mut w: W, records: &[DatasetRecord], grid: &FrequencyGrid, config_hash: &str) -> Result<()> {
    writeln!(
        w,
        "# grid f_min_ghz={} f_max_ghz={} n={} config_hash={}",
        grid.f_min, grid.f_max, grid.n, config_hash
    )?;
    let mut line = String::from("L_mm,W_mm,p_mm");
    for i in 1..=grid.n {
        write!(line, ",s11_db_{i:04}").unwrap();
    }
    writeln!(w, "{line}")?;
    for r in records {
        if r.curve.grid != *grid {
            return Err(Error::Invalid("record curve is not on the dataset grid".into()));
        }
        line.clear();
        write!(line, "{:.8e},{:.8e},{:.8e}", r.design.l, r.design.w, r.design.p).unwrap();
        for v in &r.curve.values {
            write!(line, ",{v:.8e}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, records: &[DatasetRecord], grid: &FrequencyGrid, config_hash: &str) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(f), records, grid, config_hash)
}

/// Parsed dataset file.
#[derive(Clone, Debug)]
pub struct DatasetFile {
    pub grid: FrequencyGrid,
    pub config_hash: String,
    pub records: Vec<DatasetRecord>,
}

fn parse_grid_comment(line: &str) -> Result<(FrequencyGrid, String)> {
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let rest = line
        .strip_prefix("# grid")
        .ok_or_else(|| bad("expected '# grid ...' comment".into()))?;
    let (mut f_min, mut f_max, mut n, mut hash) = (None, None, None, String::new());
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed entry '{kv}'")))?;
        let num = || v.parse::<f64>().map_err(|_| bad(format!("bad number '{v}' for {k}")));
        match k {
            "f_min_ghz" => f_min = Some(num()?),
            "f_max_ghz" => f_max = Some(num()?),
            "n" => n = Some(v.parse::<usize>().map_err(|_| bad(format!("bad count '{v}'")))?),
            "config_hash" => hash = v.to_string(),
            _ => return Err(bad(format!("unknown grid key '{k}'"))),
        }
    }
    match (f_min, f_max, n) {
        (Some(a), Some(b), Some(n)) => Ok((FrequencyGrid::new(a, b, n).map_err(|e| bad(e.to_string()))?, hash)),
        _ => Err(bad("grid comment needs f_min_ghz, f_max_ghz and n".into())),
    }
}

pub fn read_csv<R: Read>(r: R) -> Result<DatasetFile> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })??;
    let (grid, config_hash) = parse_grid_comment(&first)?;
    let header = lines.next().ok_or(Error::Parse {
        line: 2,
        msg: "missing header".into(),
    })??;
    let cols: Vec<&str> = header.split(',').collect();
    let header_ok = cols.len() == grid.n + 3
        && cols[..3] == ["L_mm", "W_mm", "p_mm"]
        && cols[3..]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("s11_db_{:04}", i + 1));
    if !header_ok {
        return Err(Error::Parse {
            line: 2,
            msg: format!("header does not match a {}-point grid", grid.n),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let vals = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| err(format!("bad number: {e}")))?;
        if vals.len() != grid.n + 3 {
            return Err(err(format!("expected {} fields, found {}", grid.n + 3, vals.len())));
        }
        let design = DesignParams::from_slice(&vals[..3]);
        if !design.feasible() {
            return Err(err(format!("infeasible design {design}")));
        }
        let curve = ResponseCurve::new(vals[3..].to_vec(), grid).map_err(|e| err(e.to_string()))?;
        records.push(DatasetRecord { design, curve });
    }
    Ok(DatasetFile {
        grid,
        config_hash,
        records,
    })
}

pub fn load_csv(path: &Path) -> Result<DatasetFile> {
    let f = std::fs::File::open(path).map_err(|e| Error::Missing(format!("dataset {}: {e}", path.display())))?;
    read_csv(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_grid() {
        let b = SamplingBounds::default();
        let g = grid_sample(&b, GridCounts { l: 2, ratio: 2, p: 2 }, 0, 0.0).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|d| d.feasible()));
        assert!((g[0].l - 7.5).abs() < 1e-12 && (g[7].l - 52.5).abs() < 1e-12);
        assert!(grid_sample(&b, GridCounts { l: 1, ratio: 2, p: 2 }, 0, 0.0).is_err());
    }

    #[test]
    fn grid_respects_bounds_and_spacing() {
        let b = SamplingBounds::default();
        let g = grid_sample(&b, GridCounts::default(), 3, 0.0).unwrap();
        assert_eq!(g.len(), 840);
        for d in &g {
            assert!(d.feasible(), "{d}");
            assert!(d.l >= 7.5 - 1e-12 && d.l <= 52.5 + 1e-12);
            let r = d.w / d.l;
            assert!((0.8 - 1e-12..=2.0 + 1e-12).contains(&r));
            assert!(d.p >= -6.0 && d.p > -d.l / 2.0 && d.p < 0.0);
        }
        // geometric L: constant successive ratio
        let ls: Vec<f64> = g.iter().step_by(70).map(|d| d.l).collect();
        for w in ls.windows(3) {
            assert!((w[1] / w[0] - w[2] / w[1]).abs() < 1e-12);
        }
        // p spacing grows towards the centre (dense near the edge)
        let ps: Vec<f64> = g[..10].iter().map(|d| d.p).collect();
        for w in ps.windows(3) {
            assert!(w[2] - w[1] > w[1] - w[0]);
        }
        // smallest patch: feed truncated inside (−3.75, 0)
        assert!(g[..70].iter().all(|d| d.p > -3.75));
    }

    #[test]
    fn augmentation_stays_in_hull() {
        let b = SamplingBounds::default();
        let g = grid_sample(&b, GridCounts { l: 4, ratio: 3, p: 3 }, 0, 0.0).unwrap();
        let cfg = AugmentConfig {
            target_total: g.len(),
            ..AugmentConfig::default()
        };
        assert!(hull_augment(&g, &cfg, 1).unwrap().is_empty());
        let cfg = AugmentConfig {
            target_total: 80,
            ..AugmentConfig::default()
        };
        let extra = hull_augment(&g, &cfg, 1).unwrap();
        assert_eq!(extra.len(), 80 - g.len());
        assert!(extra.iter().all(|d| d.feasible()));
        assert_eq!(extra, hull_augment(&g, &cfg, 1).unwrap());
    }

    #[test]
    fn split_sizes() {
        let grid = FrequencyGrid::new(1.0, 2.0, 2).unwrap();
        let recs: Vec<DatasetRecord> = (0..10)
            .map(|i| DatasetRecord {
                design: DesignParams::new(10.0 + i as f64, 12.0, -1.0),
                curve: ResponseCurve::new(vec![-1.0, -2.0], grid).unwrap(),
            })
            .collect();
        let (t, v) = split(&recs, 0.1, 4).unwrap();
        assert_eq!((t.len(), v.len()), (9, 1));
        let (t2, v2) = split(&recs, 0.1, 4).unwrap();
        assert_eq!((t, v), (t2, v2));
        assert!(split(&recs, 0.0, 4).is_err());
        assert!(split(&recs, 1.0, 4).is_err());
    }
}
