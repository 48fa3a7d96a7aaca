//! Analytic multi-mode cavity model of a coax-fed rectangular patch.
//!
//! The feed sees a probe inductance in series with `M` parallel-RLC
//! resonators, one per TM_m0 mode along the patch length. Resonances use the
//! Hammerstad–Jensen effective permittivity and fringing extension, edge
//! resistance comes from the radiating-slot conductance and the loaded Q
//! from an empirical fractional-bandwidth fit.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in mm·GHz.
pub const C_MM_GHZ: f64 = 299.792_458;

/// Lower bound on |Γ| before conversion to dB.
pub const GAMMA_FLOOR: f64 = 1e-9;

/// Patch geometry in millimetres: length, width and feed offset from the
/// patch centre along the length axis (negative towards the radiating edge).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub l: f64,
    pub w: f64,
    pub p: f64,
}

impl DesignParams {
    pub const fn new(l: f64, w: f64, p: f64) -> Self {
        DesignParams { l, w, p }
    }

    /// `L > 0`, `W > 0` and `−L/2 < p < 0`.
    pub fn feasible(&self) -> bool {
        self.l > 0.0 && self.w > 0.0 && -self.l / 2.0 < self.p && self.p < 0.0 && self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        self.l.is_finite() && self.w.is_finite() && self.p.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l, self.w, self.p]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        DesignParams::new(v[0], v[1], v[2])
    }

    fn require_feasible(&self) -> Result<()> {
        if self.feasible() {
            Ok(())
        } else {
            Err(Error::Infeasible(*self))
        }
    }
}

impl fmt::Display for DesignParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(L={:.3} mm, W={:.3} mm, p={:.3} mm)", self.l, self.w, self.p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Substrate {
    pub eps_r: f64,
    /// Thickness in mm.
    pub h: f64,
}

impl Default for Substrate {
    fn default() -> Self {
        Substrate { eps_r: 3.68, h: 1.61 }
    }
}

impl Substrate {
    pub fn new(eps_r: f64, h: f64) -> Result<Self> {
        let s = Substrate { eps_r, h };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        // eps_r = 1 is accepted as the air-line limit.
        if !(self.eps_r >= 1.0 && self.h > 0.0) {
            return Err(Error::Invalid(format!(
                "substrate needs eps_r >= 1 and h > 0, got eps_r={} h={}",
                self.eps_r, self.h
            )));
        }
        Ok(())
    }
}

/// Regularly spaced frequencies in GHz, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyGrid {
    pub f_min: f64,
    pub f_max: f64,
    pub n: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            f_min: 1.0,
            f_max: 10.0,
            n: 1000,
        }
    }
}

impl FrequencyGrid {
    pub fn new(f_min: f64, f_max: f64, n: usize) -> Result<Self> {
        let g = FrequencyGrid { f_min, f_max, n };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.n >= 2) {
            return Err(Error::Invalid(format!("bad frequency grid {self:?}")));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.f_max - self.f_min) / (self.n - 1) as f64
    }

    pub fn freq(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.f_max
        } else {
            self.f_min + i as f64 * self.step()
        }
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.freq(i)).collect()
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.f_min && f <= self.f_max
    }

    /// Index of the grid point nearest to `f` (clamped to the grid).
    pub fn nearest(&self, f: f64) -> usize {
        let i = ((f - self.f_min) / self.step()).round();
        i.clamp(0.0, (self.n - 1) as f64) as usize
    }
}

/// |S11| in dB sampled on a frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseCurve {
    pub values: Vec<f64>,
    pub grid: FrequencyGrid,
}

impl ResponseCurve {
    pub fn new(values: Vec<f64>, grid: FrequencyGrid) -> Result<Self> {
        if values.len() != grid.n {
            return Err(Error::Invalid(format!(
                "curve has {} samples, grid expects {}",
                values.len(),
                grid.n
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("curve value {i} is not finite")));
        }
        Ok(ResponseCurve { values, grid })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmin(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
            )
            .0
    }
}

/// Knobs of the cavity model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavityConfig {
    pub modes: usize,
    /// Reference impedance in ohms.
    pub z0: f64,
    /// Fixed quality factor for every mode; `None` uses the bandwidth model.
    pub q_fix: Option<f64>,
    pub probe_reactance: bool,
}

impl Default for CavityConfig {
    fn default() -> Self {
        CavityConfig {
            modes: 3,
            z0: 50.0,
            q_fix: None,
            probe_reactance: true,
        }
    }
}

impl CavityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || !(self.z0 > 0.0) || self.q_fix.is_some_and(|q| !(q > 0.0)) {
            return Err(Error::Invalid(format!("bad cavity config {self:?}")));
        }
        Ok(())
    }
}

/// Hammerstad–Jensen effective permittivity of a microstrip of width `w` (mm).
pub fn eps_eff(w: f64, sub: &Substrate) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::Invalid(format!("patch width must be positive, got {w}")));
    }
    let er = sub.eps_r;
    Ok((er + 1.0) / 2.0 + (er - 1.0) / 2.0 * (1.0 + 12.0 * sub.h / w).powf(-0.5))
}

/// Fringing-field length extension ΔL (mm) at each radiating edge.
pub fn fringing_extension(w: f64, sub: &Substrate) -> Result<f64> {
    let ee = eps_eff(w, sub)?;
    let wh = w / sub.h;
    Ok(0.412 * sub.h * (ee + 0.3) * (wh + 0.264) / ((ee - 0.258) * (wh + 0.8)))
}

/// Dominant-mode (TM10) resonance in GHz.
pub fn resonant_freq_tm10(design: &DesignParams, sub: &Substrate) -> Result<f64> {
    design.require_feasible()?;
    tm10_unchecked(design.l, design.w, sub)
}

fn tm10_unchecked(l: f64, w: f64, sub: &Substrate) -> Result<f64> {
    let ee = eps_eff(w, sub)?;
    let dl = fringing_extension(w, sub)?;
    Ok(C_MM_GHZ / (2.0 * (l + 2.0 * dl) * ee.sqrt()))
}

/// Conductance (S) of one radiating slot of width `w` at free-space
/// wavelength `lambda0` (both mm).
pub fn slot_conductance(w: f64, lambda0: f64) -> f64 {
    let r = w / lambda0;
    if w <= 0.35 * lambda0 {
        r * r / 90.0
    } else {
        r / 120.0 - 1.0 / (60.0 * PI * PI)
    }
}

/// Edge input resistance `1 / (2 G1)` in ohms.
pub fn edge_resistance(w: f64, lambda0: f64) -> f64 {
    1.0 / (2.0 * slot_conductance(w, lambda0))
}

/// Loaded Q from the fractional-bandwidth fit, clamped to [15, 300].
pub fn quality_factor(design: &DesignParams, sub: &Substrate, f: f64) -> f64 {
    let lambda0 = C_MM_GHZ / f;
    let fbw = 3.77 * ((sub.eps_r - 1.0) / (sub.eps_r * sub.eps_r)) * (design.w / design.l) * (sub.h / lambda0);
    if fbw > 0.0 {
        (1.0 / fbw).clamp(15.0, 300.0)
    } else {
        300.0
    }
}

/// Series probe reactance in ohms at `f` GHz: 2πf · 0.2 nH · (h / 1.61 mm).
pub fn probe_reactance(sub: &Substrate, f: f64) -> f64 {
    let l_nh = 0.2 * sub.h / 1.61;
    2.0 * PI * f * l_nh
}

/// Per-mode resonator constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub index: usize,
    pub freq: f64,
    pub resistance: f64,
    pub q: f64,
}

/// Resonance, feed resistance and Q of modes `1..=cfg.modes`.
pub fn modes(design: &DesignParams, sub: &Substrate, cfg: &CavityConfig) -> Result<Vec<Mode>> {
    design.require_feasible()?;
    cfg.validate()?;
    let f1 = tm10_unchecked(design.l, design.w, sub)?;
    let x0 = design.l / 2.0 + design.p;
    Ok((1..=cfg.modes)
        .map(|m| {
            let fm = m as f64 * f1;
            let lambda0 = C_MM_GHZ / fm;
            let c = (m as f64 * PI * x0 / design.l).cos();
            Mode {
                index: m,
                freq: fm,
                resistance: edge_resistance(design.w, lambda0) * c * c,
                q: cfg.q_fix.unwrap_or_else(|| quality_factor(design, sub, fm)),
            }
        })
        .collect())
}

fn impedance_from_modes(modes: &[Mode], sub: &Substrate, cfg: &CavityConfig, f: f64) -> Complex64 {
    let x = if cfg.probe_reactance {
        probe_reactance(sub, f)
    } else {
        0.0
    };
    let mut z = Complex64::new(0.0, x);
    for m in modes {
        let detune = m.q * (f / m.freq - m.freq / f);
        z += m.resistance / Complex64::new(1.0, detune);
    }
    z
}

/// Input impedance (Ω) seen by the probe at `f` GHz.
pub fn input_impedance(design: &DesignParams, sub: &Substrate, cfg: &CavityConfig, f: f64) -> Result<Complex64> {
    if !(f > 0.0) {
        return Err(Error::Invalid(format!("frequency must be positive, got {f}")));
    }
    let ms = modes(design, sub, cfg)?;
    Ok(impedance_from_modes(&ms, sub, cfg, f))
}

pub fn reflection(z: Complex64, z0: f64) -> Complex64 {
    (z - z0) / (z + z0)
}

/// `20·log10(max(|Γ|, 1e-9))`.
pub fn gamma_to_db(gamma_mag: f64) -> f64 {
    20.0 * gamma_mag.max(GAMMA_FLOOR).log10()
}

/// |S11| in dB on `grid`.
pub fn s11_curve(
    design: &DesignParams,
    sub: &Substrate,
    cfg: &CavityConfig,
    grid: &FrequencyGrid,
) -> Result<ResponseCurve> {
    grid.validate()?;
    let ms = modes(design, sub, cfg)?;
    let values = (0..grid.n)
        .map(|i| {
            let z = impedance_from_modes(&ms, sub, cfg, grid.freq(i));
            gamma_to_db(reflection(z, cfg.z0).norm())
        })
        .collect();
    ResponseCurve::new(values, *grid)
}

/// Feed offset `p` that puts the dominant-mode resistance at `target_r`,
/// when the edge resistance is large enough to reach it.
pub fn feed_offset_for_resistance(l: f64, w: f64, sub: &Substrate, target_r: f64) -> Result<Option<f64>> {
    let f1 = tm10_unchecked(l, w, sub)?;
    let r_edge = edge_resistance(w, C_MM_GHZ / f1);
    if !(target_r > 0.0) || target_r > r_edge {
        return Ok(None);
    }
    let x0 = l / PI * (target_r / r_edge).sqrt().acos();
    let p = x0 - l / 2.0;
    Ok((p > -l / 2.0 && p < 0.0).then_some(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub() -> Substrate {
        Substrate::default()
    }

    #[test]
    fn eps_eff_limits() {
        let air = Substrate::new(1.0, 1.61).unwrap();
        assert!((eps_eff(3.0, &air).unwrap() - 1.0).abs() < 1e-15);
        let wide = eps_eff(1e12, &sub()).unwrap();
        assert!((wide - 3.68).abs() < 1e-5);
        assert!(eps_eff(0.0, &sub()).is_err());
        assert!(eps_eff(-1.0, &sub()).is_err());
    }

    #[test]
    fn eps_eff_reference_value() {
        // (4.68)/2 + (2.68)/2 · (1 + 12·1.61/40.5)^(-1/2)
        let expect = 2.34 + 1.34 / (1.0 + 19.32 / 40.5f64).sqrt();
        let v = eps_eff(40.5, &sub()).unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 3.443).abs() < 1e-3, "{v}");
    }

    #[test]
    fn resonance_monotone_in_length_and_permittivity() {
        let s = sub();
        let mut prev = f64::INFINITY;
        for l in [8.0, 12.0, 20.0, 30.0, 45.0] {
            let f = resonant_freq_tm10(&DesignParams::new(l, 30.0, -1.0), &s).unwrap();
            assert!(f < prev);
            prev = f;
        }
        let d = DesignParams::new(30.0, 40.0, -5.0);
        let mut prev = f64::INFINITY;
        for er in [1.5, 2.2, 3.68, 6.0, 10.2] {
            let f = resonant_freq_tm10(&d, &Substrate::new(er, 1.61).unwrap()).unwrap();
            assert!(f < prev);
            prev = f;
        }
        let f30 = resonant_freq_tm10(&DesignParams::new(30.0, 40.0, -1.0), &s).unwrap();
        let f60 = resonant_freq_tm10(&DesignParams::new(60.0, 40.0, -1.0), &s).unwrap();
        assert!((f30 / f60 - 2.0).abs() < 0.1);
    }

    #[test]
    fn air_line_limit() {
        let air = Substrate::new(1.0, 1.61).unwrap();
        let d = DesignParams::new(50.0, 60.0, -2.0);
        let dl = fringing_extension(60.0, &air).unwrap();
        let f = resonant_freq_tm10(&d, &air).unwrap();
        assert!((f - C_MM_GHZ / (2.0 * (50.0 + 2.0 * dl))).abs() < 1e-12);
    }

    #[test]
    fn feed_position_controls_dominant_resistance() {
        let s = sub();
        let cfg = CavityConfig::default();
        let edge = modes(&DesignParams::new(30.0, 40.0, -15.0 + 1e-9), &s, &cfg).unwrap();
        let f1 = edge[0].freq;
        let r_edge = edge_resistance(40.0, C_MM_GHZ / f1);
        assert!((edge[0].resistance - r_edge).abs() / r_edge < 1e-12);
        // p = 0 is outside the feasible set; evaluate the centre null directly.
        let c = (PI * 15.0 / 30.0).cos();
        assert!(c * c < 1e-30);
        let near_centre = modes(&DesignParams::new(30.0, 40.0, -1e-7), &s, &cfg).unwrap();
        assert!(near_centre[0].resistance < 1e-9);
    }

    #[test]
    fn resonator_is_real_at_resonance() {
        let s = sub();
        let cfg = CavityConfig {
            modes: 1,
            ..CavityConfig::default()
        };
        let d = DesignParams::new(30.0, 40.5, -7.4);
        let m = modes(&d, &s, &cfg).unwrap()[0];
        let z = input_impedance(&d, &s, &cfg, m.freq).unwrap();
        assert!((z.im - probe_reactance(&s, m.freq)).abs() < 1e-9);
        assert!((z.re - m.resistance).abs() < 1e-9);
    }

    #[test]
    fn db_conversion() {
        assert_eq!(gamma_to_db(1.0), 0.0);
        assert_eq!(gamma_to_db(0.1), -20.0);
        assert_eq!(gamma_to_db(0.01), -40.0);
        assert_eq!(gamma_to_db(0.0), -180.0);
        // perfect match and total reflection
        assert_eq!(gamma_to_db(reflection(Complex64::new(50.0, 0.0), 50.0).norm()), -180.0);
        assert_eq!(gamma_to_db(reflection(Complex64::new(0.0, 0.0), 50.0).norm()), 0.0);
        assert!(gamma_to_db(reflection(Complex64::new(1e15, 0.0), 50.0).norm()).abs() < 1e-9);
    }

    #[test]
    fn curve_rejects_infeasible_and_is_passive() {
        let s = sub();
        let cfg = CavityConfig::default();
        let g = FrequencyGrid::default();
        assert!(matches!(
            s11_curve(&DesignParams::new(30.0, 40.0, 1.0), &s, &cfg, &g),
            Err(Error::Infeasible(_))
        ));
        assert!(s11_curve(&DesignParams::new(30.0, 40.0, 0.0), &s, &cfg, &g).is_err());
        let c = s11_curve(&DesignParams::new(30.0, 40.5, -7.4), &s, &cfg, &g).unwrap();
        assert_eq!(c.len(), 1000);
        assert!(c.values.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn matched_single_mode_minimum_at_resonance() {
        let s = sub();
        let cfg = CavityConfig {
            modes: 1,
            z0: 50.0,
            q_fix: Some(50.0),
            probe_reactance: false,
        };
        let g = FrequencyGrid::default();
        let p = feed_offset_for_resistance(30.0, 40.0, &s, 50.0).unwrap().unwrap();
        let d = DesignParams::new(30.0, 40.0, p);
        let m = modes(&d, &s, &cfg).unwrap()[0];
        assert!((m.resistance - 50.0).abs() < 1e-9);
        let c = s11_curve(&d, &s, &cfg, &g).unwrap();
        // brute-force scan of |Γ| on a fine grid around the resonance
        let best = (0..200_001)
            .map(|i| m.freq - 0.1 + i as f64 * 1e-6)
            .map(|f| (f, input_impedance(&d, &s, &cfg, f).unwrap()))
            .map(|(f, z)| (f, reflection(z, 50.0).norm()))
            .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        assert!((best.0 - m.freq).abs() < 2e-6);
        assert!((g.freq(c.argmin()) - m.freq).abs() <= g.step());
    }

    #[test]
    fn grid_points() {
        let g = FrequencyGrid::default();
        assert_eq!(g.freq(0), 1.0);
        assert_eq!(g.freq(999), 10.0);
        assert!((g.step() - 9.0 / 999.0).abs() < 1e-15);
        assert_eq!(g.nearest(2.4), ((2.4 - 1.0) / g.step()).round() as usize);
        assert!(FrequencyGrid::new(2.0, 1.0, 10).is_err());
        assert!(FrequencyGrid::new(1.0, 2.0, 1).is_err());
    }
}
