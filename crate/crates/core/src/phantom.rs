//! Digital perfusion phantom with known kinetic parameters.
//!
//! Tissue classes are painted from ellipses on a normalized `[-1, 1]²` field
//! of view (later ellipses overwrite earlier ones). DSC tissue curves are the
//! arterial curve convolved with `CBF·exp(−t/MTT)` by the rectangle rule
//! `C_t[i] = dt Σ_j C_a[i−j] k[j]`, and signals follow
//! `S = S0 exp(−TE·C_t)`. DCE curves follow the Patlak model and are turned
//! into spoiled gradient-echo signals through the relaxivity relation.
//!
//! DSC truth maps are stated in the discrete form the rectangle rule implies:
//! `MTT = dt Σ_j exp(−j·dt/τ) = dt/(1 − exp(−dt/τ))` and `CBV = CBF·MTT`, so
//! that exact deconvolution of a long enough noiseless curve reproduces them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use num_complex::Complex32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::dce::{cumulative_integral_minutes, spgr_signal, VfaSeries, DEFAULT_VFA_ANGLES};
use crate::kinetics::dsc::GammaVariateFit;
use crate::volume::{Dims, ImageSeries, MapKind, ParameterMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Background,
    WhiteMatter,
    GrayMatter,
    Vessel,
    Tumor,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [
        Tissue::Background,
        Tissue::WhiteMatter,
        Tissue::GrayMatter,
        Tissue::Vessel,
        Tissue::Tumor,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::WhiteMatter => "white_matter",
            Tissue::GrayMatter => "gray_matter",
            Tissue::Vessel => "vessel",
            Tissue::Tumor => "tumor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomMode {
    Dsc,
    Dce,
}

/// Ellipse in normalized coordinates (`[-1, 1]` across each axis).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub tissue: Tissue,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    #[serde(default)]
    pub angle_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let (a, b) = (c * du + s * dv, -s * du + c * dv);
        (a / self.rx).powi(2) + (b / self.ry).powi(2) <= 1.0
    }
}

/// Per-class parameters; DSC uses `s0`, `cbf` (s⁻¹) and `mtt` (s), DCE uses
/// `m`, `t1` (s), `vp` and `ktrans` (min⁻¹).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueParams {
    pub s0: f64,
    pub cbf: f64,
    pub mtt: f64,
    pub m: f64,
    pub t1: f64,
    pub vp: f64,
    pub ktrans: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub k: f64,
    pub t0: f64,
    pub a: f64,
    pub b: f64,
}

impl GammaParams {
    pub fn curve(&self) -> GammaVariateFit {
        GammaVariateFit::new(self.k, self.t0, self.a, self.b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DceAcquisition {
    pub tr: f64,
    pub dynamic_angle: f64,
    pub r1: f64,
    pub vfa_angles: Vec<f64>,
    /// Simulate this many sub-frames per output frame and average them.
    pub average_frames: usize,
}

impl Default for DceAcquisition {
    fn default() -> Self {
        Self {
            tr: 0.006,
            dynamic_angle: 10.0,
            r1: 4.5,
            vfa_angles: DEFAULT_VFA_ANGLES.to_vec(),
            average_frames: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    pub t: usize,
    pub dt: f64,
    pub mode: PhantomMode,
    pub ellipses: Vec<Ellipse>,
    pub tissues: BTreeMap<Tissue, TissueParams>,
    /// Arterial (DSC) or plasma (DCE) input curve.
    pub aif: GammaParams,
    #[serde(default = "default_te")]
    pub te: f64,
    #[serde(default)]
    pub dce: DceAcquisition,
    /// Standard deviation of complex image noise (split over real and
    /// imaginary parts).
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_te() -> f64 {
    0.030
}

fn default_ellipses() -> Vec<Ellipse> {
    let e = |tissue, cx, cy, rx, ry, angle_deg| Ellipse {
        tissue,
        cx,
        cy,
        rx,
        ry,
        angle_deg,
    };
    vec![
        e(Tissue::GrayMatter, 0.0, 0.0, 0.82, 0.92, 0.0),
        e(Tissue::WhiteMatter, 0.0, 0.05, 0.55, 0.65, 0.0),
        e(Tissue::GrayMatter, -0.2, 0.15, 0.12, 0.25, 20.0),
        e(Tissue::Tumor, 0.28, -0.28, 0.22, 0.18, -30.0),
        e(Tissue::Vessel, -0.3, -0.45, 0.13, 0.13, 0.0),
    ]
}

impl PhantomSpec {
    /// 32×32×24 DSC phantom sampled every 1.5 s.
    pub fn dsc_default() -> Self {
        let p = |s0, cbf, mtt| TissueParams {
            s0,
            cbf,
            mtt,
            ..TissueParams::default()
        };
        let tissues = BTreeMap::from([
            (Tissue::Background, p(0.1, 0.0, 0.0)),
            (Tissue::WhiteMatter, p(0.8, 0.025, 5.0)),
            (Tissue::GrayMatter, p(1.0, 0.05, 4.0)),
            (Tissue::Vessel, p(0.9, 0.0, 0.0)),
            (Tissue::Tumor, p(0.95, 0.07, 3.0)),
        ]);
        Self {
            nx: 32,
            ny: 32,
            t: 24,
            dt: 1.5,
            mode: PhantomMode::Dsc,
            ellipses: default_ellipses(),
            tissues,
            aif: GammaParams {
                k: 6.6,
                t0: 12.0,
                a: 3.0,
                b: 1.5,
            },
            te: default_te(),
            dce: DceAcquisition::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// 32×32×20 DCE phantom sampled every 1.5 s.
    pub fn dce_default() -> Self {
        let p = |m, t1, vp, ktrans| TissueParams {
            m,
            t1,
            vp,
            ktrans,
            ..TissueParams::default()
        };
        let tissues = BTreeMap::from([
            (Tissue::Background, p(0.2, 1.0, 0.0, 0.0)),
            (Tissue::WhiteMatter, p(0.8, 0.85, 0.02, 0.0)),
            (Tissue::GrayMatter, p(1.0, 1.35, 0.04, 0.005)),
            (Tissue::Vessel, p(1.0, 1.6, 1.0, 0.0)),
            (Tissue::Tumor, p(0.95, 1.6, 0.08, 0.25)),
        ]);
        Self {
            nx: 32,
            ny: 32,
            t: 20,
            dt: 1.5,
            mode: PhantomMode::Dce,
            ellipses: default_ellipses(),
            tissues,
            aif: GammaParams {
                k: 1.1,
                t0: 6.0,
                a: 3.0,
                b: 1.5,
            },
            te: default_te(),
            dce: DceAcquisition::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.nx, self.ny, self.t)
    }

    pub fn params(&self, t: Tissue) -> TissueParams {
        self.tissues.get(&t).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid phantom: {m}")));
        if !(self.dt > 0.0) || !(self.te > 0.0) || self.noise_sigma < 0.0 {
            return bad("dt, te must be positive and noise non-negative".into());
        }
        for (t, p) in &self.tissues {
            let v = [p.s0, p.cbf, p.mtt, p.m, p.t1, p.vp, p.ktrans];
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad(format!("negative parameter for {}", t.name()));
            }
        }
        if self.ellipses.iter().any(|e| !(e.rx > 0.0 && e.ry > 0.0)) {
            return bad("ellipse radii must be positive".into());
        }
        if !(self.aif.k > 0.0 && self.aif.a > 0.0 && self.aif.b > 0.0) {
            return bad("input curve parameters must be positive".into());
        }
        if self.mode == PhantomMode::Dce {
            let d = &self.dce;
            if !(d.tr > 0.0 && d.r1 > 0.0) || d.average_frames == 0 || d.vfa_angles.len() < 3 {
                return bad("DCE acquisition needs tr, r1 > 0, average_frames ≥ 1, ≥ 3 angles".into());
            }
            for (t, p) in &self.tissues {
                if !(p.t1 > 0.0) || p.vp > 1.0 {
                    return bad(format!("{} needs T1 > 0 and vp ≤ 1", t.name()));
                }
            }
        }
        Ok(())
    }

    /// Label of every voxel, row-major.
    pub fn label_map(&self) -> Vec<Tissue> {
        let mut labels = vec![Tissue::Background; self.nx * self.ny];
        for e in &self.ellipses {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    let u = 2.0 * (x as f64 + 0.5) / self.nx as f64 - 1.0;
                    let v = 2.0 * (y as f64 + 0.5) / self.ny as f64 - 1.0;
                    if e.contains(u, v) {
                        labels[y * self.nx + x] = e.tissue;
                    }
                }
            }
        }
        labels
    }
}

/// `dt Σ_{j≤i} a[i−j] k[j]`
pub fn rectangle_convolution(a: &[f64], k: &[f64], dt: f64) -> Vec<f64> {
    (0..a.len())
        .map(|i| (0..=i).map(|j| a[i - j] * k[j]).sum::<f64>() * dt)
        .collect()
}

/// Mean transit time of a sampled exponential residue, `dt/(1 − exp(−dt/τ))`.
pub fn discrete_mtt(tau: f64, dt: f64) -> f64 {
    if tau <= 0.0 {
        0.0
    } else {
        dt / (1.0 - (-dt / tau).exp())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub truth: ImageSeries,
    pub labels: Vec<Tissue>,
    pub maps: Vec<ParameterMap>,
    pub aif_region: Vec<(usize, usize)>,
    /// Concentration curve per voxel (mM for DCE, relative units for DSC).
    pub concentrations: Vec<Vec<f64>>,
    pub vfa: Option<VfaSeries>,
}

impl Phantom {
    pub fn map(&self, kind: MapKind) -> Option<&ParameterMap> {
        self.maps.iter().find(|m| m.kind == kind)
    }

    /// Voxels of one class.
    pub fn voxels_of(&self, t: Tissue) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == t).collect()
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims()?;
    let labels = spec.label_map();
    let aif_region: Vec<(usize, usize)> = (0..labels.len())
        .filter(|&i| labels[i] == Tissue::Vessel)
        .map(|i| (i % spec.nx, i / spec.nx))
        .collect();
    if aif_region.is_empty() {
        return Err(Error::EmptyVessel);
    }
    let (signals, concentrations, maps, vfa) = match spec.mode {
        PhantomMode::Dsc => dsc_signals(spec, &labels),
        PhantomMode::Dce => dce_signals(spec, &labels)?,
    };
    let mut data: Vec<Complex32> = vec![Complex32::new(0.0, 0.0); dims.len()];
    for (i, s) in signals.iter().enumerate() {
        for (t, v) in s.iter().enumerate() {
            data[t * dims.frame_len() + i] = Complex32::new(*v as f32, 0.0);
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = Normal::new(0.0, spec.noise_sigma / 2f64.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for z in data.iter_mut() {
            z.re += n.sample(&mut rng) as f32;
            z.im += n.sample(&mut rng) as f32;
        }
    }
    let maps = maps
        .into_iter()
        .map(|(kind, v)| ParameterMap::new(spec.nx, spec.ny, kind, v.iter().map(|&x| x as f32).collect()))
        .collect::<Result<_>>()?;
    Ok(Phantom {
        spec: spec.clone(),
        truth: ImageSeries::new(dims, spec.dt, data)?,
        labels,
        maps,
        aif_region,
        concentrations,
        vfa,
    })
}

type Generated = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<(MapKind, Vec<f64>)>, Option<VfaSeries>);

fn dsc_signals(spec: &PhantomSpec, labels: &[Tissue]) -> Generated {
    let (n, dt) = (spec.t, spec.dt);
    let ca = spec.aif.curve().sample(n, dt);
    let curve_of = |t: Tissue| -> Vec<f64> {
        let p = spec.params(t);
        if t == Tissue::Vessel {
            return ca.clone();
        }
        if p.cbf == 0.0 || p.mtt == 0.0 {
            return vec![0.0; n];
        }
        let k: Vec<f64> = (0..n).map(|j| p.cbf * (-(j as f64) * dt / p.mtt).exp()).collect();
        rectangle_convolution(&ca, &k, dt)
    };
    let per_tissue: BTreeMap<Tissue, Vec<f64>> = Tissue::ALL.iter().map(|&t| (t, curve_of(t))).collect();
    let conc: Vec<Vec<f64>> = labels.iter().map(|t| per_tissue[t].clone()).collect();
    let signals = labels
        .iter()
        .zip(&conc)
        .map(|(t, c)| {
            let s0 = spec.params(*t).s0;
            c.iter().map(|v| s0 * (-spec.te * v).exp()).collect()
        })
        .collect();
    let truth = |t: &Tissue| -> (f64, f64) {
        let p = spec.params(*t);
        match t {
            // the arterial curve itself: an impulse residue of unit area
            Tissue::Vessel => (1.0 / dt, dt),
            _ if p.cbf == 0.0 => (0.0, 0.0),
            _ => (p.cbf, discrete_mtt(p.mtt, dt)),
        }
    };
    let cbf = labels.iter().map(|t| truth(t).0).collect();
    let mtt: Vec<f64> = labels.iter().map(|t| truth(t).1).collect();
    let cbv = labels.iter().map(|t| truth(t).0 * truth(t).1).collect();
    (
        signals,
        conc,
        vec![(MapKind::Cbf, cbf), (MapKind::Cbv, cbv), (MapKind::Mtt, mtt)],
        None,
    )
}

fn dce_signals(spec: &PhantomSpec, labels: &[Tissue]) -> Result<Generated> {
    let acq = &spec.dce;
    let sub = acq.average_frames;
    let fine_dt = spec.dt / sub as f64;
    let n_fine = spec.t * sub;
    let cp = spec.aif.curve().sample(n_fine, fine_dt);
    let integral = cumulative_integral_minutes(&cp, fine_dt);
    let fine_curve = |p: &TissueParams| -> Vec<f64> {
        cp.iter().zip(&integral).map(|(c, i)| p.vp * c + p.ktrans * i).collect()
    };
    let average = |v: &[f64]| -> Vec<f64> { v.chunks(sub).map(|c| c.iter().sum::<f64>() / sub as f64).collect() };
    let mut signals = Vec::with_capacity(labels.len());
    let mut conc = Vec::with_capacity(labels.len());
    for t in labels {
        let p = spec.params(*t);
        let c = fine_curve(&p);
        let s: Vec<f64> = c
            .iter()
            .map(|&v| spgr_signal(p.m, 1.0 / (1.0 / p.t1 + acq.r1 * v), acq.dynamic_angle, acq.tr))
            .collect();
        signals.push(average(&s));
        conc.push(average(&c));
    }
    let images = acq
        .vfa_angles
        .iter()
        .map(|&a| labels.iter().map(|t| {
            let p = spec.params(*t);
            spgr_signal(p.m, p.t1, a, acq.tr)
        }).collect())
        .collect();
    let vfa = VfaSeries::new(spec.nx, spec.ny, acq.vfa_angles.clone(), acq.tr, images)?;
    let pick = |f: fn(&TissueParams) -> f64| labels.iter().map(|t| f(&spec.params(*t))).collect();
    Ok((
        signals,
        conc,
        vec![
            (MapKind::Ktrans, pick(|p| p.ktrans)),
            (MapKind::Vp, pick(|p| p.vp)),
            (MapKind::T1, pick(|p| p.t1)),
            (MapKind::M, pick(|p| p.m)),
        ],
        Some(vfa),
    ))
}

/// Writes `x,y` rows.
pub fn write_region_csv(region: &[(usize, usize)], mut w: impl Write) -> Result<()> {
    writeln!(w, "x,y")?;
    for (x, y) in region {
        writeln!(w, "{x},{y}")?;
    }
    Ok(())
}

/// Reads `x,y` rows; a header line is optional.
pub fn read_region_csv(r: impl BufRead) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let parse = |s: Option<&str>| {
            s.and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad region line {}: {line:?}", n + 1)))
        };
        let mut parts = line.split(',');
        out.push((parse(parts.next())?, parse(parts.next())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_cover_all_labels() {
        for spec in [PhantomSpec::dsc_default(), PhantomSpec::dce_default()] {
            spec.validate().unwrap();
            let labels = spec.label_map();
            for t in Tissue::ALL {
                assert!(labels.contains(&t), "{t:?} missing");
            }
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PhantomSpec::dce_default();
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn zero_flow_label_is_flat_and_signal_positive() {
        let ph = generate(&PhantomSpec::dsc_default()).unwrap();
        let d = ph.truth.dims();
        let bg = ph.voxels_of(Tissue::Background)[0];
        let c = ph.truth.voxel_curve(bg % d.nx, bg / d.nx);
        assert!(c.iter().all(|&v| v == c[0]));
        assert!(ph.truth.data().iter().all(|z| z.re > 0.0));
        // flat before arrival
        let gm = ph.voxels_of(Tissue::GrayMatter)[0];
        let g = ph.truth.voxel_curve(gm % d.nx, gm / d.nx);
        assert!(g[..8].iter().all(|&v| v == g[0]));
        assert!(g.iter().any(|&v| v < 0.95 * g[0]));
    }

    #[test]
    fn deterministic_under_seed() {
        let mut spec = PhantomSpec::dsc_default();
        spec.noise_sigma = 0.01;
        spec.seed = 5;
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.truth.data(), b.truth.data());
        spec.seed = 6;
        assert_ne!(generate(&spec).unwrap().truth.data(), a.truth.data());
    }

    #[test]
    fn missing_vessel_is_rejected() {
        let mut spec = PhantomSpec::dsc_default();
        spec.ellipses.retain(|e| e.tissue != Tissue::Vessel);
        assert!(matches!(generate(&spec), Err(Error::EmptyVessel)));
    }

    #[test]
    fn dsc_area_identity() {
        let mut spec = PhantomSpec::dsc_default();
        spec.dt = 0.5;
        spec.t = 140;
        let ph = generate(&spec).unwrap();
        let ca = spec.aif.curve().sample(spec.t, spec.dt);
        let area_a: f64 = ca.iter().sum::<f64>() * spec.dt;
        for t in [Tissue::WhiteMatter, Tissue::GrayMatter, Tissue::Tumor] {
            let i = ph.voxels_of(t)[0];
            let area_t: f64 = ph.concentrations[i].iter().sum::<f64>() * spec.dt;
            let cbv = ph.map(MapKind::Cbv).unwrap().data[i] as f64;
            assert!((area_t - cbv * area_a).abs() <= 0.02 * area_t, "{t:?}");
        }
    }

    #[test]
    fn dce_linear_in_parameters() {
        let spec = PhantomSpec::dce_default();
        let ph = generate(&spec).unwrap();
        let cp = spec.aif.curve().sample(spec.t, spec.dt);
        let int = cumulative_integral_minutes(&cp, spec.dt);
        let i = ph.voxels_of(Tissue::Tumor)[0];
        let p = spec.params(Tissue::Tumor);
        for (k, c) in ph.concentrations[i].iter().enumerate() {
            assert!((c - (p.vp * cp[k] + p.ktrans * int[k])).abs() < 1e-12);
        }
        let v = ph.voxels_of(Tissue::Vessel)[0];
        assert_eq!(ph.concentrations[v], cp);
        assert!(ph.vfa.is_some());
    }

    #[test]
    fn frame_averaging_keeps_length() {
        let mut spec = PhantomSpec::dce_default();
        spec.dce.average_frames = 5;
        let ph = generate(&spec).unwrap();
        assert_eq!(ph.truth.dims().t, spec.t);
    }

    #[test]
    fn region_csv_round_trip() {
        let region = vec![(1, 2), (3, 4)];
        let mut buf = Vec::new();
        write_region_csv(&region, &mut buf).unwrap();
        assert_eq!(read_region_csv(buf.as_slice()).unwrap(), region);
        assert!(read_region_csv("1,x\n".as_bytes()).is_err());
    }
}
