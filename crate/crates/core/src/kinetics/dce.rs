//! Dynamic contrast enhancement: variable-flip-angle T1 mapping, spoiled
//! gradient-echo signal inversion and Patlak fitting.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{Dyn, Owned, OMatrix, OVector, U2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_region, mean_curve};
use crate::error::{dims_mismatch, Error, Result};
use crate::volume::{ImageSeries, MapKind, ParameterMap, TimeCurve};

pub const DEFAULT_VFA_ANGLES: [f64; 6] = [2.0, 5.0, 10.0, 15.0, 20.0, 30.0];

/// `M sinα (1 − E)/(1 − E cosα)` with `E = exp(−TR/T1)`.
pub fn spgr_signal(m: f64, t1: f64, alpha_deg: f64, tr: f64) -> f64 {
    let (s, c) = alpha_deg.to_radians().sin_cos();
    let e = (-tr / t1).exp();
    m * s * (1.0 - e) / (1.0 - e * c)
}

/// Magnitude images of one slice at several flip angles.
#[derive(Clone, Debug, PartialEq)]
pub struct VfaSeries {
    pub nx: usize,
    pub ny: usize,
    pub angles_deg: Vec<f64>,
    pub tr: f64,
    /// One `nx·ny` image per angle.
    pub images: Vec<Vec<f64>>,
}

impl VfaSeries {
    pub fn new(nx: usize, ny: usize, angles_deg: Vec<f64>, tr: f64, images: Vec<Vec<f64>>) -> Result<Self> {
        let mut distinct = angles_deg.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 3 || angles_deg.iter().any(|&a| !(a > 0.0 && a <= 90.0)) || !(tr > 0.0) {
            return Err(Error::InvalidArgument(
                "VFA needs at least 3 distinct angles in (0, 90] degrees and TR > 0".into(),
            ));
        }
        if images.len() != angles_deg.len() {
            return Err(dims_mismatch(angles_deg.len(), images.len()));
        }
        if let Some(img) = images.iter().find(|i| i.len() != nx * ny) {
            return Err(dims_mismatch(nx * ny, img.len()));
        }
        Ok(Self {
            nx,
            ny,
            angles_deg,
            tr,
            images,
        })
    }

    /// Loads the angle images from a float or complex container of shape
    /// `nx × ny × n_angles` (magnitudes are taken).
    pub fn from_series(series: &ImageSeries, angles_deg: Vec<f64>, tr: f64) -> Result<Self> {
        let d = series.dims();
        let images = (0..d.t)
            .map(|a| {
                series
                    .frame(a)
                    .iter()
                    .map(|z| (z.re as f64).hypot(z.im as f64))
                    .collect()
            })
            .collect();
        Self::new(d.nx, d.ny, angles_deg, tr, images)
    }

    pub fn voxel(&self, i: usize) -> Vec<f64> {
        self.images.iter().map(|img| img[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DceConfig {
    /// Relaxivity in s⁻¹·mM⁻¹.
    pub r1: f64,
    pub dynamic_angle: f64,
    pub tr: f64,
    pub baseline_frames: usize,
}

impl Default for DceConfig {
    fn default() -> Self {
        Self {
            r1: 4.5,
            dynamic_angle: 10.0,
            tr: 0.006,
            baseline_frames: 5,
        }
    }
}

impl DceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > 0.0) || !(self.tr > 0.0) || !(self.dynamic_angle > 0.0 && self.dynamic_angle <= 90.0) || self.baseline_frames == 0 {
            return Err(Error::InvalidArgument(format!("invalid DCE config {self:?}")));
        }
        Ok(())
    }
}

struct SpgrProblem<'a> {
    angles: &'a [f64],
    signals: &'a [f64],
    tr: f64,
    p: OVector<f64, U2>,
}

impl LeastSquaresProblem<f64, Dyn, U2> for SpgrProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U2>;
    type ParameterStorage = Owned<f64, U2>;

    fn set_params(&mut self, x: &OVector<f64, U2>) {
        self.p.copy_from(x);
    }

    fn params(&self) -> OVector<f64, U2> {
        self.p
    }

    fn residuals(&self) -> Option<OVector<f64, Dyn>> {
        let (m, t1) = (self.p[0], self.p[1]);
        if t1 <= 0.0 {
            return None;
        }
        Some(OVector::<f64, Dyn>::from_iterator(
            self.angles.len(),
            self.angles
                .iter()
                .zip(self.signals)
                .map(|(&a, &s)| spgr_signal(m, t1, a, self.tr) - s),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U2>> {
        let (m, t1) = (self.p[0], self.p[1]);
        if t1 <= 0.0 {
            return None;
        }
        let e = (-self.tr / t1).exp();
        let de_dt1 = e * self.tr / (t1 * t1);
        let mut j = OMatrix::<f64, Dyn, U2>::zeros(self.angles.len());
        for (r, &a) in self.angles.iter().enumerate() {
            let (s, c) = a.to_radians().sin_cos();
            let den = 1.0 - e * c;
            j[(r, 0)] = s * (1.0 - e) / den;
            // d/dE [(1 − E)/(1 − E c)] = (c − 1)/(1 − E c)²
            j[(r, 1)] = m * s * (c - 1.0) / (den * den) * de_dt1;
        }
        Some(j)
    }
}

/// `(M, T1)` for one voxel, or `None` when the fit fails.
pub fn fit_t1_voxel(signals: &[f64], angles_deg: &[f64], tr: f64) -> Option<(f64, f64)> {
    if signals.iter().all(|&s| s == 0.0) || signals.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return None;
    }
    // S/sinα = E·S/tanα + M(1 − E)
    let pts: Vec<(f64, f64)> = signals
        .iter()
        .zip(angles_deg)
        .map(|(&s, &a)| {
            let r = a.to_radians();
            (s / r.tan(), s / r.sin())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let e = slope.clamp(1e-6, 1.0 - 1e-9);
    let t1_init = -tr / e.ln();
    let m_init = if intercept > 0.0 { intercept / (1.0 - e) } else { signals.iter().copied().fold(0.0, f64::max) };

    let problem = SpgrProblem {
        angles: angles_deg,
        signals,
        tr,
        p: OVector::<f64, U2>::new(m_init, t1_init),
    };
    let lm = LevenbergMarquardt::new()
        .with_ftol(1e-10)
        .with_xtol(1e-10)
        .with_gtol(1e-12)
        .with_patience(50 / 3 + 1);
    let (problem, report) = lm.minimize(problem);
    let p = problem.params();
    let (m, t1) = (p[0], p[1]);
    if report.termination.was_usage_issue() || !(m > 0.0 && t1 > 0.0 && m.is_finite() && t1.is_finite()) {
        return None;
    }
    Some((m, t1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct T1Maps {
    pub t1: ParameterMap,
    pub m: ParameterMap,
    /// Voxels whose fit failed; their maps hold 0.
    pub flagged: usize,
}

pub fn fit_t1_vfa(vfa: &VfaSeries) -> Result<T1Maps> {
    let n = vfa.nx * vfa.ny;
    let fits: Vec<Option<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| fit_t1_voxel(&vfa.voxel(i), &vfa.angles_deg, vfa.tr))
        .collect();
    let flagged = fits.iter().filter(|f| f.is_none()).count();
    let t1 = fits.iter().map(|f| f.map_or(0.0, |v| v.1) as f32).collect();
    let m = fits.iter().map(|f| f.map_or(0.0, |v| v.0) as f32).collect();
    Ok(T1Maps {
        t1: ParameterMap::new(vfa.nx, vfa.ny, MapKind::T1, t1)?,
        m: ParameterMap::new(vfa.nx, vfa.ny, MapKind::M, m)?,
        flagged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationCurve {
    pub curve: TimeCurve,
    /// Samples whose inverted `E` left `(0, 1)` and was clamped.
    pub clamped: usize,
    /// Baseline signal deviates from the `(m, t1_0)` prediction by more than 20%.
    pub baseline_mismatch: bool,
}

const E_GUARD: f64 = 1e-12;

/// Inverts the SPGR equation per sample and converts `T1(t)` to
/// `C = (1/r1)(1/T1 − 1/T1_0)`.
pub fn dynamic_signal_to_concentration(s: &TimeCurve, m: f64, t1_0: f64, cfg: &DceConfig) -> Result<ConcentrationCurve> {
    if !(m > 0.0 && t1_0 > 0.0) {
        return Err(Error::InvalidArgument(format!("need M > 0 and T1 > 0, got {m}, {t1_0}")));
    }
    let (sa, ca) = cfg.dynamic_angle.to_radians().sin_cos();
    let mut clamped = 0;
    let c = s
        .values()
        .iter()
        .map(|&v| {
            let mut e = (v - m * sa) / (v * ca - m * sa);
            if !(e > 0.0 && e < 1.0) {
                clamped += 1;
                e = if e.is_nan() { 1.0 - E_GUARD } else { e.clamp(E_GUARD, 1.0 - E_GUARD) };
            }
            let t1 = -cfg.tr / e.ln();
            (1.0 / t1 - 1.0 / t1_0) / cfg.r1
        })
        .collect();
    let predicted = spgr_signal(m, t1_0, cfg.dynamic_angle, cfg.tr);
    let nb = cfg.baseline_frames.min(s.len());
    let observed = s.values()[..nb].iter().sum::<f64>() / nb as f64;
    Ok(ConcentrationCurve {
        curve: TimeCurve::new(c, s.dt())?,
        clamped,
        baseline_mismatch: (observed - predicted).abs() > 0.2 * predicted,
    })
}

/// Running trapezoid integral with the time step converted to minutes.
pub fn cumulative_integral_minutes(cp: &[f64], dt_seconds: f64) -> Vec<f64> {
    let h = dt_seconds / 60.0;
    let mut out = Vec::with_capacity(cp.len());
    let mut acc = 0.0;
    for i in 0..cp.len() {
        if i > 0 {
            acc += 0.5 * h * (cp[i - 1] + cp[i]);
        }
        out.push(acc);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PatlakFit {
    /// min⁻¹
    pub ktrans: f64,
    pub vp: f64,
    pub residual: f64,
}

/// Precomputed regressors for one plasma curve.
#[derive(Clone, Debug)]
pub struct PatlakModel {
    cp: Vec<f64>,
    integral: Vec<f64>,
    inv: [[f64; 2]; 2],
}

impl PatlakModel {
    pub fn new(cp: &TimeCurve) -> Result<Self> {
        let v = cp.values().to_vec();
        let integral = cumulative_integral_minutes(&v, cp.dt());
        let s11: f64 = v.iter().map(|x| x * x).sum();
        let s12: f64 = v.iter().zip(&integral).map(|(a, b)| a * b).sum();
        let s22: f64 = integral.iter().map(|x| x * x).sum();
        let det = s11 * s22 - s12 * s12;
        if !(s11 > 0.0 && s22 > 0.0) || det <= 1e-12 * s11 * s22 {
            return Err(Error::DegenerateAif);
        }
        Ok(Self {
            cp: v,
            integral,
            inv: [[s22 / det, -s12 / det], [-s12 / det, s11 / det]],
        })
    }

    /// Unclamped least-squares `(vp, ktrans)`.
    pub fn solve(&self, ct: &[f64]) -> (f64, f64) {
        let b1: f64 = self.cp.iter().zip(ct).map(|(a, b)| a * b).sum();
        let b2: f64 = self.integral.iter().zip(ct).map(|(a, b)| a * b).sum();
        (
            self.inv[0][0] * b1 + self.inv[0][1] * b2,
            self.inv[1][0] * b1 + self.inv[1][1] * b2,
        )
    }

    pub fn fit(&self, ct: &[f64]) -> PatlakFit {
        let (vp, ktrans) = self.solve(ct);
        let (vp, ktrans) = (vp.clamp(0.0, 1.0), ktrans.max(0.0));
        let ss: f64 = ct
            .iter()
            .zip(self.cp.iter().zip(&self.integral))
            .map(|(c, (p, i))| {
                let r = c - vp * p - ktrans * i;
                r * r
            })
            .sum();
        PatlakFit {
            ktrans,
            vp,
            residual: (ss / ct.len() as f64).sqrt(),
        }
    }
}

/// `C_t(t) = vp C_p(t) + Ktrans ∫₀ᵗ C_p`, least squares with clamped output.
pub fn patlak_fit(ct: &TimeCurve, cp: &TimeCurve) -> Result<PatlakFit> {
    if ct.len() != cp.len() {
        return Err(dims_mismatch(cp.len(), ct.len()));
    }
    Ok(PatlakModel::new(cp)?.fit(ct.values()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DceMaps {
    pub ktrans: ParameterMap,
    pub vp: ParameterMap,
    pub t1: ParameterMap,
    pub m: ParameterMap,
    pub flagged_t1: usize,
    pub clamped_samples: usize,
    pub baseline_mismatches: usize,
}

/// T1 and M from the VFA images, plasma curve from `aif_region`, then a
/// Patlak fit per voxel. Voxels without a valid T1 are left at 0.
pub fn compute_dce_maps(series: &ImageSeries, vfa: &VfaSeries, aif_region: &[(usize, usize)], cfg: &DceConfig) -> Result<DceMaps> {
    cfg.validate()?;
    let dims = series.dims();
    if (vfa.nx, vfa.ny) != (dims.nx, dims.ny) {
        return Err(dims_mismatch((dims.nx, dims.ny), (vfa.nx, vfa.ny)));
    }
    check_region(aif_region, dims)?;
    let t1maps = fit_t1_vfa(vfa)?;
    let dt = series.dt();
    let curves: Vec<Option<ConcentrationCurve>> = (0..dims.frame_len())
        .into_par_iter()
        .map(|i| {
            let (m, t1) = (t1maps.m.data[i] as f64, t1maps.t1.data[i] as f64);
            if t1 <= 0.0 || m <= 0.0 {
                return Ok(None);
            }
            let s = TimeCurve::new(series.voxel_curve(i % dims.nx, i / dims.nx), dt)?;
            dynamic_signal_to_concentration(&s, m, t1, cfg).map(Some)
        })
        .collect::<Result<_>>()?;
    let arterial = aif_region
        .iter()
        .map(|&(x, y)| {
            curves[y * dims.nx + x]
                .as_ref()
                .map(|c| c.curve.values().to_vec())
                .ok_or(Error::DegenerateAif)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = PatlakModel::new(&TimeCurve::new(mean_curve(&arterial), dt)?)?;
    let fits: Vec<PatlakFit> = curves
        .par_iter()
        .map(|c| match c {
            Some(c) => model.fit(c.curve.values()),
            None => PatlakFit {
                ktrans: 0.0,
                vp: 0.0,
                residual: 0.0,
            },
        })
        .collect();
    let clamped_samples = curves.iter().flatten().map(|c| c.clamped).sum();
    let baseline_mismatches = curves.iter().flatten().filter(|c| c.baseline_mismatch).count();
    Ok(DceMaps {
        ktrans: ParameterMap::new(dims.nx, dims.ny, MapKind::Ktrans, fits.iter().map(|f| f.ktrans as f32).collect())?,
        vp: ParameterMap::new(dims.nx, dims.ny, MapKind::Vp, fits.iter().map(|f| f.vp as f32).collect())?,
        t1: t1maps.t1,
        m: t1maps.m,
        flagged_t1: t1maps.flagged,
        clamped_samples,
        baseline_mismatches,
    })
}
