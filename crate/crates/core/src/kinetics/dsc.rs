//! Dynamic susceptibility contrast: signal drop to concentration, smooth
//! arterial input, circulant truncated-SVD deconvolution and CBF/CBV/MTT.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{Dyn, Owned, OMatrix, OVector, U4};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::{check_region, mean_curve};
use crate::error::{Error, Result};
use crate::volume::{ImageSeries, MapKind, ParameterMap, TimeCurve};

/// CBF at or below this value leaves MTT undefined (reported as 0).
pub const CBF_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DscConfig {
    /// Echo time in seconds.
    pub te: f64,
    pub baseline_frames: usize,
    /// Singular values below this fraction of the largest are discarded.
    pub svd_threshold: f64,
    pub pad_factor: usize,
}

impl Default for DscConfig {
    fn default() -> Self {
        Self {
            te: 0.030,
            baseline_frames: 8,
            svd_threshold: 0.10,
            pad_factor: 2,
        }
    }
}

impl DscConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.te > 0.0) || self.baseline_frames == 0 || !(0.0..1.0).contains(&self.svd_threshold) || self.pad_factor == 0 {
            return Err(Error::InvalidArgument(format!("invalid DSC config {self:?}")));
        }
        Ok(())
    }
}

fn baseline(values: &[f64], frames: usize) -> f64 {
    let n = frames.min(values.len());
    values[..n].iter().sum::<f64>() / n as f64
}

/// `C(t) = −ln(S(t)/S0)/TE` with `S0` the mean of the baseline frames.
pub fn signal_to_concentration(s: &TimeCurve, cfg: &DscConfig) -> Result<TimeCurve> {
    let s0 = baseline(s.values(), cfg.baseline_frames);
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(Error::InvalidBaseline);
    }
    let c = s
        .values()
        .iter()
        .map(|&v| -(v.max(1e-6 * s0) / s0).ln() / cfg.te)
        .collect();
    TimeCurve::new(c, s.dt())
}

/// `k (t − t0)^a exp(−(t − t0)/b)` for `t > t0`, zero before.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaVariateFit {
    pub k_scale: f64,
    pub t0: f64,
    pub a: f64,
    pub b: f64,
    /// Root mean squared residual over the fitted samples.
    pub residual: f64,
}

impl GammaVariateFit {
    pub fn new(k_scale: f64, t0: f64, a: f64, b: f64) -> Self {
        Self {
            k_scale,
            t0,
            a,
            b,
            residual: 0.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        gamma_variate(t, [self.k_scale, self.t0, self.a, self.b])
    }

    /// Samples at `i·dt` for `i < n`.
    pub fn sample(&self, n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| self.eval(i as f64 * dt)).collect()
    }

    pub fn peak(&self) -> f64 {
        self.k_scale * (self.a * self.b).powf(self.a) * (-self.a).exp()
    }
}

fn gamma_variate(t: f64, p: [f64; 4]) -> f64 {
    let tau = t - p[1];
    if tau <= 0.0 {
        0.0
    } else {
        p[0] * tau.powf(p[2]) * (-tau / p[3]).exp()
    }
}

struct GammaProblem {
    t: Vec<f64>,
    c: Vec<f64>,
    p: OVector<f64, U4>,
}

impl LeastSquaresProblem<f64, Dyn, U4> for GammaProblem {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U4>;
    type ParameterStorage = Owned<f64, U4>;

    fn set_params(&mut self, x: &OVector<f64, U4>) {
        self.p.copy_from(x);
    }

    fn params(&self) -> OVector<f64, U4> {
        self.p
    }

    fn residuals(&self) -> Option<OVector<f64, Dyn>> {
        let p = natural(&self.p);
        Some(OVector::<f64, Dyn>::from_iterator(
            self.t.len(),
            self.t.iter().zip(&self.c).map(|(&t, &c)| gamma_variate(t, p) - c),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U4>> {
        let [k, t0, a, b] = natural(&self.p);
        let mut j = OMatrix::<f64, Dyn, U4>::zeros(self.t.len());
        for (r, &t) in self.t.iter().enumerate() {
            let tau = t - t0;
            if tau <= 0.0 {
                continue;
            }
            let g = tau.powf(a) * (-tau / b).exp();
            let f = k * g;
            j[(r, 0)] = g;
            j[(r, 1)] = -f * (a / tau - 1.0 / b);
            j[(r, 2)] = a * f * tau.ln();
            j[(r, 3)] = f * tau / b;
        }
        Some(j)
    }
}

/// Shape parameters are optimized as logarithms so they stay positive.
fn natural(p: &OVector<f64, U4>) -> [f64; 4] {
    [p[0], p[1], p[2].exp(), p[3].exp()]
}

const GAMMA_MAX_ITERS: usize = 200;

/// Least-squares gamma-variate fit over the samples up to twice the peak time.
pub fn fit_gamma_variate(c: &TimeCurve) -> Result<GammaVariateFit> {
    let v = c.values();
    let dt = c.dt();
    let (ip, &cmax) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::AifPeakNotFound)?;
    if !(cmax > 0.0 && cmax.is_finite()) || ip == 0 {
        return Err(Error::AifPeakNotFound);
    }
    let onset = (0..ip).rev().find(|&i| v[i] < 0.1 * cmax);
    let pre: &[f64] = match onset {
        Some(i) => &v[..=i],
        None => &[],
    };
    if pre.len() >= 2 {
        let m = pre.iter().sum::<f64>() / pre.len() as f64;
        let sd = (pre.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (pre.len() - 1) as f64).sqrt();
        if cmax <= 3.0 * sd {
            return Err(Error::AifPeakNotFound);
        }
    }
    let t_peak = ip as f64 * dt;
    let (t, cs): (Vec<f64>, Vec<f64>) = c
        .times()
        .zip(v.iter().copied())
        .filter(|(t, _)| *t <= 2.0 * t_peak)
        .unzip();
    let n = t.len();
    let onset_t = onset.map_or(-dt, |i| i as f64 * dt);
    let lm = LevenbergMarquardt::new()
        .with_ftol(1e-10)
        .with_xtol(1e-10)
        .with_gtol(1e-10)
        .with_patience(GAMMA_MAX_ITERS);
    // restarts with earlier onsets when the first start stalls on a sample time
    let mut best: Option<GammaVariateFit> = None;
    let mut worst_residual = f64::NAN;
    for shift in [0.0, 0.5, 1.0] {
        let t0 = onset_t - shift * dt;
        let a = 3.0;
        let b = (t_peak - t0) / a;
        let k = cmax / ((a * b).powf(a) * (-a).exp());
        let problem = GammaProblem {
            t: t.clone(),
            c: cs.clone(),
            p: OVector::<f64, U4>::new(k, t0, a.ln(), b.ln()),
        };
        let (problem, report) = lm.minimize(problem);
        let residual = (2.0 * report.objective_function / n as f64).sqrt();
        let p = natural(&problem.params());
        let fit = GammaVariateFit {
            k_scale: p[0],
            t0: p[1],
            a: p[2],
            b: p[3],
            residual,
        };
        let sane = fit.k_scale >= 0.0 && p.iter().all(|x| x.is_finite()) && residual.is_finite();
        if sane && report.termination.was_successful() {
            if best.as_ref().is_none_or(|f| residual < f.residual) {
                best = Some(fit);
            }
            if shift == 0.0 {
                break;
            }
        } else {
            worst_residual = residual;
        }
    }
    best.ok_or(Error::FitNotConverged { residual: worst_residual })
}

/// Truncated pseudo-inverse of the block-circulant convolution by one
/// arterial curve.
///
/// The circulant matrix built from the zero-padded `dt·C_a` is diagonalized
/// by the DFT, so its singular values are the spectrum magnitudes `|Â_k|` and
/// the truncated SVD inverse acts as `Ĉ_k / Â_k` on the retained modes.
#[derive(Clone)]
pub struct CircularDeconvolver {
    n: usize,
    padded: usize,
    inverse: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CircularDeconvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CircularDeconvolver")
            .field("n", &self.n)
            .field("padded", &self.padded)
            .finish()
    }
}

impl CircularDeconvolver {
    pub fn new(ca: &[f64], dt: f64, threshold: f64, pad_factor: usize) -> Result<Self> {
        if ca.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroAif);
        }
        let n = ca.len();
        let padded = n * pad_factor.max(1);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(padded);
        let inv = planner.plan_fft_inverse(padded);
        let mut spec: Vec<Complex64> = ca
            .iter()
            .map(|&v| Complex64::new(v * dt, 0.0))
            .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
            .take(padded)
            .collect();
        fwd.process(&mut spec);
        let smax = spec.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let cut = threshold * smax;
        let inverse = spec
            .iter()
            .map(|z| {
                let s = z.norm();
                if s > 0.0 && s >= cut {
                    1.0 / z
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Ok(Self {
            n,
            padded,
            inverse,
            fwd,
            inv,
        })
    }

    /// Singular values of the circulant matrix, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .inverse
            .iter()
            .filter(|z| z.norm() > 0.0)
            .map(|z| 1.0 / z.norm())
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// `k(t) = CBF·R(t)` on the original `n` samples.
    pub fn deconvolve(&self, ct: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = ct
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
            .take(self.padded)
            .collect();
        self.fwd.process(&mut buf);
        for (b, w) in buf.iter_mut().zip(&self.inverse) {
            *b *= w;
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        buf[..self.n].iter().map(|z| z.re * scale).collect()
    }
}

/// Residue-weighted flow `k(t)` from tissue and arterial curves.
pub fn csvd_deconvolve(ct: &TimeCurve, ca: &TimeCurve, cfg: &DscConfig) -> Result<TimeCurve> {
    if ct.len() != ca.len() || (ct.dt() - ca.dt()).abs() > 1e-12 * ct.dt() {
        return Err(Error::DimMismatch {
            expected: format!("{} samples at dt {}", ca.len(), ca.dt()),
            found: format!("{} samples at dt {}", ct.len(), ct.dt()),
        });
    }
    let d = CircularDeconvolver::new(ca.values(), ca.dt(), cfg.svd_threshold, cfg.pad_factor)?;
    TimeCurve::new(d.deconvolve(ct.values()), ct.dt())
}

/// Perfusion parameters of one tissue curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelPerfusion {
    pub cbf: f64,
    pub cbv: f64,
    pub mtt: f64,
}

/// CBF = max k, CBV = ΣC_t / ΣC_a, MTT = CBV/CBF.
pub fn voxel_perfusion(ct: &[f64], ca_area: f64, deconv: &CircularDeconvolver) -> VoxelPerfusion {
    if ct.iter().all(|&v| v == 0.0) {
        return VoxelPerfusion {
            cbf: 0.0,
            cbv: 0.0,
            mtt: 0.0,
        };
    }
    let k = deconv.deconvolve(ct);
    let cbf = k.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let cbv = ct.iter().sum::<f64>() / ca_area;
    let mtt = if cbf > CBF_FLOOR { cbv / cbf } else { 0.0 };
    VoxelPerfusion { cbf, cbv, mtt }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DscMaps {
    pub cbf: ParameterMap,
    pub cbv: ParameterMap,
    pub mtt: ParameterMap,
    pub aif: GammaVariateFit,
}

/// Concentration curves of every voxel; voxels without a positive baseline
/// signal (background) get an all-zero curve.
pub fn concentration_curves(series: &ImageSeries, cfg: &DscConfig) -> Result<Vec<Vec<f64>>> {
    let dims = series.dims();
    (0..dims.frame_len())
        .into_par_iter()
        .map(|i| {
            let s = TimeCurve::new(series.voxel_curve(i % dims.nx, i / dims.nx), series.dt())?;
            match signal_to_concentration(&s, cfg) {
                Ok(c) => Ok(c.into_values()),
                Err(Error::InvalidBaseline) => Ok(vec![0.0; dims.t]),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Arterial input from the mean concentration over `aif_region`, fitted with a
/// gamma variate.
pub fn arterial_input(series: &ImageSeries, aif_region: &[(usize, usize)], cfg: &DscConfig) -> Result<GammaVariateFit> {
    check_region(aif_region, series.dims())?;
    let curves = aif_region
        .iter()
        .map(|&(x, y)| {
            let s = TimeCurve::new(series.voxel_curve(x, y), series.dt())?;
            signal_to_concentration(&s, cfg).map(TimeCurve::into_values)
        })
        .collect::<Result<Vec<_>>>()?;
    fit_gamma_variate(&TimeCurve::new(mean_curve(&curves), series.dt())?)
}

pub fn compute_dsc_maps(series: &ImageSeries, aif_region: &[(usize, usize)], cfg: &DscConfig) -> Result<DscMaps> {
    cfg.validate()?;
    let dims = series.dims();
    let dt = series.dt();
    let aif = arterial_input(series, aif_region, cfg)?;
    let ca = aif.sample(dims.t, dt);
    let ca_area: f64 = ca.iter().sum();
    if !(ca_area > 0.0) {
        return Err(Error::ZeroAif);
    }
    let deconv = CircularDeconvolver::new(&ca, dt, cfg.svd_threshold, cfg.pad_factor)?;
    let curves = concentration_curves(series, cfg)?;
    let voxels: Vec<VoxelPerfusion> = curves
        .par_iter()
        .map(|c| voxel_perfusion(c, ca_area, &deconv))
        .collect();
    let map = |kind, f: fn(&VoxelPerfusion) -> f64| {
        ParameterMap::new(dims.nx, dims.ny, kind, voxels.iter().map(|v| f(v) as f32).collect())
    };
    Ok(DscMaps {
        cbf: map(MapKind::Cbf, |v| v.cbf)?,
        cbv: map(MapKind::Cbv, |v| v.cbv)?,
        mtt: map(MapKind::Mtt, |v| v.mtt)?,
        aif,
    })
}
