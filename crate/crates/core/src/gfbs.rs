//! Joint reconstruction by generalized forward-backward splitting.
//!
//! Minimizes `½‖F_u X − Y‖² + λ1 R_L(X) + λ2 R_NL(X)`. Each iteration takes
//! one gradient step on the fidelity, applies the dynamic-TV and nonlocal
//! proximal maps to their own auxiliary points (concurrently), relaxes the
//! auxiliaries by `α_k` and averages them with weights `(w1, w2)`:
//!
//! ```text
//! g   = F_u^H (F_u x − Y)
//! z_i ← z_i + α_k (prox_i(2x − z_i − γ g) − x)
//! x   ← w1 z1 + w2 z2
//! ```
//!
//! The dynamic-TV map is the image-domain FIRLS solve with TV weight scaled by
//! `γ/w1`. The nonlocal map is one relaxed NLM filtering,
//! `v + 2λ2 (NLM(v) − v)`, with the decay fixed from the zero-filled start.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::metrics::{format_db, psnr_from_rmse, rmse_cube};
use crate::prox_dtv::{prox_dtv_series, DiffOperators, DtvConfig, DtvMode, ReferenceImage};
use crate::prox_nlm::{nlm_filter_3d, nonlocal_penalty, NlmConfig};
use crate::sampler::{Encoder, ReferenceScan, SamplingMask};
use crate::volume::{Cube, ImageSeries, KSpaceSeries};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GfbsConfig {
    pub w1: f64,
    pub w2: f64,
    pub alpha0: f64,
    /// Grow `α_k` towards 1; otherwise `α_k = alpha0` throughout.
    pub adaptive_alpha: bool,
    pub gamma: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub dtv: DtvConfig,
    pub nlm: NlmConfig,
}

impl Default for GfbsConfig {
    fn default() -> Self {
        Self {
            w1: 0.7,
            w2: 0.3,
            alpha0: 0.9,
            adaptive_alpha: true,
            gamma: 1.0,
            max_iters: 50,
            rel_tol: 1e-6,
            dtv: DtvConfig::default(),
            nlm: NlmConfig::default(),
        }
    }
}

impl GfbsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w1 > 0.0
            && self.w2 > 0.0
            && (self.w1 + self.w2 - 1.0).abs() < 1e-9
            && self.alpha0 > 0.0
            && self.alpha0 < 1.0
            && self.gamma > 0.0
            && self.gamma < 2.0
            && self.max_iters > 0
            && self.rel_tol >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid reconstruction config: w1={} w2={} alpha0={} gamma={} max_iters={}",
                self.w1, self.w2, self.alpha0, self.gamma, self.max_iters
            )));
        }
        self.dtv.validate()?;
        self.nlm.validate()
    }

    pub fn alpha(&self, k: usize) -> f64 {
        if self.adaptive_alpha {
            adaptive_alpha(k, self.alpha0)
        } else {
            self.alpha0
        }
    }
}

/// Relaxation for iteration `k ≥ 1`:
/// `α_k = α0 + (1 − α0)(t_{k−1} − 1)/t_k` with `t_0 = 1` and
/// `t_k = (1 + √(1 + 4 t_{k−1}²))/2`.
pub fn adaptive_alpha(k: usize, alpha0: f64) -> f64 {
    let mut t_prev = 1.0f64;
    let mut t = 1.0f64;
    for _ in 0..k.max(1) {
        t_prev = t;
        t = 0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt());
    }
    alpha0 + (1.0 - alpha0) * (t_prev - 1.0) / t
}

/// `F_u^H (F_u x − Y)`.
pub fn data_gradient(x: &Cube, y: &Cube, mask: &SamplingMask) -> Result<Cube> {
    Encoder::new(mask).gradient(x, y)
}

/// Reference for iteration `k`: the supplied initial image at `k = 0`, the
/// temporal mean of `x` afterwards.
pub fn update_reference(x: &Cube, k: usize, initial: &ReferenceImage) -> ReferenceImage {
    if k == 0 {
        initial.clone()
    } else {
        ReferenceImage {
            nx: x.dims.nx,
            ny: x.dims.ny,
            data: x.temporal_mean(),
        }
    }
}

/// `Σ_t TV(x_t − x̄)`.
pub fn dynamic_tv(x: &Cube, xbar: &ReferenceImage) -> f64 {
    let ops = DiffOperators::new(x.dims.nx, x.dims.ny);
    x.frames()
        .map(|f| {
            let d: Vec<Complex64> = f.iter().zip(&xbar.data).map(|(a, b)| a - b).collect();
            ops.tv(&d)
        })
        .sum()
}

/// `½‖F_u x − Y‖² + λ1 R_L(x)`, the quantity tracked per iteration.
pub fn objective(x: &Cube, y: &Cube, mask: &SamplingMask, xbar: &ReferenceImage, lambda1: f64) -> Result<f64> {
    Ok(Encoder::new(mask).data_misfit(x, y)? + lambda1 * dynamic_tv(x, xbar))
}

/// The complete cost including `λ2 R_NL(x)` with weights taken from `x`.
pub fn full_objective(
    x: &Cube,
    y: &Cube,
    mask: &SamplingMask,
    xbar: &ReferenceImage,
    cfg: &GfbsConfig,
    h: f64,
) -> Result<f64> {
    Ok(objective(x, y, mask, xbar, cfg.dtv.lambda1)? + cfg.nlm.lambda2 * nonlocal_penalty(x, &cfg.nlm, h)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    #[serde(rename = "tol")]
    Tolerance,
    #[serde(rename = "max_iters")]
    MaxIters,
}

impl StopReason {
    pub fn label(&self) -> &'static str {
        match self {
            StopReason::Tolerance => "tol",
            StopReason::MaxIters => "max_iters",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub objective: f64,
    pub rmse: Option<f64>,
    pub psnr: Option<f64>,
    pub alpha: f64,
    pub rel_change: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub stop_reason: Option<StopReason>,
}

impl History {
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iter,objective,rmse,psnr,alpha")?;
        for r in &self.rows {
            let rmse = r.rmse.map(|v| v.to_string()).unwrap_or_default();
            let psnr = r.psnr.map(format_db).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.iter, r.objective, rmse, psnr, r.alpha)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReconState {
    pub z1: Cube,
    pub z2: Cube,
    pub x: Cube,
    pub k: usize,
    pub alpha_k: f64,
    pub xbar: ReferenceImage,
    pub history: History,
}

/// Stepwise driver; [`reconstruct`] runs it to completion.
pub struct Gfbs<'a> {
    y: &'a Cube,
    mask: &'a SamplingMask,
    encoder: Encoder<'a>,
    cfg: GfbsConfig,
    truth: Option<&'a Cube>,
    initial_reference: ReferenceImage,
    h: f64,
    state: ReconState,
}

impl<'a> Gfbs<'a> {
    /// `initial_reference` is the image used as `x̄` in the first iteration;
    /// when absent the zero-filled first frame of `y` is used.
    pub fn new(
        y: &'a Cube,
        mask: &'a SamplingMask,
        initial_reference: Option<ReferenceImage>,
        cfg: GfbsConfig,
        truth: Option<&'a Cube>,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = mask.dims();
        if y.dims != dims {
            return Err(dims_mismatch(dims, y.dims));
        }
        if let Some(t) = truth {
            if t.dims != dims {
                return Err(dims_mismatch(dims, t.dims));
            }
        }
        let encoder = Encoder::new(mask);
        let x0 = encoder.adjoint(y)?;
        let initial_reference = match initial_reference {
            Some(r) => {
                if (r.nx, r.ny) != (dims.nx, dims.ny) {
                    return Err(dims_mismatch((dims.nx, dims.ny), (r.nx, r.ny)));
                }
                r
            }
            None => ReferenceImage::new(dims.nx, dims.ny, x0.frame(0).to_vec())?,
        };
        let h = cfg.nlm.resolve_h(&x0);
        let state = ReconState {
            z1: x0.clone(),
            z2: x0.clone(),
            x: x0,
            k: 0,
            alpha_k: cfg.alpha(1),
            xbar: initial_reference.clone(),
            history: History::default(),
        };
        Ok(Self {
            y,
            mask,
            encoder,
            cfg,
            truth,
            initial_reference,
            h,
            state,
        })
    }

    pub fn state(&self) -> &ReconState {
        &self.state
    }

    /// NLM decay parameter in use.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn into_state(self) -> ReconState {
        self.state
    }

    /// One iteration; returns `‖x^{k+1} − x^k‖² / ‖x^k‖²`.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = self.cfg;
        let s = &mut self.state;
        let k = s.k + 1;
        let alpha = cfg.alpha(k);
        let xbar = update_reference(&s.x, s.k, &self.initial_reference);
        let grad = self.encoder.gradient(&s.x, self.y)?;

        let point = |z: &Cube| {
            let mut v = s.x.clone();
            for ((vi, zi), gi) in v.data.iter_mut().zip(&z.data).zip(&grad.data) {
                *vi = *vi * 2.0 - zi - gi * cfg.gamma;
            }
            v
        };
        let v1 = point(&s.z1);
        let v2 = point(&s.z2);
        let dtv_cfg = DtvConfig {
            lambda1: cfg.gamma * cfg.dtv.lambda1 / cfg.w1,
            ..cfg.dtv
        };
        let h = self.h;
        let (p1, p2) = rayon::join(
            || prox_dtv_series(&v1, &xbar, &dtv_cfg, DtvMode::Denoise),
            || -> Result<Cube> {
                let den = nlm_filter_3d(&v2, &cfg.nlm, h)?;
                let a = cfg.nlm.alpha();
                let mut out = v2.clone();
                for (o, d) in out.data.iter_mut().zip(&den.data) {
                    *o += (d - *o) * a;
                }
                Ok(out)
            },
        );
        let (p1, p2) = (p1?, p2?);
        if !p1.is_finite() {
            return Err(Error::NonFinite { iteration: k, stage: "dtv" });
        }
        if !p2.is_finite() {
            return Err(Error::NonFinite { iteration: k, stage: "nlm" });
        }
        for i in 0..s.x.data.len() {
            s.z1.data[i] += (p1.data[i] - s.x.data[i]) * alpha;
            s.z2.data[i] += (p2.data[i] - s.x.data[i]) * alpha;
        }
        let mut next = s.x.clone();
        for (n, (a, b)) in next.data.iter_mut().zip(s.z1.data.iter().zip(&s.z2.data)) {
            *n = a * cfg.w1 + b * cfg.w2;
        }
        if !next.is_finite() {
            return Err(Error::NonFinite { iteration: k, stage: "average" });
        }
        let change = next.dist_sqr(&s.x);
        let base = s.x.norm_sqr();
        let rel = if change == 0.0 {
            0.0
        } else if base == 0.0 {
            f64::INFINITY
        } else {
            change / base
        };
        s.x = next;
        s.k = k;
        s.alpha_k = alpha;
        s.xbar = xbar;

        let obj = objective(&s.x, self.y, self.mask, &s.xbar, cfg.dtv.lambda1)?;
        let rmse = match self.truth {
            Some(t) => Some(rmse_cube(&s.x, t)?),
            None => None,
        };
        s.history.rows.push(HistoryRow {
            iter: k,
            objective: obj,
            rmse,
            psnr: rmse.map(psnr_from_rmse),
            alpha,
            rel_change: rel,
        });
        Ok(rel)
    }

    pub fn run(mut self) -> Result<ReconState> {
        loop {
            let rel = self.step()?;
            if rel <= self.cfg.rel_tol {
                self.state.history.stop_reason = Some(StopReason::Tolerance);
                break;
            }
            if self.state.k >= self.cfg.max_iters {
                self.state.history.stop_reason = Some(StopReason::MaxIters);
                break;
            }
        }
        Ok(self.state)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x: Cube,
    pub history: History,
}

/// Runs the reconstruction on double-precision k-space.
pub fn reconstruct(
    y: &Cube,
    mask: &SamplingMask,
    initial_reference: Option<ReferenceImage>,
    cfg: &GfbsConfig,
    truth: Option<&Cube>,
) -> Result<Reconstruction> {
    let state = Gfbs::new(y, mask, initial_reference, *cfg, truth)?.run()?;
    Ok(Reconstruction {
        x: state.x,
        history: state.history,
    })
}

/// Runs the reconstruction on stored series; `reference` supplies the
/// first-iteration reference from its zero-filled image.
pub fn reconstruct_series(
    y: &KSpaceSeries,
    mask: &SamplingMask,
    reference: Option<&ReferenceScan>,
    cfg: &GfbsConfig,
    truth: Option<&ImageSeries>,
) -> Result<(ImageSeries, History)> {
    let yc = y.to_cube();
    let tc = truth.map(|t| t.to_cube());
    let dims = y.dims();
    let xbar = match reference {
        Some(r) => Some(ReferenceImage::new(dims.nx, dims.ny, r.zero_filled())?),
        None => None,
    };
    let rec = reconstruct(&yc, mask, xbar, cfg, tc.as_ref())?;
    Ok((rec.x.to_series(y.dt())?, rec.history))
}
