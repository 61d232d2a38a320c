//! Dynamic total variation subproblem.
//!
//! Each frame minimizes `½‖F_t d − b_t‖² + λ‖d‖_TV` over the deviation
//! `d = x_t − x̄` from a reference image, with `b_t = y_t − F_t x̄` and
//! `λ = 2·lambda1`. The solver is iteratively reweighted least squares: each
//! outer pass freezes the diagonal weights
//! `W_i = 1/sqrt(|∇x d|² + |∇y d|² + eps_w²)` and solves
//!
//! ```text
//! (F_t^H F_t + λ Q1ᵀ W Q1 + λ Q2ᵀ W Q2) d = F_t^H b_t
//! ```
//!
//! by conjugate gradients preconditioned with an ILU(0) factorization of the
//! penta-diagonal `P = sI + λ Q1ᵀ W Q1 + λ Q2ᵀ W Q2`, where `s` is the sampled
//! fraction of the frame.
//!
//! Two encodings share the code: [`FrameEncoding::Masked`] is the k-space form
//! (`F_t = A_t F`), [`FrameEncoding::Identity`] the image-domain denoising form
//! used as a proximal map (`F_t = I`, `s = 1`).

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::fft::Fft2;
use crate::sampler::SamplingMask;
use crate::volume::{Cube, Dims};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtvConfig {
    pub lambda1: f64,
    /// Smoothing of the reweighting denominator.
    pub eps_w: f64,
    pub firls_outer: usize,
    pub pcg_max: usize,
    /// Relative residual `‖r‖/‖rhs‖` at which PCG stops.
    pub pcg_tol: f64,
}

impl Default for DtvConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.001,
            eps_w: 1e-8,
            firls_outer: 5,
            pcg_max: 10,
            pcg_tol: 1e-6,
        }
    }
}

impl DtvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 > 0.0
            && self.eps_w > 0.0
            && self.firls_outer > 0
            && self.pcg_max > 0
            && self.pcg_tol > 0.0
            && self.pcg_tol < 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid DTV config {self:?}")));
        }
        Ok(())
    }

    /// TV weight of the per-frame objective.
    pub fn tv_weight(&self) -> f64 {
        2.0 * self.lambda1
    }
}

/// Baseline frame `x̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImage {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<Complex64>,
}

impl ReferenceImage {
    pub fn new(nx: usize, ny: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(dims_mismatch(nx * ny, data.len()));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: vec![ZERO; nx * ny],
        }
    }
}

/// Forward differences with replicate boundary: `Q1` vertical (along y),
/// `Q2` horizontal (along x). The last row/column difference is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffOperators {
    pub nx: usize,
    pub ny: usize,
}

impl DiffOperators {
    pub fn new(nx: usize, ny: usize) -> Self {
        Self { nx, ny }
    }

    pub fn vertical(&self, d: &[Complex64]) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![ZERO; nx * ny];
        for y in 0..ny.saturating_sub(1) {
            for x in 0..nx {
                let i = y * nx + x;
                out[i] = d[i + nx] - d[i];
            }
        }
        out
    }

    pub fn horizontal(&self, d: &[Complex64]) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![ZERO; nx * ny];
        for y in 0..ny {
            for x in 0..nx.saturating_sub(1) {
                let i = y * nx + x;
                out[i] = d[i + 1] - d[i];
            }
        }
        out
    }

    pub fn vertical_t(&self, g: &[Complex64]) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![ZERO; nx * ny];
        for y in 0..ny.saturating_sub(1) {
            for x in 0..nx {
                let i = y * nx + x;
                out[i] -= g[i];
                out[i + nx] += g[i];
            }
        }
        out
    }

    pub fn horizontal_t(&self, g: &[Complex64]) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![ZERO; nx * ny];
        for y in 0..ny {
            for x in 0..nx.saturating_sub(1) {
                let i = y * nx + x;
                out[i] -= g[i];
                out[i + 1] += g[i];
            }
        }
        out
    }

    /// `Q1ᵀ W Q1 d + Q2ᵀ W Q2 d`
    pub fn weighted_laplacian(&self, d: &[Complex64], w: &[f64]) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![ZERO; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                if y + 1 < ny {
                    let g = (d[i + nx] - d[i]) * w[i];
                    out[i] -= g;
                    out[i + nx] += g;
                }
                if x + 1 < nx {
                    let g = (d[i + 1] - d[i]) * w[i];
                    out[i] -= g;
                    out[i + 1] += g;
                }
            }
        }
        out
    }

    /// Isotropic TV `Σ sqrt(|Q1 d|² + |Q2 d|²)`.
    pub fn tv(&self, d: &[Complex64]) -> f64 {
        let v = self.vertical(d);
        let h = self.horizontal(d);
        v.iter()
            .zip(&h)
            .map(|(a, b)| (a.norm_sqr() + b.norm_sqr()).sqrt())
            .sum()
    }
}

/// Diagonal IRLS weights over the voxels of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct IrlsWeights(pub Vec<f64>);

pub fn compute_weights(d: &[Complex64], nx: usize, ny: usize, eps_w: f64) -> IrlsWeights {
    let ops = DiffOperators::new(nx, ny);
    let v = ops.vertical(d);
    let h = ops.horizontal(d);
    IrlsWeights(
        v.iter()
            .zip(&h)
            .map(|(a, b)| 1.0 / (a.norm_sqr() + b.norm_sqr() + eps_w * eps_w).sqrt())
            .collect(),
    )
}

/// Symmetric penta-diagonal matrix on an `nx × ny` grid: couplings to the
/// right neighbour (`i+1`) and the one below (`i+nx`).
#[derive(Clone, Debug, PartialEq)]
pub struct PentaDiagonal {
    pub nx: usize,
    pub ny: usize,
    pub diag: Vec<f64>,
    pub right: Vec<f64>,
    pub down: Vec<f64>,
}

impl PentaDiagonal {
    /// `s I + λ Q1ᵀ W Q1 + λ Q2ᵀ W Q2`
    pub fn preconditioner(nx: usize, ny: usize, s: f64, lambda: f64, w: &IrlsWeights) -> Self {
        let n = nx * ny;
        let mut diag = vec![s; n];
        let mut right = vec![0.0; n];
        let mut down = vec![0.0; n];
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                let lw = lambda * w.0[i];
                if x + 1 < nx {
                    diag[i] += lw;
                    diag[i + 1] += lw;
                    right[i] = -lw;
                }
                if y + 1 < ny {
                    diag[i] += lw;
                    diag[i + nx] += lw;
                    down[i] = -lw;
                }
            }
        }
        Self {
            nx,
            ny,
            diag,
            right,
            down,
        }
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let (nx, n) = (self.nx, self.diag.len());
        let mut out: Vec<Complex64> = v.iter().zip(&self.diag).map(|(a, d)| a * d).collect();
        for i in 0..n {
            if i + 1 < n && self.right[i] != 0.0 {
                out[i] += v[i + 1] * self.right[i];
                out[i + 1] += v[i] * self.right[i];
            }
            if i + nx < n && self.down[i] != 0.0 {
                out[i] += v[i + nx] * self.down[i];
                out[i + nx] += v[i] * self.down[i];
            }
        }
        out
    }

    /// Zero-fill incomplete LU on the five-point sparsity pattern.
    pub fn ilu0(&self) -> Ilu0 {
        let (nx, n) = (self.nx, self.diag.len());
        let mut l_left = vec![0.0; n];
        let mut l_up = vec![0.0; n];
        let mut u_diag = vec![0.0; n];
        for i in 0..n {
            let mut d = self.diag[i];
            if i >= 1 {
                l_left[i] = self.right[i - 1] / u_diag[i - 1];
                d -= l_left[i] * self.right[i - 1];
            }
            if i >= nx {
                l_up[i] = self.down[i - nx] / u_diag[i - nx];
                d -= l_up[i] * self.down[i - nx];
            }
            u_diag[i] = d;
        }
        Ilu0 {
            nx,
            l_left,
            l_up,
            u_diag,
            u_right: self.right.clone(),
            u_down: self.down.clone(),
        }
    }
}

/// `P ≈ L U` with unit lower `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ilu0 {
    nx: usize,
    l_left: Vec<f64>,
    l_up: Vec<f64>,
    u_diag: Vec<f64>,
    u_right: Vec<f64>,
    u_down: Vec<f64>,
}

impl Ilu0 {
    /// `U⁻¹ L⁻¹ r`
    pub fn solve(&self, r: &[Complex64]) -> Vec<Complex64> {
        let (nx, n) = (self.nx, r.len());
        let mut y = r.to_vec();
        for i in 0..n {
            if i >= 1 {
                let prev = y[i - 1];
                y[i] -= prev * self.l_left[i];
            }
            if i >= nx {
                let prev = y[i - nx];
                y[i] -= prev * self.l_up[i];
            }
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            if i + 1 < n {
                v -= y[i + 1] * self.u_right[i];
            }
            if i + nx < n {
                v -= y[i + nx] * self.u_down[i];
            }
            y[i] = v / self.u_diag[i];
        }
        y
    }
}

/// Per-frame encoding `F_t`.
#[derive(Clone, Copy, Debug)]
pub enum FrameEncoding<'a> {
    Identity,
    Masked { mask: &'a [u8], fft: &'a Fft2 },
}

impl FrameEncoding<'_> {
    pub fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        match self {
            FrameEncoding::Identity => x.to_vec(),
            FrameEncoding::Masked { mask, fft } => {
                let mut f = x.to_vec();
                fft.forward(&mut f);
                mask_in_place(&mut f, mask);
                f
            }
        }
    }

    pub fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        match self {
            FrameEncoding::Identity => y.to_vec(),
            FrameEncoding::Masked { mask, fft } => {
                let mut f = y.to_vec();
                mask_in_place(&mut f, mask);
                fft.inverse(&mut f);
                f
            }
        }
    }

    /// `F_t^H F_t x`
    pub fn normal(&self, x: &[Complex64]) -> Vec<Complex64> {
        match self {
            FrameEncoding::Identity => x.to_vec(),
            FrameEncoding::Masked { .. } => self.adjoint(&self.forward(x)),
        }
    }

    /// Mean of the diagonal of `A_tᵀ A_t`.
    pub fn sampled_fraction(&self) -> f64 {
        match self {
            FrameEncoding::Identity => 1.0,
            FrameEncoding::Masked { mask, .. } => {
                mask.iter().filter(|&&m| m != 0).count() as f64 / mask.len() as f64
            }
        }
    }
}

fn mask_in_place(f: &mut [Complex64], mask: &[u8]) {
    for (z, &m) in f.iter_mut().zip(mask) {
        if m == 0 {
            *z = ZERO;
        }
    }
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcgOutcome {
    pub solution: Vec<Complex64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Preconditioned conjugate gradients for a Hermitian positive definite system.
pub fn pcg(
    apply: impl Fn(&[Complex64]) -> Vec<Complex64>,
    precond: impl Fn(&[Complex64]) -> Vec<Complex64>,
    rhs: &[Complex64],
    x0: &[Complex64],
    max_iter: usize,
    tol: f64,
) -> Result<PcgOutcome> {
    let bnorm = norm(rhs);
    if bnorm == 0.0 {
        return Ok(PcgOutcome {
            solution: vec![ZERO; rhs.len()],
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut x = x0.to_vec();
    let ax = apply(&x);
    let mut r: Vec<Complex64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut rel = norm(&r) / bnorm;
    if !rel.is_finite() {
        return Err(Error::PcgBreakdown { iteration: 0 });
    }
    if rel <= tol {
        return Ok(PcgOutcome {
            solution: x,
            iterations: 0,
            rel_residual: rel,
        });
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = inner(&r, &z).re;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let ap = apply(&p);
        let pap = inner(&p, &ap).re;
        if pap == 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..x.len() {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        rel = norm(&r) / bnorm;
        if !rel.is_finite() {
            return Err(Error::PcgBreakdown { iteration: it });
        }
        if rel <= tol {
            break;
        }
        z = precond(&r);
        let rz_new = inner(&r, &z).re;
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + p[i] * beta;
        }
    }
    Ok(PcgOutcome {
        solution: x,
        iterations,
        rel_residual: rel,
    })
}

/// One reweighted system `S d = rhs` with frozen weights, solved by PCG with
/// the ILU(0)-factorized penta-diagonal preconditioner.
#[allow(clippy::too_many_arguments)]
pub fn solve_reweighted_system(
    enc: &FrameEncoding<'_>,
    ops: DiffOperators,
    weights: &IrlsWeights,
    lambda: f64,
    rhs: &[Complex64],
    x0: &[Complex64],
    max_iter: usize,
    tol: f64,
) -> Result<PcgOutcome> {
    let s = enc.sampled_fraction();
    let ilu = PentaDiagonal::preconditioner(ops.nx, ops.ny, s, lambda, weights).ilu0();
    let apply = |v: &[Complex64]| {
        let mut out = enc.normal(v);
        let lap = ops.weighted_laplacian(v, &weights.0);
        for (o, l) in out.iter_mut().zip(&lap) {
            *o += l * lambda;
        }
        out
    };
    pcg(apply, |r| ilu.solve(r), rhs, x0, max_iter, tol)
}

/// `½‖F_t (x − x̄) − b_t‖² + λ TV(x − x̄)` with `b_t = y_t − F_t x̄`.
pub fn dtv_objective(
    x: &[Complex64],
    data: &[Complex64],
    enc: &FrameEncoding<'_>,
    xbar: &ReferenceImage,
    lambda: f64,
) -> f64 {
    let d: Vec<Complex64> = x.iter().zip(&xbar.data).map(|(a, b)| a - b).collect();
    // F(x − x̄) − (y − F x̄) = F x − y
    let fx = enc.forward(x);
    let misfit: f64 = fx.iter().zip(data).map(|(a, b)| (a - b).norm_sqr()).sum();
    0.5 * misfit + lambda * DiffOperators::new(xbar.nx, xbar.ny).tv(&d)
}

/// Solves one frame of the DTV subproblem and returns `x̂_t = d̂_t + x̄`.
///
/// `data` is the k-space frame `y_t` for [`FrameEncoding::Masked`] and the
/// image `z_t` for [`FrameEncoding::Identity`].
pub fn firls_solve_frame(
    data: &[Complex64],
    enc: &FrameEncoding<'_>,
    xbar: &ReferenceImage,
    cfg: &DtvConfig,
) -> Result<Vec<Complex64>> {
    let (nx, ny) = (xbar.nx, xbar.ny);
    if data.len() != nx * ny {
        return Err(dims_mismatch(nx * ny, data.len()));
    }
    let ops = DiffOperators::new(nx, ny);
    let lambda = cfg.tv_weight();
    let fxbar = enc.forward(&xbar.data);
    let b: Vec<Complex64> = data.iter().zip(&fxbar).map(|(y, f)| y - f).collect();
    let rhs = enc.adjoint(&b);
    let x0 = enc.adjoint(data);
    let mut d: Vec<Complex64> = x0.iter().zip(&xbar.data).map(|(a, r)| a - r).collect();
    for _ in 0..cfg.firls_outer {
        let w = compute_weights(&d, nx, ny, cfg.eps_w);
        d = solve_reweighted_system(enc, ops, &w, lambda, &rhs, &d, cfg.pcg_max, cfg.pcg_tol)?
            .solution;
    }
    Ok(d.iter().zip(&xbar.data).map(|(a, r)| a + r).collect())
}

/// Input form for [`prox_dtv_series`].
#[derive(Clone, Copy, Debug)]
pub enum DtvMode<'a> {
    /// Input is an image series `Z`; `F_t = I`.
    Denoise,
    /// Input is the k-space series `Y` acquired with this mask.
    KSpace(&'a SamplingMask),
}

/// Applies [`firls_solve_frame`] to every frame independently.
pub fn prox_dtv_series(input: &Cube, xbar: &ReferenceImage, cfg: &DtvConfig, mode: DtvMode<'_>) -> Result<Cube> {
    let dims = input.dims;
    if xbar.nx != dims.nx || xbar.ny != dims.ny {
        return Err(dims_mismatch((dims.nx, dims.ny), (xbar.nx, xbar.ny)));
    }
    let fft = Fft2::new(dims.nx, dims.ny);
    if let DtvMode::KSpace(mask) = mode {
        if mask.dims() != dims {
            return Err(dims_mismatch(dims, mask.dims()));
        }
    }
    let frames: Vec<Result<Vec<Complex64>>> = (0..dims.t)
        .into_par_iter()
        .map(|t| {
            let enc = match mode {
                DtvMode::Denoise => FrameEncoding::Identity,
                DtvMode::KSpace(mask) => FrameEncoding::Masked {
                    mask: mask.frame(t),
                    fft: &fft,
                },
            };
            firls_solve_frame(input.frame(t), &enc, xbar, cfg)
        })
        .collect();
    let mut data = Vec::with_capacity(dims.len());
    for f in frames {
        data.extend(f?);
    }
    Cube::from_vec(Dims { ..dims }, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::make_cartesian_vd_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn constant_frame_has_maximal_weights() {
        let d = vec![Complex64::new(0.3, -0.1); 20];
        let w = compute_weights(&d, 5, 4, 1e-8);
        assert!(w.0.iter().all(|&v| (v - 1e8).abs() < 1e-3));
        let ops = DiffOperators::new(5, 4);
        assert!(ops.vertical(&d).iter().chain(ops.horizontal(&d).iter()).all(|z| z.norm() == 0.0));
    }

    #[test]
    fn unit_step_weight() {
        let (nx, ny) = (4, 4);
        let mut d = vec![ZERO; 16];
        // horizontal unit step between (1,1) and (2,1) only
        d[nx + 2] = Complex64::new(1.0, 0.0);
        for y in 0..ny {
            for x in 2..nx {
                d[y * nx + x] = Complex64::new(1.0, 0.0);
            }
        }
        let w = compute_weights(&d, nx, ny, 1e-8);
        let i = nx + 1;
        assert!((w.0[i] - 1.0 / (1.0f64 + 1e-16).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn weights_match_scalar_formula() {
        let (nx, ny) = (8, 8);
        let d = random_frame(nx * ny, 4);
        let eps = 1e-3;
        let w = compute_weights(&d, nx, ny, eps);
        for y in 0..ny {
            for x in 0..nx {
                let c = d[y * nx + x];
                let gx = if x + 1 < nx { d[y * nx + x + 1] - c } else { ZERO };
                let gy = if y + 1 < ny { d[(y + 1) * nx + x] - c } else { ZERO };
                let oracle = 1.0 / (gx.norm_sqr() + gy.norm_sqr() + eps * eps).sqrt();
                assert!((w.0[y * nx + x] - oracle).abs() <= 1e-12 * oracle);
                assert!(w.0[y * nx + x] > 0.0 && w.0[y * nx + x] <= 1.0 / eps);
            }
        }
    }

    #[test]
    fn transposes_are_adjoint() {
        let ops = DiffOperators::new(6, 5);
        let a = random_frame(30, 1);
        let b = random_frame(30, 2);
        let l = inner(&ops.vertical(&a), &b);
        let r = inner(&a, &ops.vertical_t(&b));
        assert!((l - r).norm() < 1e-12);
        let l = inner(&ops.horizontal(&a), &b);
        let r = inner(&a, &ops.horizontal_t(&b));
        assert!((l - r).norm() < 1e-12);
    }

    #[test]
    fn weighted_laplacian_matches_composition() {
        let ops = DiffOperators::new(7, 5);
        let d = random_frame(35, 3);
        let w: Vec<f64> = (0..35).map(|i| 0.5 + i as f64 * 0.1).collect();
        let direct = ops.weighted_laplacian(&d, &w);
        let mut v = ops.vertical(&d);
        let mut h = ops.horizontal(&d);
        v.iter_mut().zip(&w).for_each(|(z, w)| *z *= w);
        h.iter_mut().zip(&w).for_each(|(z, w)| *z *= w);
        let comp: Vec<Complex64> = ops
            .vertical_t(&v)
            .iter()
            .zip(ops.horizontal_t(&h))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in direct.iter().zip(&comp) {
            assert!((a - b).norm() < 1e-12);
        }
        let p = PentaDiagonal::preconditioner(7, 5, 0.0, 1.0, &IrlsWeights(w));
        for (a, b) in p.apply(&d).iter().zip(&direct) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn operator_norm_at_most_two() {
        // power iteration on Q1ᵀQ1
        let ops = DiffOperators::new(9, 9);
        let mut v = random_frame(81, 9);
        let mut est = 0.0;
        for _ in 0..200 {
            let w = ops.vertical_t(&ops.vertical(&v));
            est = norm(&w) / norm(&v);
            let n = norm(&w);
            v = w.iter().map(|z| z / n).collect();
        }
        assert!(est.sqrt() <= 2.0 + 1e-9);
    }

    #[test]
    fn ilu_is_exact_on_a_single_row() {
        // nx = n: the pattern is tridiagonal and ILU(0) equals exact LU
        let w = IrlsWeights(vec![1.0, 2.0, 0.5, 3.0, 1.0, 1.0]);
        let p = PentaDiagonal::preconditioner(6, 1, 0.7, 0.3, &w);
        let ilu = p.ilu0();
        let r = random_frame(6, 5);
        let x = ilu.solve(&r);
        let back = p.apply(&x);
        for (a, b) in back.iter().zip(&r) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_converges_in_one_iteration() {
        let n = 64;
        let w = IrlsWeights(vec![1.0; n]);
        let rhs = random_frame(n, 6);
        let out = solve_reweighted_system(
            &FrameEncoding::Identity,
            DiffOperators::new(8, 8),
            &w,
            0.0,
            &rhs,
            &vec![ZERO; n],
            10,
            1e-12,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        let fft = Fft2::new(8, 8);
        let mask = vec![1u8; n];
        let out = solve_reweighted_system(
            &FrameEncoding::Masked { mask: &mask, fft: &fft },
            DiffOperators::new(8, 8),
            &w,
            0.0,
            &rhs,
            &vec![ZERO; n],
            10,
            1e-12,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn tiny_lambda_full_mask_returns_data() {
        let (nx, ny) = (8, 8);
        let x = random_frame(64, 7);
        let fft = Fft2::new(nx, ny);
        let mask = vec![1u8; 64];
        let enc = FrameEncoding::Masked { mask: &mask, fft: &fft };
        let y = enc.forward(&x);
        let cfg = DtvConfig {
            lambda1: 1e-12,
            ..DtvConfig::default()
        };
        let xbar = ReferenceImage::zeros(nx, ny);
        let out = firls_solve_frame(&y, &enc, &xbar, &cfg).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn data_equal_to_reference_gives_reference() {
        let (nx, ny) = (16, 16);
        let xbar = ReferenceImage::new(nx, ny, random_frame(256, 8)).unwrap();
        let fft = Fft2::new(nx, ny);
        let mask = make_cartesian_vd_mask(16, 16, 1, 2.0, 1).unwrap();
        let enc = FrameEncoding::Masked { mask: mask.frame(0), fft: &fft };
        let y = enc.forward(&xbar.data);
        let out = firls_solve_frame(&y, &enc, &xbar, &DtvConfig::default()).unwrap();
        for (a, b) in out.iter().zip(&xbar.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn series_of_reference_frames_is_fixed() {
        let dims = Dims::new(8, 8, 3).unwrap();
        let xbar = ReferenceImage::new(8, 8, random_frame(64, 10)).unwrap();
        let mut cube = Cube::zeros(dims);
        for t in 0..3 {
            cube.frame_mut(t).copy_from_slice(&xbar.data);
        }
        let out = prox_dtv_series(&cube, &xbar, &DtvConfig::default(), DtvMode::Denoise).unwrap();
        assert!(out.dist_sqr(&cube).sqrt() < 1e-12);
    }

    #[test]
    fn denoising_reduces_error_on_piecewise_constant_frame() {
        let (nx, ny) = (16, 16);
        let dims = Dims::new(nx, ny, 1).unwrap();
        let mut clean = Cube::zeros(dims);
        for y in 0..ny {
            for x in 0..nx {
                let v = if (4..12).contains(&x) && (4..12).contains(&y) { 1.0 } else { 0.2 };
                clean.data[y * nx + x] = Complex64::new(v, 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut noisy = clean.clone();
        for z in noisy.data.iter_mut() {
            z.re += rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.1;
        }
        let cfg = DtvConfig {
            lambda1: 0.05,
            ..DtvConfig::default()
        };
        let out = prox_dtv_series(&noisy, &ReferenceImage::zeros(nx, ny), &cfg, DtvMode::Denoise).unwrap();
        assert!(out.dist_sqr(&clean) < 0.5 * noisy.dist_sqr(&clean));
    }

    #[test]
    fn frames_are_independent() {
        let dims = Dims::new(8, 8, 3).unwrap();
        let cube = Cube::from_vec(dims, random_frame(192, 13)).unwrap();
        let mut permuted = Cube::zeros(dims);
        let order = [2usize, 0, 1];
        for (dst, &src) in order.iter().enumerate() {
            permuted.frame_mut(dst).copy_from_slice(cube.frame(src));
        }
        let xbar = ReferenceImage::new(8, 8, random_frame(64, 14)).unwrap();
        let cfg = DtvConfig::default();
        let a = prox_dtv_series(&cube, &xbar, &cfg, DtvMode::Denoise).unwrap();
        let b = prox_dtv_series(&permuted, &xbar, &cfg, DtvMode::Denoise).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            assert_eq!(b.frame(dst), a.frame(src));
        }
    }

    #[test]
    fn translation_covariance() {
        let dims = Dims::new(8, 8, 2).unwrap();
        let cube = Cube::from_vec(dims, random_frame(128, 15)).unwrap();
        let xbar = ReferenceImage::new(8, 8, random_frame(64, 16)).unwrap();
        let c = Complex64::new(0.7, -0.2);
        let mut shifted = cube.clone();
        shifted.data.iter_mut().for_each(|z| *z += c);
        let mut xbar_c = xbar.clone();
        xbar_c.data.iter_mut().for_each(|z| *z += c);
        let cfg = DtvConfig::default();
        let a = prox_dtv_series(&cube, &xbar, &cfg, DtvMode::Denoise).unwrap();
        let b = prox_dtv_series(&shifted, &xbar_c, &cfg, DtvMode::Denoise).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x + c - y).norm() < 1e-9);
        }
    }

    fn dense_dft(nx: usize, ny: usize) -> nalgebra::DMatrix<Complex64> {
        let n = nx * ny;
        let scale = 1.0 / (n as f64).sqrt();
        nalgebra::DMatrix::from_fn(n, n, |k, j| {
            let (kx, ky) = (k % nx, k / nx);
            let (x, y) = (j % nx, j / nx);
            let ph = -2.0 * std::f64::consts::PI * ((kx * x) as f64 / nx as f64 + (ky * y) as f64 / ny as f64);
            Complex64::from_polar(scale, ph)
        })
    }

    fn dense_diff(nx: usize, ny: usize, vertical: bool) -> nalgebra::DMatrix<Complex64> {
        let n = nx * ny;
        let mut q = nalgebra::DMatrix::zeros(n, n);
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                let next = if vertical {
                    (y + 1 < ny).then(|| i + nx)
                } else {
                    (x + 1 < nx).then(|| i + 1)
                };
                if let Some(j) = next {
                    q[(i, j)] = Complex64::new(1.0, 0.0);
                    q[(i, i)] = Complex64::new(-1.0, 0.0);
                }
            }
        }
        q
    }

    fn check_against_dense(mask: &SamplingMask) {
        let (nx, ny) = (16, 16);
        let n = nx * ny;
        let fft = Fft2::new(nx, ny);
        let enc = FrameEncoding::Masked { mask: mask.frame(0), fft: &fft };
        let d = random_frame(n, 40);
        let w = compute_weights(&d, nx, ny, 1e-8);
        let lambda = 0.002;
        let rhs = enc.adjoint(&enc.forward(&random_frame(n, 41)));
        let out = solve_reweighted_system(
            &enc,
            DiffOperators::new(nx, ny),
            &w,
            lambda,
            &rhs,
            &vec![ZERO; n],
            2000,
            1e-13,
        )
        .unwrap();

        let f = dense_dft(nx, ny);
        let a = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j && mask.frame(0)[i] != 0 { Complex64::new(1.0, 0.0) } else { ZERO }
        });
        let wm = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j { Complex64::new(w.0[i], 0.0) } else { ZERO }
        });
        let q1 = dense_diff(nx, ny, true);
        let q2 = dense_diff(nx, ny, false);
        let lam = Complex64::new(lambda, 0.0);
        let s = f.adjoint() * &a * &f
            + (q1.adjoint() * &wm * &q1) * lam
            + (q2.adjoint() * &wm * &q2) * lam;
        let b = nalgebra::DVector::from_column_slice(&rhs);
        let exact = s.lu().solve(&b).unwrap();
        let err: f64 = out
            .solution
            .iter()
            .zip(exact.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-8 * exact.norm(), "relative error {}", err / exact.norm());
    }

    #[test]
    fn pcg_matches_dense_solve_cartesian() {
        check_against_dense(&make_cartesian_vd_mask(16, 16, 1, 2.0, 5).unwrap());
    }

    #[test]
    fn pcg_matches_dense_solve_radial() {
        check_against_dense(&crate::sampler::make_radial_mask(16, 16, 1, 2.0, 5).unwrap());
    }

    #[test]
    fn output_is_a_local_minimum() {
        let (nx, ny) = (8, 8);
        let fft = Fft2::new(nx, ny);
        let mask = make_cartesian_vd_mask(8, 8, 1, 2.0, 2).unwrap();
        let enc = FrameEncoding::Masked { mask: mask.frame(0), fft: &fft };
        let x = random_frame(64, 50);
        let y = enc.forward(&x);
        let xbar = ReferenceImage::new(nx, ny, random_frame(64, 51)).unwrap();
        let cfg = DtvConfig::default();
        let lam = cfg.tv_weight();
        let out = firls_solve_frame(&y, &enc, &xbar, &cfg).unwrap();
        let f0 = dtv_objective(&out, &y, &enc, &xbar, lam);
        let range = out.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..100 {
            let p: Vec<Complex64> = out
                .iter()
                .map(|z| {
                    let dir = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    z + dir * (0.01 * range)
                })
                .collect();
            assert!(dtv_objective(&p, &y, &enc, &xbar, lam) >= f0 - 1e-9);
        }
    }

    #[test]
    fn objective_does_not_increase_from_zero_filled_start() {
        let (nx, ny) = (16, 16);
        let fft = Fft2::new(nx, ny);
        let mask = make_cartesian_vd_mask(16, 16, 1, 2.0, 3).unwrap();
        let enc = FrameEncoding::Masked { mask: mask.frame(0), fft: &fft };
        for seed in 0..5 {
            let x = random_frame(256, 30 + seed);
            let y = enc.forward(&x);
            let xbar = ReferenceImage::new(nx, ny, random_frame(256, 60 + seed)).unwrap();
            let cfg = DtvConfig {
                lambda1: 0.01,
                ..DtvConfig::default()
            };
            let out = firls_solve_frame(&y, &enc, &xbar, &cfg).unwrap();
            let zf = enc.adjoint(&y);
            let lam = cfg.tv_weight();
            assert!(dtv_objective(&out, &y, &enc, &xbar, lam) <= dtv_objective(&zf, &y, &enc, &xbar, lam));
        }
    }
}
