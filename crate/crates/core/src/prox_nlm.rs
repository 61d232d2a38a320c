//! Nonlocal-means subproblem.
//!
//! Patch similarity is `φ(p, q) = exp(−‖P_p − P_q‖² / h²)` with the plain
//! Euclidean distance between 3D patches (x, y, t). Each voxel is replaced by
//! the φ-weighted average over its 3D search window.
//!
//! The filter is evaluated blockwise: block centers sit on a lattice with
//! stride `block_step`, every block of radius `block_step / 2` is restored as
//! a whole from the weights of its center, and overlapping estimates are
//! averaged. With `block_step = 1` the blocks are single voxels and the result
//! is the direct per-voxel filter.
//!
//! At volume borders the search window is clipped to the volume. Patch
//! distances only use offsets valid for both patches and are rescaled by
//! `full / valid` so clipped patches stay comparable with interior ones.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::sampler::{Encoder, SamplingMask};
use crate::volume::{Cube, Dims};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlmConfig {
    /// Search-window edge length (odd).
    pub nw: usize,
    /// Patch edge length (odd, `< nw`).
    pub np: usize,
    /// Fixed decay parameter; when absent, `h_factor · σ̂`.
    pub h: Option<f64>,
    pub h_factor: f64,
    pub block_step: usize,
    pub pocs_iters: usize,
    pub lambda2: f64,
}

impl Default for NlmConfig {
    fn default() -> Self {
        Self {
            nw: 7,
            np: 5,
            h: None,
            h_factor: 0.2,
            block_step: 2,
            pocs_iters: 3,
            lambda2: 0.25,
        }
    }
}

impl NlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("invalid NLM config: {m}")));
        if self.nw.is_multiple_of(2) || self.np.is_multiple_of(2) {
            return bad("window and patch sizes must be odd");
        }
        if self.np >= self.nw {
            return bad("patch must be smaller than the search window");
        }
        if self.block_step == 0 || self.pocs_iters == 0 {
            return bad("block_step and pocs_iters must be positive");
        }
        if matches!(self.h, Some(h) if !(h > 0.0 && h.is_finite())) || !(self.h_factor > 0.0) {
            return bad("h must be positive");
        }
        if !(self.lambda2 > 0.0) {
            return bad("lambda2 must be positive");
        }
        Ok(())
    }

    /// Relaxation of the POCS step.
    pub fn alpha(&self) -> f64 {
        2.0 * self.lambda2
    }

    /// Decay parameter for a given volume.
    pub fn resolve_h(&self, x: &Cube) -> f64 {
        self.h.unwrap_or_else(|| self.h_factor * estimate_sigma(x))
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        if dims.nx < self.np || dims.ny < self.np || dims.t < self.np {
            return Err(Error::PatchTooLarge(format!(
                "patch {} exceeds volume {}x{}x{}",
                self.np, dims.nx, dims.ny, dims.t
            )));
        }
        Ok(())
    }
}

/// Weights of one center voxel over its clipped search window, listed in
/// (t, y, x) raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchWeights {
    pub center: [usize; 3],
    pub neighbours: Vec<[usize; 3]>,
    pub weights: Vec<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mad_sigma(mut r: Vec<f64>) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    let m = median(&mut r);
    let mut dev: Vec<f64> = r.iter().map(|v| (v - m).abs()).collect();
    1.4826 * median(&mut dev)
}

/// Robust noise level from normalized Laplacian pseudo-residuals.
///
/// Residuals `√(6/7)(x − mean of 6 neighbours)` over interior voxels (the
/// in-plane 4-neighbour form with `√(4/5)` when `t < 3`) have the noise
/// variance of `x`; σ is the scaled MAD of these residuals. Real and imaginary
/// channels are estimated separately and combined as `sqrt(σ_re² + σ_im²)`,
/// the total complex noise level.
pub fn estimate_sigma(x: &Cube) -> f64 {
    let Dims { nx, ny, t } = x.dims;
    if nx < 3 || ny < 3 {
        return SIGMA_FLOOR;
    }
    let temporal = t >= 3;
    let (scale, nb) = if temporal {
        ((6.0f64 / 7.0).sqrt(), 6.0)
    } else {
        ((4.0f64 / 5.0).sqrt(), 4.0)
    };
    let (t0, t1) = if temporal { (1, t - 1) } else { (0, t) };
    let mut re = Vec::new();
    let mut im = Vec::new();
    for tt in t0..t1 {
        for y in 1..ny - 1 {
            for xx in 1..nx - 1 {
                let i = x.dims.index(xx, y, tt);
                let mut s = x.data[i - 1] + x.data[i + 1] + x.data[i - nx] + x.data[i + nx];
                if temporal {
                    let f = nx * ny;
                    s += x.data[i - f] + x.data[i + f];
                }
                let r = (x.data[i] - s / nb) * scale;
                re.push(r.re);
                im.push(r.im);
            }
        }
    }
    let s_re = mad_sigma(re);
    let s_im = mad_sigma(im);
    let s = (s_re * s_re + s_im * s_im).sqrt();
    if s.is_finite() {
        s.max(SIGMA_FLOOR)
    } else {
        SIGMA_FLOOR
    }
}

struct Geometry {
    dims: Dims,
    pr: isize,
    wr: isize,
}

impl Geometry {
    fn extent(&self, axis: usize) -> isize {
        [self.dims.nx, self.dims.ny, self.dims.t][axis] as isize
    }

    /// Offsets `o` with `|o| ≤ pr` valid around both `p` and `q` on one axis.
    fn patch_range(&self, axis: usize, p: isize, q: isize) -> (isize, isize) {
        let n = self.extent(axis);
        let lo = (-self.pr).max(-p).max(-q);
        let hi = self.pr.min(n - 1 - p).min(n - 1 - q);
        (lo, hi)
    }

    fn window_range(&self, axis: usize, c: isize) -> (isize, isize) {
        let n = self.extent(axis);
        ((c - self.wr).max(0), (c + self.wr).min(n - 1))
    }

    /// `‖P_p − P_q‖²` over valid offsets, rescaled to the full patch size.
    fn patch_distance(&self, data: &[Complex64], p: [isize; 3], q: [isize; 3]) -> f64 {
        let (nx, ny) = (self.dims.nx as isize, self.dims.ny as isize);
        let (x0, x1) = self.patch_range(0, p[0], q[0]);
        let (y0, y1) = self.patch_range(1, p[1], q[1]);
        let (t0, t1) = self.patch_range(2, p[2], q[2]);
        let mut acc = 0.0;
        for ot in t0..=t1 {
            for oy in y0..=y1 {
                let rp = ((p[2] + ot) * ny + p[1] + oy) * nx + p[0];
                let rq = ((q[2] + ot) * ny + q[1] + oy) * nx + q[0];
                let a = &data[(rp + x0) as usize..=(rp + x1) as usize];
                let b = &data[(rq + x0) as usize..=(rq + x1) as usize];
                acc += a.iter().zip(b).map(|(u, v)| (u - v).norm_sqr()).sum::<f64>();
            }
        }
        let valid = ((x1 - x0 + 1) * (y1 - y0 + 1) * (t1 - t0 + 1)) as f64;
        let full = ((2 * self.pr + 1).pow(3)) as f64;
        acc * full / valid
    }
}

fn geometry(dims: Dims, cfg: &NlmConfig) -> Geometry {
    Geometry {
        dims,
        pr: (cfg.np / 2) as isize,
        wr: (cfg.nw / 2) as isize,
    }
}

/// φ over the search window of `center`.
pub fn patch_weights(x: &Cube, center: [usize; 3], cfg: &NlmConfig, h: f64) -> Result<PatchWeights> {
    cfg.validate()?;
    cfg.check_dims(x.dims)?;
    let g = geometry(x.dims, cfg);
    let c = center.map(|v| v as isize);
    let inv_h2 = 1.0 / (h * h);
    let mut neighbours = Vec::new();
    let mut weights = Vec::new();
    let (wx, wy, wt) = (g.window_range(0, c[0]), g.window_range(1, c[1]), g.window_range(2, c[2]));
    for qt in wt.0..=wt.1 {
        for qy in wy.0..=wy.1 {
            for qx in wx.0..=wx.1 {
                let q = [qx, qy, qt];
                neighbours.push(q.map(|v| v as usize));
                weights.push((-g.patch_distance(&x.data, c, q) * inv_h2).exp());
            }
        }
    }
    Ok(PatchWeights {
        center,
        neighbours,
        weights,
    })
}

fn lattice(n: usize, step: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).step_by(step).collect();
    if *v.last().unwrap() != n - 1 {
        v.push(n - 1);
    }
    v
}

/// Blockwise 3D nonlocal-means filter with decay `h`.
pub fn nlm_filter_3d(x: &Cube, cfg: &NlmConfig, h: f64) -> Result<Cube> {
    cfg.validate()?;
    cfg.check_dims(x.dims)?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    let dims = x.dims;
    let g = geometry(dims, cfg);
    let br = (cfg.block_step / 2) as isize;
    let (lx, ly, lt) = (
        lattice(dims.nx, cfg.block_step),
        lattice(dims.ny, cfg.block_step),
        lattice(dims.t, cfg.block_step),
    );
    let mut centers = Vec::with_capacity(lx.len() * ly.len() * lt.len());
    for &t in &lt {
        for &y in &ly {
            for &xx in &lx {
                centers.push([xx as isize, y as isize, t as isize]);
            }
        }
    }
    let inv_h2 = 1.0 / (h * h);
    let data = &x.data;
    let (nx, ny) = (dims.nx as isize, dims.ny as isize);

    let blocks: Vec<(Vec<usize>, Vec<Complex64>)> = centers
        .par_iter()
        .map(|&c| {
            let bx = ((c[0] - br).max(0), (c[0] + br).min(nx - 1));
            let by = ((c[1] - br).max(0), (c[1] + br).min(ny - 1));
            let bt = ((c[2] - br).max(0), (c[2] + br).min(dims.t as isize - 1));
            let mut idx = Vec::new();
            let mut offs = Vec::new();
            for t in bt.0..=bt.1 {
                for y in by.0..=by.1 {
                    for xx in bx.0..=bx.1 {
                        idx.push(((t * ny + y) * nx + xx) as usize);
                        offs.push([xx - c[0], y - c[1], t - c[2]]);
                    }
                }
            }
            let mut num = vec![ZERO; idx.len()];
            let mut den = vec![0.0; idx.len()];
            let (wx, wy, wt) = (g.window_range(0, c[0]), g.window_range(1, c[1]), g.window_range(2, c[2]));
            for qt in wt.0..=wt.1 {
                for qy in wy.0..=wy.1 {
                    for qx in wx.0..=wx.1 {
                        let q = [qx, qy, qt];
                        let w = (-g.patch_distance(data, c, q) * inv_h2).exp();
                        for (k, o) in offs.iter().enumerate() {
                            let s = [q[0] + o[0], q[1] + o[1], q[2] + o[2]];
                            if s[0] < 0 || s[1] < 0 || s[2] < 0 || s[0] >= nx || s[1] >= ny || s[2] >= dims.t as isize {
                                continue;
                            }
                            num[k] += data[((s[2] * ny + s[1]) * nx + s[0]) as usize] * w;
                            den[k] += w;
                        }
                    }
                }
            }
            let est = num.iter().zip(&den).map(|(n, d)| n / *d).collect();
            (idx, est)
        })
        .collect();

    let mut acc = vec![ZERO; dims.len()];
    let mut count = vec![0u32; dims.len()];
    for (idx, est) in &blocks {
        for (&i, e) in idx.iter().zip(est) {
            acc[i] += e;
            count[i] += 1;
        }
    }
    let out = acc
        .iter()
        .zip(&count)
        .map(|(a, &c)| a / c as f64)
        .collect();
    Cube::from_vec(dims, out)
}

/// `Σ_p Σ_{q ∈ N_p} φ(p, q)‖P_p − P_q‖²` with weights computed from `x`.
pub fn nonlocal_penalty(x: &Cube, cfg: &NlmConfig, h: f64) -> Result<f64> {
    cfg.validate()?;
    cfg.check_dims(x.dims)?;
    let dims = x.dims;
    let g = geometry(dims, cfg);
    let inv_h2 = 1.0 / (h * h);
    let per_voxel: Vec<f64> = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let f = dims.frame_len();
            let p = [(i % dims.nx) as isize, ((i % f) / dims.nx) as isize, (i / f) as isize];
            let (wx, wy, wt) = (g.window_range(0, p[0]), g.window_range(1, p[1]), g.window_range(2, p[2]));
            let mut acc = 0.0;
            for qt in wt.0..=wt.1 {
                for qy in wy.0..=wy.1 {
                    for qx in wx.0..=wx.1 {
                        let d = g.patch_distance(&x.data, p, [qx, qy, qt]);
                        acc += (-d * inv_h2).exp() * d;
                    }
                }
            }
            acc
        })
        .collect();
    Ok(per_voxel.iter().sum())
}

/// Alternating data consistency and relaxed NLM denoising.
///
/// `y` holds the k-space measurements, `x0` the starting image series. The
/// decay parameter is fixed from `x0` (unless configured) and the weights are
/// recomputed from the current iterate on every pass.
pub fn prox_nlm_pocs(y: &Cube, mask: &SamplingMask, x0: &Cube, cfg: &NlmConfig) -> Result<Cube> {
    cfg.validate()?;
    if y.dims != x0.dims {
        return Err(dims_mismatch(x0.dims, y.dims));
    }
    let enc = Encoder::new(mask);
    let h = cfg.resolve_h(x0);
    let alpha = cfg.alpha();
    let mut x = x0.clone();
    for k in 0..cfg.pocs_iters {
        let proj = enc.project_data(&x, y)?;
        let den = nlm_filter_3d(&proj, cfg, h)?;
        for ((xi, p), d) in x.data.iter_mut().zip(&proj.data).zip(&den.data) {
            *xi = p + (d - p) * alpha;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                iteration: k,
                stage: "nlm",
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_cube(dims: Dims, seed: u64) -> Cube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.len())
            .map(|_| Complex64::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        Cube::from_vec(dims, data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NlmConfig::default().validate().is_ok());
        for cfg in [
            NlmConfig { np: 7, ..NlmConfig::default() },
            NlmConfig { nw: 6, ..NlmConfig::default() },
            NlmConfig { h: Some(0.0), ..NlmConfig::default() },
            NlmConfig { block_step: 0, ..NlmConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn small_volume_is_rejected() {
        let x = Cube::zeros(Dims::new(8, 8, 4).unwrap());
        assert!(matches!(
            nlm_filter_3d(&x, &NlmConfig::default(), 1.0),
            Err(Error::PatchTooLarge(_))
        ));
    }

    #[test]
    fn constant_volume_is_unchanged() {
        let dims = Dims::new(9, 8, 6).unwrap();
        let x = Cube::from_vec(dims, vec![Complex64::new(0.4, -0.1); dims.len()]).unwrap();
        let out = nlm_filter_3d(&x, &NlmConfig::default(), 0.01).unwrap();
        for z in &out.data {
            assert!((z - Complex64::new(0.4, -0.1)).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_sigma_is_floored() {
        let dims = Dims::new(9, 8, 6).unwrap();
        let x = Cube::from_vec(dims, vec![Complex64::new(0.7, 0.0); dims.len()]).unwrap();
        assert_eq!(estimate_sigma(&x), 1e-6);
    }

    fn noise_cube(dims: Dims, sigma: f64, seed: u64, base: impl Fn(usize, usize, usize) -> f64) -> Cube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Cube::zeros(dims);
        for t in 0..dims.t {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let n: f64 = rng.sample(StandardNormal);
                    c.data[dims.index(x, y, t)] = Complex64::new(base(x, y, t) + sigma * n, 0.0);
                }
            }
        }
        c
    }

    #[test]
    fn sigma_of_pure_noise() {
        let dims = Dims::new(32, 32, 8).unwrap();
        for seed in 0..10 {
            let s = estimate_sigma(&noise_cube(dims, 0.01, seed, |_, _, _| 0.0));
            assert!((s - 0.01).abs() <= 0.2 * 0.01, "seed {seed}: {s}");
        }
    }

    #[test]
    fn sigma_of_noisy_phantom() {
        let dims = Dims::new(32, 32, 8).unwrap();
        let phantom = |x: usize, y: usize, t: usize| {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            if dx * dx + dy * dy < 100.0 {
                0.6 + 0.02 * t as f64
            } else {
                0.1
            }
        };
        for seed in 0..10 {
            let s = estimate_sigma(&noise_cube(dims, 0.05, 100 + seed, phantom));
            assert!((s - 0.05).abs() <= 0.25 * 0.05, "seed {seed}: {s}");
        }
    }

    #[test]
    fn complex_noise_pools_channels() {
        let dims = Dims::new(32, 32, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = 0.02 / 2f64.sqrt();
        let data = (0..dims.len())
            .map(|_| Complex64::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let est = estimate_sigma(&Cube::from_vec(dims, data).unwrap());
        assert!((est - 0.02).abs() < 0.1 * 0.02);
    }
    /// Per-voxel weighted average with explicit loops over every window and patch
    /// Per-voxel Eq. (3)+(9) with explicit loops over every window and patch
    /// offset.
    fn brute_force(x: &Cube, nw: usize, np: usize, h: f64) -> Vec<Complex64> {
        let d = x.dims;
        let (n, wr, pr) = ([d.nx as i64, d.ny as i64, d.t as i64], (nw / 2) as i64, (np / 2) as i64);
        let at = |p: [i64; 3]| x.data[d.index(p[0] as usize, p[1] as usize, p[2] as usize)];
        let inside = |p: [i64; 3]| (0..3).all(|a| p[a] >= 0 && p[a] < n[a]);
        let mut out = Vec::new();
        for pt in 0..n[2] {
            for py in 0..n[1] {
                for px in 0..n[0] {
                    let p = [px, py, pt];
                    let mut num = ZERO;
                    let mut den = 0.0;
                    for dt in -wr..=wr {
                        for dy in -wr..=wr {
                            for dx in -wr..=wr {
                                let q = [px + dx, py + dy, pt + dt];
                                if !inside(q) {
                                    continue;
                                }
                                let mut dist = 0.0;
                                let mut valid = 0usize;
                                for ot in -pr..=pr {
                                    for oy in -pr..=pr {
                                        for ox in -pr..=pr {
                                            let a = [p[0] + ox, p[1] + oy, p[2] + ot];
                                            let b = [q[0] + ox, q[1] + oy, q[2] + ot];
                                            if inside(a) && inside(b) {
                                                dist += (at(a) - at(b)).norm_sqr();
                                                valid += 1;
                                            }
                                        }
                                    }
                                }
                                dist *= ((2 * pr + 1).pow(3)) as f64 / valid as f64;
                                let w = (-dist / (h * h)).exp();
                                num += at(q) * w;
                                den += w;
                            }
                        }
                    }
                    out.push(num / den);
                }
            }
        }
        out
    }

    #[test]
    fn step_one_matches_brute_force() {
        let dims = Dims::new(12, 12, 6).unwrap();
        let x = random_cube(dims, 7);
        let cfg = NlmConfig { block_step: 1, ..NlmConfig::default() };
        for h in [0.5, 2.0] {
            let fast = nlm_filter_3d(&x, &cfg, h).unwrap();
            let oracle = brute_force(&x, cfg.nw, cfg.np, h);
            for (a, b) in fast.data.iter().zip(&oracle) {
                assert!((a - b).norm() <= 1e-6 * b.norm(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn huge_h_gives_window_mean() {
        let dims = Dims::new(12, 12, 6).unwrap();
        let x = random_cube(dims, 8);
        let cfg = NlmConfig { block_step: 1, ..NlmConfig::default() };
        let out = nlm_filter_3d(&x, &cfg, 1e9).unwrap();
        let w = 3i64;
        for t in 0..6i64 {
            for y in 0..12i64 {
                for xx in 0..12i64 {
                    let mut s = ZERO;
                    let mut c = 0.0;
                    for qt in (t - w).max(0)..=(t + w).min(5) {
                        for qy in (y - w).max(0)..=(y + w).min(11) {
                            for qx in (xx - w).max(0)..=(xx + w).min(11) {
                                s += x.data[dims.index(qx as usize, qy as usize, qt as usize)];
                                c += 1.0;
                            }
                        }
                    }
                    let got = out.data[dims.index(xx as usize, y as usize, t as usize)];
                    assert!((got - s / c).norm() <= 1e-6 * (s / c).norm());
                }
            }
        }
    }

    #[test]
    fn weights_are_bounded_with_unit_self_weight() {
        let dims = Dims::new(10, 10, 6).unwrap();
        let x = random_cube(dims, 9);
        let cfg = NlmConfig::default();
        for center in [[0, 0, 0], [5, 4, 3], [9, 9, 5]] {
            let pw = patch_weights(&x, center, &cfg, 0.8).unwrap();
            assert!(pw.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
            let own = pw.neighbours.iter().position(|&q| q == center).unwrap();
            assert_eq!(pw.weights[own], 1.0);
        }
    }

    #[test]
    fn output_is_a_convex_combination() {
        let dims = Dims::new(12, 10, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = (0..dims.len()).map(|_| Complex64::new(rng.random_range(-2.0..3.0), 0.0)).collect();
        let x = Cube::from_vec(dims, data).unwrap();
        let (lo, hi) = x.data.iter().fold((f64::MAX, f64::MIN), |(l, h), z| (l.min(z.re), h.max(z.re)));
        for step in [1, 2, 3] {
            let cfg = NlmConfig { block_step: step, ..NlmConfig::default() };
            let out = nlm_filter_3d(&x, &cfg, 1.5).unwrap();
            for z in &out.data {
                assert!(z.re >= lo - 1e-12 && z.re <= hi + 1e-12);
                assert!(z.im.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blockwise_is_deterministic_across_pools() {
        let dims = Dims::new(12, 12, 6).unwrap();
        let x = random_cube(dims, 11);
        let cfg = NlmConfig::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| nlm_filter_3d(&x, &cfg, 0.7).unwrap())
        };
        assert_eq!(run(1).data, run(4).data);
    }

    #[test]
    fn pocs_with_full_mask_is_relaxed_nlm() {
        let dims = Dims::new(10, 10, 6).unwrap();
        let truth = random_cube(dims, 12);
        let mask = SamplingMask::full(dims);
        let enc = Encoder::new(&mask);
        let y = enc.forward(&truth).unwrap();
        let cfg = NlmConfig { pocs_iters: 1, h: Some(0.9), ..NlmConfig::default() };
        let out = prox_nlm_pocs(&y, &mask, &truth, &cfg).unwrap();
        let den = nlm_filter_3d(&truth, &cfg, 0.9).unwrap();
        let a = cfg.alpha();
        for ((o, t), d) in out.data.iter().zip(&truth.data).zip(&den.data) {
            assert!((o - (t + (d - t) * a)).norm() < 1e-10);
        }
    }

    #[test]
    fn pocs_of_zero_data_is_zero() {
        let dims = Dims::new(10, 10, 6).unwrap();
        let mask = crate::sampler::make_cartesian_vd_mask(10, 10, 6, 2.0, 1).unwrap();
        let z = Cube::zeros(dims);
        let out = prox_nlm_pocs(&z, &mask, &z, &NlmConfig::default()).unwrap();
        assert!(out.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn projection_restores_measured_samples() {
        let dims = Dims::new(16, 16, 5).unwrap();
        let mask = crate::sampler::make_radial_mask(16, 16, 5, 4.0, 2).unwrap();
        let enc = Encoder::new(&mask);
        let y = enc.forward(&random_cube(dims, 13)).unwrap();
        let proj = enc.project_data(&random_cube(dims, 14), &y).unwrap();
        let back = enc.forward(&proj).unwrap();
        for (a, b) in back.data.iter().zip(&y.data) {
            assert!((a - b).norm() <= 1e-7);
        }
    }
}
