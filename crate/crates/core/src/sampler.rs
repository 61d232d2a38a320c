//! Time-varying undersampling masks, the masked unitary Fourier encoding
//! `y_t = A_t (F x_t + η)` and its adjoint.
//!
//! K-space is stored in natural DFT order (DC at index 0 of every frame).
//! Mask generators work in signed frequency coordinates and map back with
//! [`wrap_index`].
//!
//! Randomness comes from ChaCha8 streams: Cartesian masks seed a generator with
//! `seed ^ frame`; noise uses `seed` with the frame index as the stream id, so
//! every frame is reproducible regardless of evaluation order.

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::fft::Fft2;
use crate::volume::{Container, Cube, Dims, ImageSeries, KSpaceSeries, Payload};

/// Golden angle for radial spokes, 180°/φ.
pub const GOLDEN_ANGLE_DEG: f64 = 111.246_117_974_981_07;

/// Stream id used for the noise of the reference (frame-0, R≈2) scan.
const REFERENCE_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    CartesianVd,
    Radial,
}

/// How a mask was generated; absent for masks loaded from a file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOrigin {
    pub scheme: Scheme,
    pub requested_r: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    dims: Dims,
    bits: Vec<u8>,
    origin: Option<MaskOrigin>,
}

impl SamplingMask {
    pub fn new(dims: Dims, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(dims_mismatch(dims.len(), bits.len()));
        }
        Ok(Self {
            dims,
            bits: bits.into_iter().map(|b| (b != 0) as u8).collect(),
            origin: None,
        })
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![1; dims.len()],
            origin: None,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn origin(&self) -> Option<MaskOrigin> {
        self.origin
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.dims.frame_len();
        &self.bits[t * n..(t + 1) * n]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// `N / (number of sampled points)`.
    pub fn acceleration(&self) -> f64 {
        self.dims.len() as f64 / self.ones() as f64
    }

    pub fn frame_fraction(&self, t: usize) -> f64 {
        let f = self.frame(t);
        f.iter().map(|&b| b as usize).sum::<usize>() as f64 / f.len() as f64
    }

    pub fn to_container(&self) -> Container {
        Container {
            dims: vec![self.dims.nx as u32, self.dims.ny as u32, self.dims.t as u32],
            dt: 0.0,
            payload: Payload::Mask(self.bits.clone()),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        match (c.dims.as_slice(), c.payload) {
            (&[nx, ny, t], Payload::Mask(bits)) => {
                Self::new(Dims::new(nx as usize, ny as usize, t as usize)?, bits)
            }
            _ => Err(Error::Container("expected a rank-3 u8 mask".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    fn is_line_constant(&self) -> bool {
        let (nx, ny) = (self.dims.nx, self.dims.ny);
        (0..self.dims.t).all(|t| {
            let f = self.frame(t);
            (0..ny).all(|y| f[y * nx..(y + 1) * nx].iter().all(|&b| b == f[y * nx]))
        })
    }

    /// Frame-0 mask densified to acceleration `r_ref` by the same generator.
    ///
    /// Returns frame 0 unchanged when the run is already at or below `r_ref`.
    pub fn densified_first_frame(&self, r_ref: f64) -> Result<Vec<u8>> {
        let current = self.dims.frame_len() as f64
            / self.frame(0).iter().map(|&b| b as usize).sum::<usize>().max(1) as f64;
        let mut out = self.frame(0).to_vec();
        if current <= r_ref {
            return Ok(out);
        }
        let (scheme, seed) = match self.origin {
            Some(o) => (o.scheme, o.seed),
            None if self.is_line_constant() || self.dims.nx != self.dims.ny => {
                (Scheme::CartesianVd, 0)
            }
            None => (Scheme::Radial, 0),
        };
        let extra = make_mask(scheme, self.dims.nx, self.dims.ny, 1, r_ref, seed)?;
        for (o, &e) in out.iter_mut().zip(extra.frame(0)) {
            *o |= e;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Total complex noise power σ² (σ²/2 per real component).
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const PROTOCOL_VARIANCE: f64 = 1e-10;

    pub fn new(variance: f64, seed: u64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be >= 0, got {variance}"
            )));
        }
        Ok(Self { variance, seed })
    }

    pub fn none() -> Self {
        Self {
            variance: 0.0,
            seed: 0,
        }
    }
}

/// Natural DFT index of a signed frequency.
#[inline]
pub fn wrap_index(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Signed frequency of a natural DFT index.
#[inline]
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

fn check_r(r: f64) -> Result<()> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("R must be >= 1, got {r}")));
    }
    Ok(())
}

pub fn make_mask(scheme: Scheme, nx: usize, ny: usize, t: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    match scheme {
        Scheme::CartesianVd => make_cartesian_vd_mask(nx, ny, t, r, seed),
        Scheme::Radial => make_radial_mask(nx, ny, t, r, seed),
    }
}

/// Number of always-sampled central ky lines.
pub fn cartesian_center_lines(ny: usize) -> usize {
    ((0.04 * ny as f64).round() as usize).max(1)
}

/// Variable-density Cartesian mask: `⌈ny/R⌉` fully sampled ky lines per frame,
/// the central 4% always on, the rest drawn from a Gaussian density
/// (std `ny/6`) without replacement.
pub fn make_cartesian_vd_mask(nx: usize, ny: usize, t: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    check_r(r)?;
    let dims = Dims::new(nx, ny, t)?;
    if nx < 8 || ny < 8 {
        return Err(Error::InvalidArgument(format!(
            "mask dims must be >= 8, got {nx}x{ny}"
        )));
    }
    let lines = ((ny as f64 / r).ceil() as usize).min(ny);
    let center = cartesian_center_lines(ny);
    if lines < center {
        return Err(Error::RTooHigh);
    }
    let sigma = ny as f64 / 6.0;
    let half = (center / 2) as i64;
    let mut bits = vec![0u8; dims.len()];
    for (frame, out) in bits.chunks_mut(nx * ny).enumerate() {
        let mut chosen = vec![false; ny];
        for k in -half..(center as i64 - half) {
            chosen[wrap_index(k, ny)] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frame as u64);
        let weights: Vec<f64> = (0..ny)
            .map(|k| {
                let s = signed_freq(k, ny) as f64;
                (-s * s / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        for _ in center..lines {
            let total: f64 = (0..ny).filter(|&k| !chosen[k]).map(|k| weights[k]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for k in (0..ny).filter(|&k| !chosen[k]) {
                pick = Some(k);
                if u < weights[k] {
                    break;
                }
                u -= weights[k];
            }
            if let Some(k) = pick {
                chosen[k] = true;
            }
        }
        for (ky, _) in chosen.iter().enumerate().filter(|(_, &c)| c) {
            out[ky * nx..(ky + 1) * nx].fill(1);
        }
    }
    Ok(SamplingMask {
        dims,
        bits,
        origin: Some(MaskOrigin {
            scheme: Scheme::CartesianVd,
            requested_r: r,
            seed,
        }),
    })
}

/// Grid points hit by one spoke through the centre at angle `theta` (radians),
/// nearest-neighbour rasterized across the whole square.
fn spoke_points(n: usize, theta: f64) -> Vec<usize> {
    let lo = -((n / 2) as i64);
    let hi = lo + n as i64 - 1;
    let rmax = n as f64 * std::f64::consts::FRAC_1_SQRT_2 + 1.0;
    let steps = (2.0 * rmax / 0.5).ceil() as i64;
    let (s, c) = theta.sin_cos();
    let mut pts = Vec::with_capacity(steps as usize + 1);
    for i in 0..=steps {
        let r = -rmax + 0.5 * i as f64;
        let u = (r * c).round() as i64;
        let v = (r * s).round() as i64;
        if u < lo || u > hi || v < lo || v > hi {
            continue;
        }
        pts.push(wrap_index(v, n) * n + wrap_index(u, n));
    }
    pts
}

/// Spokes added one at a time; returns the frame mask whose sampled fraction is
/// closest to `target`, and the number of spokes used.
fn radial_frame(n: usize, target: f64, first_spoke: u64, offset: f64) -> (Vec<u8>, usize) {
    let total = n * n;
    let max_spokes = 16 * n;
    let mut frame = vec![0u8; total];
    let mut ones = 0usize;
    let mut best = (f64::INFINITY, 0usize);
    let mut history = Vec::new();
    for s in 0..max_spokes {
        let theta = offset + ((first_spoke + s as u64) as f64 * GOLDEN_ANGLE_DEG).to_radians();
        let mut added = Vec::new();
        for p in spoke_points(n, theta) {
            if frame[p] == 0 {
                frame[p] = 1;
                ones += 1;
                added.push(p);
            }
        }
        history.push(added);
        let frac = ones as f64 / total as f64;
        let err = (frac - target).abs();
        if err < best.0 {
            best = (err, s + 1);
        }
        if frac >= target * 1.1 || ones == total {
            break;
        }
    }
    for added in history.iter().skip(best.1) {
        for &p in added {
            frame[p] = 0;
        }
    }
    (frame, best.1)
}

/// Pseudo-radial mask: golden-angle spokes rasterized onto the Cartesian grid,
/// spoke count per frame searched so the sampled fraction is closest to `1/R`.
pub fn make_radial_mask(nx: usize, ny: usize, t: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    check_r(r)?;
    if nx != ny {
        return Err(Error::RadialNotSquare);
    }
    let dims = Dims::new(nx, ny, t)?;
    let n = nx;
    let target = 1.0 / r;
    let offset = ChaCha8Rng::seed_from_u64(seed).random::<f64>() * std::f64::consts::PI;
    let (first, per_frame) = radial_frame(n, target, 0, offset);
    let mut bits = Vec::with_capacity(dims.len());
    bits.extend_from_slice(&first);
    for f in 1..t {
        let (frame, _) = radial_frame(n, target, (f * per_frame) as u64, offset);
        bits.extend_from_slice(&frame);
    }
    Ok(SamplingMask {
        dims,
        bits,
        origin: Some(MaskOrigin {
            scheme: Scheme::Radial,
            requested_r: r,
            seed,
        }),
    })
}

/// Masked unitary Fourier encoding `F_u` over all frames.
#[derive(Clone, Debug)]
pub struct Encoder<'a> {
    mask: &'a SamplingMask,
    fft: Fft2,
}

impl<'a> Encoder<'a> {
    pub fn new(mask: &'a SamplingMask) -> Self {
        let d = mask.dims();
        Self {
            mask,
            fft: Fft2::new(d.nx, d.ny),
        }
    }

    pub fn dims(&self) -> Dims {
        self.mask.dims()
    }

    pub fn mask(&self) -> &SamplingMask {
        self.mask
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn check(&self, c: &Cube) -> Result<()> {
        if c.dims != self.dims() {
            return Err(dims_mismatch(self.dims(), c.dims));
        }
        Ok(())
    }

    fn per_frame(&self, mut out: Cube, f: impl Fn(usize, &mut [Complex64]) + Sync) -> Cube {
        let n = out.dims.frame_len();
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(t, frame)| f(t, frame));
        out
    }

    /// `A_t F x_t` for every frame.
    pub fn forward(&self, x: &Cube) -> Result<Cube> {
        self.check(x)?;
        Ok(self.per_frame(x.clone(), |t, frame| {
            self.fft.forward(frame);
            apply_mask(frame, self.mask.frame(t));
        }))
    }

    /// `F^H A_t y_t` for every frame.
    pub fn adjoint(&self, y: &Cube) -> Result<Cube> {
        self.check(y)?;
        Ok(self.per_frame(y.clone(), |t, frame| {
            apply_mask(frame, self.mask.frame(t));
            self.fft.inverse(frame);
        }))
    }

    /// `F_u^H (F_u x − y)`.
    pub fn gradient(&self, x: &Cube, y: &Cube) -> Result<Cube> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.per_frame(x.clone(), |t, frame| {
            self.fft.forward(frame);
            let m = self.mask.frame(t);
            let yt = y.frame(t);
            for i in 0..frame.len() {
                frame[i] = if m[i] != 0 {
                    frame[i] - yt[i]
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.fft.inverse(frame);
        }))
    }

    /// `x + F_u^H (y − F_u x)`: replaces the sampled k-space of `x` by `y`.
    pub fn project_data(&self, x: &Cube, y: &Cube) -> Result<Cube> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.per_frame(x.clone(), |t, frame| {
            self.fft.forward(frame);
            let m = self.mask.frame(t);
            let yt = y.frame(t);
            for i in 0..frame.len() {
                if m[i] != 0 {
                    frame[i] = yt[i];
                }
            }
            self.fft.inverse(frame);
        }))
    }

    /// `½‖F_u x − y‖²`.
    pub fn data_misfit(&self, x: &Cube, y: &Cube) -> Result<f64> {
        let fx = self.forward(x)?;
        Ok(0.5 * fx.dist_sqr(y))
    }
}

fn apply_mask(frame: &mut [Complex64], mask: &[u8]) {
    for (z, &m) in frame.iter_mut().zip(mask) {
        if m == 0 {
            *z = Complex64::new(0.0, 0.0);
        }
    }
}

fn frame_noise(rng: &mut ChaCha8Rng, std: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * std, im * std)
}

fn encode_frame(fft: &Fft2, frame: &mut [Complex64], mask: &[u8], noise: &NoiseSpec, stream: u64) {
    fft.forward(frame);
    if noise.variance > 0.0 {
        let std = (noise.variance / 2.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(stream);
        for z in frame.iter_mut() {
            *z += frame_noise(&mut rng, std);
        }
    }
    apply_mask(frame, mask);
}

fn to_c32(v: &[Complex64]) -> Vec<Complex32> {
    v.iter()
        .map(|z| Complex32::new(z.re as f32, z.im as f32))
        .collect()
}

/// `y_t = A_t (F x_t + η)`: unitary DFT, complex AWGN at every grid point,
/// then masking.
pub fn forward_encode(x: &ImageSeries, mask: &SamplingMask, noise: &NoiseSpec) -> Result<KSpaceSeries> {
    if x.dims() != mask.dims() {
        return Err(dims_mismatch(mask.dims(), x.dims()));
    }
    let d = x.dims();
    let fft = Fft2::new(d.nx, d.ny);
    let mut cube = x.to_cube();
    cube.data
        .par_chunks_mut(d.frame_len())
        .enumerate()
        .for_each(|(t, frame)| encode_frame(&fft, frame, mask.frame(t), noise, t as u64));
    KSpaceSeries::new(d, x.dt(), to_c32(&cube.data))
}

/// Zero-filled reconstruction: per-frame inverse unitary DFT.
pub fn adjoint(y: &KSpaceSeries) -> ImageSeries {
    let d = y.dims();
    let fft = Fft2::new(d.nx, d.ny);
    let mut cube = y.to_cube();
    cube.data
        .par_chunks_mut(d.frame_len())
        .for_each(|frame| fft.inverse(frame));
    cube.to_series(y.dt())
        .expect("dimensions carried over from a valid k-space series")
}

/// Separately acquired first-frame measurement used to bootstrap the
/// reconstruction's reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceScan {
    pub nx: usize,
    pub ny: usize,
    pub mask: Vec<u8>,
    pub data: Vec<Complex32>,
}

impl ReferenceScan {
    /// Zero-filled image of the scan.
    pub fn zero_filled(&self) -> Vec<Complex64> {
        let fft = Fft2::new(self.nx, self.ny);
        let mut f: Vec<Complex64> = self
            .data
            .iter()
            .map(|z| Complex64::new(z.re as f64, z.im as f64))
            .collect();
        fft.inverse(&mut f);
        f
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let dims = Dims::new(self.nx, self.ny, 1)?;
        let data = self
            .data
            .iter()
            .zip(&self.mask)
            .map(|(z, &m)| if m != 0 { *z } else { Complex32::new(0.0, 0.0) })
            .collect();
        Container::complex(dims, 1.0, data).save(&path)?;
        let mask_path = path.as_ref().with_extension("mask.pvol");
        SamplingMask::new(dims, self.mask.clone())?.save(mask_path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let s = Container::load(&path)?.into_series()?;
        let mask = SamplingMask::load(path.as_ref().with_extension("mask.pvol"))?;
        let d = s.dims();
        if d.t != 1 || mask.dims() != d {
            return Err(Error::Container("reference scan must be a single frame".into()));
        }
        Ok(Self {
            nx: d.nx,
            ny: d.ny,
            mask: mask.bits().to_vec(),
            data: s.into_data(),
        })
    }
}

/// Acquires frame 0 of `x` with the frame-0 mask densified to `r_ref`.
pub fn reference_scan(x: &ImageSeries, mask: &SamplingMask, noise: &NoiseSpec, r_ref: f64) -> Result<ReferenceScan> {
    if x.dims() != mask.dims() {
        return Err(dims_mismatch(mask.dims(), x.dims()));
    }
    let d = x.dims();
    let m0 = mask.densified_first_frame(r_ref)?;
    let fft = Fft2::new(d.nx, d.ny);
    let mut frame: Vec<Complex64> = x
        .frame(0)
        .iter()
        .map(|z| Complex64::new(z.re as f64, z.im as f64))
        .collect();
    encode_frame(&fft, &mut frame, &m0, noise, REFERENCE_STREAM);
    Ok(ReferenceScan {
        nx: d.nx,
        ny: d.ny,
        mask: m0,
        data: to_c32(&frame),
    })
}
