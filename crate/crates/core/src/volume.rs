//! Data model for dynamic image series, k-space series and parameter maps,
//! plus the `.pvol` binary container.
//!
//! Every volume is stored frame-major: voxel `(x, y, t)` lives at
//! `t * nx * ny + y * nx + x`, so one frame is a contiguous slice.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub t: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, t: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || t == 0 {
            return Err(Error::InvalidArgument(format!(
                "dimensions must be positive, got {nx}x{ny}x{t}"
            )));
        }
        Ok(Self { nx, ny, t })
    }

    pub fn frame_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, t: usize) -> usize {
        (t * self.ny + y) * self.nx + x
    }
}

/// Double-precision working buffer used inside the solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub dims: Dims,
    pub data: Vec<Complex64>,
}

impl Cube {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![Complex64::new(0.0, 0.0); dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(dims_mismatch(dims.len(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        let n = self.dims.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frames(&self) -> std::slice::Chunks<'_, Complex64> {
        self.data.chunks(self.dims.frame_len())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `Σ conj(self) · other`
    pub fn dot(&self, other: &Cube) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// `‖self − other‖²`
    pub fn dist_sqr(&self, other: &Cube) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum()
    }

    pub fn temporal_mean(&self) -> Vec<Complex64> {
        let n = self.dims.frame_len();
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        for frame in self.frames() {
            for (a, v) in acc.iter_mut().zip(frame) {
                *a += v;
            }
        }
        let inv = 1.0 / self.dims.t as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn to_series(&self, dt: f64) -> Result<ImageSeries> {
        ImageSeries::new(
            self.dims,
            dt,
            self.data
                .iter()
                .map(|z| Complex32::new(z.re as f32, z.im as f32))
                .collect(),
        )
    }
}

/// Complex single-precision spatio-temporal image series.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSeries {
    dims: Dims,
    dt: f64,
    data: Vec<Complex32>,
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    Ok(())
}

impl ImageSeries {
    pub fn new(dims: Dims, dt: f64, data: Vec<Complex32>) -> Result<Self> {
        Dims::new(dims.nx, dims.ny, dims.t)?;
        check_dt(dt)?;
        if data.len() != dims.len() {
            return Err(dims_mismatch(dims.len(), data.len()));
        }
        Ok(Self { dims, dt, data })
    }

    pub fn zeros(dims: Dims, dt: f64) -> Result<Self> {
        Self::new(dims, dt, vec![Complex32::new(0.0, 0.0); dims.len()])
    }

    pub fn from_real(dims: Dims, dt: f64, values: &[f32]) -> Result<Self> {
        Self::new(
            dims,
            dt,
            values.iter().map(|&v| Complex32::new(v, 0.0)).collect(),
        )
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex32] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, t: usize) -> Complex32 {
        self.data[self.dims.index(x, y, t)]
    }

    /// Magnitude time course of one voxel.
    pub fn voxel_curve(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.dims.t)
            .map(|t| {
                let z = self.get(x, y, t);
                (z.re as f64).hypot(z.im as f64)
            })
            .collect()
    }

    pub fn to_cube(&self) -> Cube {
        Cube {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|z| Complex64::new(z.re as f64, z.im as f64))
                .collect(),
        }
    }

    pub fn into_data(self) -> Vec<Complex32> {
        self.data
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Container::complex(self.dims, self.dt, self.data.clone()).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Container::load(path)?.into_series()
    }
}

/// Per-frame Fourier samples; entries outside the sampling mask are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSeries {
    dims: Dims,
    dt: f64,
    data: Vec<Complex32>,
}

impl KSpaceSeries {
    pub fn new(dims: Dims, dt: f64, data: Vec<Complex32>) -> Result<Self> {
        Dims::new(dims.nx, dims.ny, dims.t)?;
        check_dt(dt)?;
        if data.len() != dims.len() {
            return Err(dims_mismatch(dims.len(), data.len()));
        }
        Ok(Self { dims, dt, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex32] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn to_cube(&self) -> Cube {
        Cube {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|z| Complex64::new(z.re as f64, z.im as f64))
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Container::complex(self.dims, self.dt, self.data.clone()).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(path)?;
        let s = c.into_series()?;
        Self::new(s.dims, s.dt, s.data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MapKind {
    Cbf,
    Cbv,
    Mtt,
    Ktrans,
    Vp,
    T1,
    /// Equilibrium magnetization from the variable-flip-angle fit.
    M,
}

impl MapKind {
    pub fn label(&self) -> &'static str {
        match self {
            MapKind::Cbf => "CBF",
            MapKind::Cbv => "CBV",
            MapKind::Mtt => "MTT",
            MapKind::Ktrans => "KTRANS",
            MapKind::Vp => "VP",
            MapKind::T1 => "T1",
            MapKind::M => "M",
        }
    }

    pub fn default_units(&self) -> &'static str {
        match self {
            MapKind::Cbf => "relative (1/s)",
            MapKind::Cbv => "relative",
            MapKind::Mtt => "s",
            MapKind::Ktrans => "1/min",
            MapKind::Vp => "fraction",
            MapKind::T1 => "s",
            MapKind::M => "a.u.",
        }
    }
}

/// Real-valued 2D parameter map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMap {
    pub nx: usize,
    pub ny: usize,
    pub kind: MapKind,
    pub units: String,
    pub data: Vec<f32>,
}

impl ParameterMap {
    pub fn new(nx: usize, ny: usize, kind: MapKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(dims_mismatch(nx * ny, data.len()));
        }
        Ok(Self {
            nx,
            ny,
            kind,
            units: kind.default_units().to_string(),
            data,
        })
    }

    pub fn zeros(nx: usize, ny: usize, kind: MapKind) -> Self {
        Self {
            nx,
            ny,
            kind,
            units: kind.default_units().to_string(),
            data: vec![0.0; nx * ny],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.nx + x]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Container {
            dims: vec![self.nx as u32, self.ny as u32],
            dt: 0.0,
            payload: Payload::Float32(self.data.clone()),
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>, kind: MapKind) -> Result<Self> {
        let c = Container::load(path)?;
        match (c.dims.as_slice(), c.payload) {
            (&[nx, ny], Payload::Float32(data)) => Self::new(nx as usize, ny as usize, kind, data),
            _ => Err(Error::Container(
                "expected a rank-2 float32 parameter map".into(),
            )),
        }
    }

    /// 8-bit PGM preview, linear window over [0, 99th percentile].
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut sorted: Vec<f32> = self.data.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let hi = if sorted.is_empty() {
            0.0
        } else {
            sorted[((sorted.len() - 1) as f64 * 0.99).round() as usize]
        };
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.nx, self.ny)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                if hi > 0.0 && v.is_finite() {
                    ((v.max(0.0) / hi).min(1.0) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }
}

/// Uniformly sampled real-valued time curve.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeCurve {
    values: Vec<f64>,
    dt: f64,
}

impl TimeCurve {
    pub fn new(values: Vec<f64>, dt: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "time curve needs at least 2 samples, got {}",
                values.len()
            )));
        }
        check_dt(dt)?;
        Ok(Self { values, dt })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| i as f64 * self.dt)
    }

    pub fn scaled(&self, a: f64) -> TimeCurve {
        TimeCurve {
            values: self.values.iter().map(|v| v * a).collect(),
            dt: self.dt,
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// CSV with header `t_seconds,value`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t_seconds,value")?;
        for (t, v) in self.times().zip(&self.values) {
            writeln!(w, "{t},{v}")?;
        }
        Ok(())
    }
}

/// Global magnitude range used by [`minmax_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRange {
    pub min: f64,
    pub max: f64,
}

impl NormRange {
    /// Maps normalized magnitudes back to the original range; phase is kept.
    pub fn denormalize(&self, series: &ImageSeries) -> ImageSeries {
        let span = self.max - self.min;
        let data = series
            .data
            .iter()
            .map(|z| {
                let m = z.norm() as f64;
                let target = m * span + self.min;
                rescale(*z, m, target)
            })
            .collect();
        ImageSeries {
            dims: series.dims,
            dt: series.dt,
            data,
        }
    }
}

fn rescale(z: Complex32, m: f64, target: f64) -> Complex32 {
    if m > 0.0 {
        let f = (target / m) as f32;
        Complex32::new(z.re * f, z.im * f)
    } else {
        Complex32::new(target as f32, 0.0)
    }
}

/// Affine map of all magnitudes onto [0, 1] with one global (min, max) pair.
pub fn minmax_normalize(series: &ImageSeries) -> Result<(ImageSeries, NormRange)> {
    let (min, max) = series
        .data
        .iter()
        .map(|z| z.norm() as f64)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            (lo.min(m), hi.max(m))
        });
    if !(max > min) {
        return Err(Error::DegenerateRange);
    }
    let span = max - min;
    let data = series
        .data
        .iter()
        .map(|z| {
            let m = z.norm() as f64;
            rescale(*z, m, ((m - min) / span).clamp(0.0, 1.0))
        })
        .collect();
    Ok((
        ImageSeries {
            dims: series.dims,
            dt: series.dt,
            data,
        },
        NormRange { min, max },
    ))
}

/// Voxel-wise modulus; the imaginary part of the result is zero.
pub fn magnitude(series: &ImageSeries) -> ImageSeries {
    ImageSeries {
        dims: series.dims,
        dt: series.dt,
        data: series
            .data
            .iter()
            .map(|z| Complex32::new(z.norm(), 0.0))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// .pvol container

pub const PVOL_MAGIC: &[u8; 8] = b"PVOL0001";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Complex64(Vec<Complex32>),
    Float32(Vec<f32>),
    Mask(Vec<u8>),
}

impl Payload {
    pub fn dtype_code(&self) -> u8 {
        match self {
            Payload::Complex64(_) => 1,
            Payload::Float32(_) => 2,
            Payload::Mask(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::Complex64(v) => v.len(),
            Payload::Float32(v) => v.len(),
            Payload::Mask(v) => v.len(),
        }
    }
}

/// In-memory form of a `.pvol` file.
///
/// Layout: magic `PVOL0001`, u8 dtype code, u8 rank, `rank` little-endian u32
/// dims, little-endian f64 dt, then the raw little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub dims: Vec<u32>,
    pub dt: f64,
    pub payload: Payload,
}

impl Container {
    pub fn complex(dims: Dims, dt: f64, data: Vec<Complex32>) -> Self {
        Self {
            dims: vec![dims.nx as u32, dims.ny as u32, dims.t as u32],
            dt,
            payload: Payload::Complex64(data),
        }
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Container("rank exceeds 255".into()));
        }
        if self.payload.len() != self.element_count() {
            return Err(Error::Container(format!(
                "payload has {} elements but dims {:?} imply {}",
                self.payload.len(),
                self.dims,
                self.element_count()
            )));
        }
        w.write_all(PVOL_MAGIC)?;
        w.write_all(&[self.payload.dtype_code(), self.dims.len() as u8])?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        match &self.payload {
            Payload::Complex64(v) => {
                let mut buf = Vec::with_capacity(v.len() * 8);
                for z in v {
                    buf.extend_from_slice(&z.re.to_le_bytes());
                    buf.extend_from_slice(&z.im.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            Payload::Float32(v) => {
                let buf: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                w.write_all(&buf)?;
            }
            Payload::Mask(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Container("file too short for header".into()))?;
        if &magic != PVOL_MAGIC {
            return Err(Error::Container(format!(
                "bad magic {:?}, expected \"PVOL0001\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)
            .map_err(|_| Error::Container("truncated header".into()))?;
        let (code, rank) = (head[0], head[1] as usize);
        if !(1..=3).contains(&code) {
            return Err(Error::Container(format!("unknown dtype code {code}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Container("truncated dims".into()))?;
            dims.push(u32::from_le_bytes(b));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| Error::Container("truncated dt".into()))?;
        let dt = f64::from_le_bytes(b);
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let elem = match code {
            1 => 8,
            2 => 4,
            _ => 1,
        };
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != count * elem {
            return Err(Error::Container(format!(
                "payload size {} bytes does not match dims {:?} ({} bytes expected)",
                raw.len(),
                dims,
                count * elem
            )));
        }
        let payload = match code {
            1 => Payload::Complex64(
                raw.chunks_exact(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                            f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                        )
                    })
                    .collect(),
            ),
            2 => Payload::Float32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            _ => Payload::Mask(raw),
        };
        Ok(Self { dims, dt, payload })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn into_series(self) -> Result<ImageSeries> {
        match (self.dims.as_slice(), self.payload) {
            (&[nx, ny, t], Payload::Complex64(data)) => ImageSeries::new(
                Dims::new(nx as usize, ny as usize, t as usize)?,
                self.dt,
                data,
            ),
            (&[nx, ny, t], Payload::Float32(data)) => ImageSeries::from_real(
                Dims::new(nx as usize, ny as usize, t as usize)?,
                self.dt,
                &data,
            ),
            _ => Err(Error::Container(
                "expected a rank-3 complex or float series".into(),
            )),
        }
    }
}

pub fn save_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    c.save(path)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    Container::load(path)
}
