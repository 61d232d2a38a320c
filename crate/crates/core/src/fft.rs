//! Unitary 2D DFT over row-major `nx × ny` frames.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .finish()
    }
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            ny,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
            scale: 1.0 / ((nx * ny) as f64).sqrt(),
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn forward(&self, frame: &mut [Complex64]) {
        self.transform(frame, true);
    }

    pub fn inverse(&self, frame: &mut [Complex64]) {
        self.transform(frame, false);
    }

    fn transform(&self, frame: &mut [Complex64], forward: bool) {
        assert_eq!(frame.len(), self.nx * self.ny, "frame size mismatch");
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row.process(frame);
        let mut column = vec![Complex64::new(0.0, 0.0); self.ny];
        for x in 0..self.nx {
            for (y, c) in column.iter_mut().enumerate() {
                *c = frame[y * self.nx + x];
            }
            col.process(&mut column);
            for (y, c) in column.iter().enumerate() {
                frame[y * self.nx + x] = *c * self.scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_has_flat_spectrum() {
        let fft = Fft2::new(4, 6);
        let mut f = vec![Complex64::new(0.0, 0.0); 24];
        f[0] = Complex64::new(1.0, 0.0);
        fft.forward(&mut f);
        let expect = 1.0 / 24f64.sqrt();
        for z in &f {
            assert!((z.re - expect).abs() < 1e-14 && z.im.abs() < 1e-14);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let fft = Fft2::new(5, 3);
        let orig: Vec<Complex64> = (0..15)
            .map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos()))
            .collect();
        let mut f = orig.clone();
        fft.forward(&mut f);
        let e0: f64 = orig.iter().map(|z| z.norm_sqr()).sum();
        let e1: f64 = f.iter().map(|z| z.norm_sqr()).sum();
        assert!((e0 - e1).abs() < 1e-12 * e0);
        fft.inverse(&mut f);
        for (a, b) in f.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let (nx, ny) = (3, 4);
        let fft = Fft2::new(nx, ny);
        let orig: Vec<Complex64> = (0..nx * ny)
            .map(|i| Complex64::new(i as f64, (i * i) as f64 * 0.1))
            .collect();
        let mut f = orig.clone();
        fft.forward(&mut f);
        for ky in 0..ny {
            for kx in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..ny {
                    for x in 0..nx {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * ((kx * x) as f64 / nx as f64 + (ky * y) as f64 / ny as f64);
                        acc += orig[y * nx + x] * Complex64::from_polar(1.0, ph);
                    }
                }
                acc /= ((nx * ny) as f64).sqrt();
                assert!((acc - f[ky * nx + kx]).norm() < 1e-12);
            }
        }
    }
}
