//! Reconstruction error and agreement statistics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Serialize, Serializer};

use crate::error::{dims_mismatch, Error, Result};
use crate::volume::{Cube, ImageSeries, ParameterMap};

/// Voxels whose reference value exceeds this enter map-level agreement.
pub const MAP_MASK_THRESHOLD: f64 = 1e-6;

fn check_len(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(dims_mismatch(a, b));
    }
    if a < min {
        return Err(Error::InvalidArgument(format!("need at least {min} samples, got {a}")));
    }
    Ok(())
}

/// Root mean squared difference of two value sequences.
pub fn rmse_values(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), 1)?;
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// RMSE between the magnitudes of two series.
pub fn rmse(xr: &ImageSeries, xf: &ImageSeries) -> Result<f64> {
    if xr.dims() != xf.dims() {
        return Err(dims_mismatch(xf.dims(), xr.dims()));
    }
    let s: f64 = xr
        .data()
        .iter()
        .zip(xf.data())
        .map(|(a, b)| {
            let d = (a.re as f64).hypot(a.im as f64) - (b.re as f64).hypot(b.im as f64);
            d * d
        })
        .sum();
    Ok((s / xr.data().len() as f64).sqrt())
}

/// RMSE between the magnitudes of two double-precision volumes.
pub fn rmse_cube(xr: &Cube, xf: &Cube) -> Result<f64> {
    if xr.dims != xf.dims {
        return Err(dims_mismatch(xf.dims, xr.dims));
    }
    let s: f64 = xr
        .data
        .iter()
        .zip(&xf.data)
        .map(|(a, b)| {
            let d = a.norm() - b.norm();
            d * d
        })
        .sum();
    Ok((s / xr.data.len() as f64).sqrt())
}

/// `20·log10(1/rmse)`; infinite for a zero error.
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        -20.0 * rmse.log10()
    }
}

pub fn psnr(xr: &ImageSeries, xf: &ImageSeries) -> Result<f64> {
    rmse(xr, xf).map(psnr_from_rmse)
}

/// Decibel value as printed in reports.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Lin's concordance correlation coefficient with population moments.
pub fn ccc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let n = a.len() as f64;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let den = va + vb + (ma - mb) * (ma - mb);
    if den == 0.0 {
        return if a == b { Ok(1.0) } else { Err(Error::Degenerate) };
    }
    Ok(2.0 * cov / den)
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AgreementStats {
    pub ccc: f64,
    pub ba_bias: f64,
    pub ba_lo: f64,
    pub ba_hi: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Bias and 95% limits of agreement of `a − b`, with the sample standard
/// deviation.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    check_len(a.len(), b.len(), 2)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let bias = mean(&d);
    let ss: f64 = d.iter().map(|v| (v - bias) * (v - bias)).sum();
    let sd = (ss / (d.len() - 1) as f64).sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        lo: bias - 1.96 * sd,
        hi: bias + 1.96 * sd,
        n: d.len(),
    })
}

/// `(mean, difference)` per pair.
pub fn bland_altman_points(a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    a.iter().zip(b).map(|(x, y)| (0.5 * (x + y), x - y)).collect()
}

pub fn write_bland_altman_csv(points: &[(f64, f64)], mut w: impl Write) -> Result<()> {
    writeln!(w, "mean,diff")?;
    for (m, d) in points {
        writeln!(w, "{m},{d}")?;
    }
    Ok(())
}

pub fn agreement(a: &[f64], b: &[f64]) -> Result<AgreementStats> {
    let ba = bland_altman(a, b)?;
    Ok(AgreementStats {
        ccc: ccc(a, b)?,
        ba_bias: ba.bias,
        ba_lo: ba.lo,
        ba_hi: ba.hi,
        n: ba.n,
    })
}

/// Estimated and reference values over voxels where the reference exceeds
/// [`MAP_MASK_THRESHOLD`].
pub fn masked_pairs(estimate: &ParameterMap, reference: &ParameterMap) -> Result<(Vec<f64>, Vec<f64>)> {
    if (estimate.nx, estimate.ny) != (reference.nx, reference.ny) {
        return Err(dims_mismatch((reference.nx, reference.ny), (estimate.nx, estimate.ny)));
    }
    Ok(estimate
        .data
        .iter()
        .zip(&reference.data)
        .filter(|(_, &r)| r as f64 > MAP_MASK_THRESHOLD)
        .map(|(&e, &r)| (e as f64, r as f64))
        .unzip())
}

pub fn map_agreement(estimate: &ParameterMap, reference: &ParameterMap) -> Result<AgreementStats> {
    let (e, r) = masked_pairs(estimate, reference)?;
    agreement(&e, &r)
}

/// PSNR value serialized as a number, or `"inf"` for an exact match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decibels(pub f64);

impl Serialize for Decibels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&format_db(self.0))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rmse: Option<f64>,
    pub psnr_db: Option<Decibels>,
    pub ccc: BTreeMap<String, f64>,
    pub bland_altman: BTreeMap<String, AgreementStats>,
}
