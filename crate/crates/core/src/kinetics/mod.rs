//! Tracer-kinetic quantification of perfusion series.

pub mod dce;
pub mod dsc;

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Validates an arterial region against the grid.
pub(crate) fn check_region(region: &[(usize, usize)], dims: Dims) -> Result<()> {
    if region.is_empty() {
        return Err(Error::EmptyVessel);
    }
    if let Some(&(x, y)) = region.iter().find(|&&(x, y)| x >= dims.nx || y >= dims.ny) {
        return Err(Error::InvalidArgument(format!(
            "arterial voxel ({x}, {y}) outside {}x{} grid",
            dims.nx, dims.ny
        )));
    }
    Ok(())
}

/// Mean of a set of equally long curves.
pub(crate) fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves[0].len();
    let mut out = vec![0.0; n];
    for c in curves {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= curves.len() as f64);
    out
}
