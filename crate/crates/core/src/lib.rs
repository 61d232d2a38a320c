//! Reconstruction of undersampled dynamic perfusion MRI with a joint
//! dynamic-TV / nonlocal-means penalty, and DSC / DCE tracer-kinetic
//! quantification of the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fft;
pub mod gfbs;
pub mod kinetics;
pub mod metrics;
pub mod phantom;
pub mod prox_dtv;
pub mod prox_nlm;
pub mod sampler;
pub mod volume;

pub use error::{Error, Result};
