//! Operator fractional Brownian fields: operator polar coordinates, homogeneous functions,
//! harmonizable covariances, samplers and moving-average kernels.

pub mod error;
pub mod homog;
pub mod matcalc;
pub mod movavg;
pub mod polar;
pub mod quad;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
