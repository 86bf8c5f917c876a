//! Imputation of distribution-valued responses under the 2-Wasserstein
//! geometry.
//!
//! Responses are quantile functions on a probability grid. Missing responses
//! are imputed with an inverse-probability-weighted global Fréchet
//! regression, the imputation uncertainty is quantified with split conformal
//! bands, and a per-subject uncertainty radius drives a threshold sweep
//! against a downstream survival model.

pub mod bspline;
pub mod conformal;
pub mod dataset;
pub mod error;
pub mod frechet;
pub mod io;
pub mod linalg;
pub mod par;
pub mod personalize;
pub mod pipeline;
pub mod propensity;
pub mod quantile;
mod serde_float;
pub mod sim;
pub mod survival;

pub use error::{Error, ErrorKind, Result};
