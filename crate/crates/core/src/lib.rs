//! Cross-temporal reconciliation of hierarchical wind-power forecasts.
//!
//! The numerical core (`covariance`, `reconcile`, `evaluate`) is generic over
//! [`Scalar`]; the aliases below fix the precision. `forecast` and `pipeline`
//! work in `f64`.

pub mod covariance;
pub mod error;
pub mod evaluate;
pub mod forecast;
pub mod hierarchy;
pub mod linalg;
pub mod pipeline;
pub mod reconcile;
pub mod scalar;
pub mod sparse;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ErrorPanel64 = covariance::ErrorPanel<f64>;
pub type ErrorPanel32 = covariance::ErrorPanel<f32>;
pub type CovarianceModel64 = covariance::CovarianceModel<f64>;
pub type CovarianceModel32 = covariance::CovarianceModel<f32>;
pub type Reconciler64 = reconcile::Reconciler<f64>;
pub type Reconciler32 = reconcile::Reconciler<f32>;
pub type ReconciledResult64 = reconcile::ReconciledResult<f64>;
pub type ReconciledResult32 = reconcile::ReconciledResult<f32>;
