//! Matrix-variate normal cluster-weighted models.
//!
//! The crate implements the matrix-normal distribution with Kronecker-
//! structured covariance, an ECM fitter for the matrix-normal cluster-
//! weighted model (MN-CWM), two baselines (the matrix-normal finite mixture
//! of regressions and the fully vectorized multivariate-normal CWM),
//! initialization and BIC-based model-selection machinery, clustering
//! metrics, a simulation-scenario catalog and a CLI front end.
//!
//! Everything numeric is generic over the scalar type through
//! [`scalar::Scalar`] (implemented for `f32` and `f64`); the `*64` aliases
//! below cover the common case.

pub mod baselines;
pub mod cli;
pub mod cwm;
pub mod error;
pub mod eval;
pub mod init;
pub mod io;
pub mod matnorm;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};

/// f64 specializations of the core types.
pub type SpdMatrix64 = matnorm::SpdMatrix<f64>;
pub type MatNormParams64 = matnorm::MatNormParams<f64>;
pub type MatNormDensity64 = matnorm::MatNormDensity<f64>;
pub type Dataset64 = cwm::Dataset<f64>;
pub type ComponentParams64 = cwm::ComponentParams<f64>;
pub type CwmParams64 = cwm::CwmParams<f64>;
pub type Responsibilities64 = cwm::Responsibilities<f64>;
pub type FitParams64 = cwm::FitParams<f64>;
pub type FittedModel64 = cwm::FittedModel<f64>;
pub type EcmInit64 = cwm::EcmInit<f64>;
pub type SelectionResult64 = eval::SelectionResult<f64>;
pub type ScenarioSpec64 = sim::ScenarioSpec<f64>;
