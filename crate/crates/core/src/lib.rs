//! Conditional independence regression covariance (CIRCE): a kernel measure
//! of `X ⊥ Z | Y` that needs only one offline ridge regression from `Y` to
//! features of `Z`, its use as a training regularizer, and the synthetic
//! benchmark harness around it.
//!
//! Module map:
//! - [`kernels`], [`linalg`]: Gaussian Gram matrices and SPD solves.
//! - [`cme`]: conditional mean embedding regression with closed-form
//!   leave-one-out selection of the ridge and `Y` bandwidth.
//! - [`estimator`]: the statistic (plain, debiased and centered variants).
//! - [`rff`]: random Fourier feature acceleration.
//! - [`baselines`]: HSCIC and GCM, with feature gradients.
//! - [`scm`]: synthetic structural causal models and interventions.
//! - [`train`]: MLP, Adam/AdamW and the regularized objective.
//! - [`harness`]: VCF, Pareto fronts, sweeps and CSV reporting.

pub mod baselines;
pub mod cme;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod rff;
pub mod scm;
pub mod train;

pub use error::{Error, Result};
