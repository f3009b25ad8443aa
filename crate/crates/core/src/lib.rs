//! Secure terminal-voltage estimation for lithium-ion batteries whose
//! voltage sensor may be under denial-of-service or false-data-injection
//! attack.
//!
//! The crate is organised around the estimation pipeline:
//!
//! - [`battery`]: second-order equivalent-circuit plant and CCCV charger.
//! - [`attack`]: DoS and FDI corruption of the measured voltage.
//! - [`koopman`]: sliding-window Koopman predictor with self-learning feedback.
//! - [`correction`]: Stage I error and the region-wise Stage II corrections.
//! - [`gpr`]: Gaussian-process alternative for Stage II.
//! - [`estimator`]: streaming dispatch between nominal and secure modes.
//! - [`observers`], [`metrics`], [`scenario`]: baselines, scoring and the
//!   end-to-end harness.

pub mod attack;
pub mod battery;
pub mod config;
pub mod correction;
pub mod error;
pub mod estimator;
pub mod gpr;
pub mod koopman;
pub mod metrics;
pub mod observers;
pub mod par;
pub mod scenario;
pub mod trace;

pub use error::{Error, Result};
pub use par::Exec;
