//! Weighted null-space fitting for Box-Jenkins models in open and closed loop.

pub mod arx;
pub mod config;
pub mod crb;
pub mod error;
pub mod eval;
pub mod lti;
pub mod model;
pub mod simulate;
pub mod wnsf;

pub use nalgebra;

pub use arx::{estimate_arx, ArxEstimate};
pub use config::ExperimentConfig;
pub use crb::{compute_mcl, compute_mcr, CrbResult, SpectrumModel};
pub use error::{Error, Result};
pub use eval::{fit_metric, mse_metric, run_monte_carlo, McResult};
pub use lti::{Polynomial, RationalFilter};
pub use model::{BjModel, ModelOrders};
pub use simulate::{simulate, DataSet, LoopConfig, LoopKind};
pub use wnsf::{wnsf_identify, ThetaEstimate, WnsfOptions};
