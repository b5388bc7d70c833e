//! Clustering and forecasting of long-term-condition accrual trajectories
//! with a censored latent-class model fitted by variational Bayes.

pub mod engine;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod forecast;
pub mod io;
pub mod model;
pub mod special;
pub mod synth;
pub mod wire;

pub use error::{Error, Result};
