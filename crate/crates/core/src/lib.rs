//! Closed-form posterior covariance for flow matching models.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod interpolant;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod report;
pub mod sampler;
pub mod training;
pub mod uq;

pub use error::{Error, Result};
