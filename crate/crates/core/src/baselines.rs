//! Sampling-based uncertainty: spread of the posterior mean across ensemble
//! members or across dropout masks.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interpolant::FlowTime;
use crate::models::{DropoutMode, Mlp, MlpField, VelocityField};
use crate::numerics::{RngState, Vector};
use crate::uq::posterior_mean_from_velocity;

/// Divisor used for the per-pixel variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceConvention {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`.
    Unbiased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEstimate {
    /// Average posterior mean across members or passes.
    pub mean: Vector,
    pub per_pixel: Vector,
    /// Sum of `per_pixel`.
    pub scalar: f64,
    /// Members or passes evaluated; each is one forward pass.
    pub count: usize,
    pub seconds: f64,
}

fn moments(samples: &[Vector], convention: VarianceConvention) -> (Vector, Vector) {
    let n = samples.len() as f64;
    // Shifting by the first sample keeps identical samples at exactly zero.
    let shift = &samples[0];
    let mean = samples.iter().fold(Vector::zeros(shift.len()), |acc, s| acc + (s - shift)) / n;
    let divisor = match convention {
        VarianceConvention::Population => n,
        VarianceConvention::Unbiased => n - 1.0,
    };
    let var = samples
        .iter()
        .fold(Vector::zeros(mean.len()), |acc, s| acc + (s - shift - &mean).map(|v| v * v))
        / divisor;
    (mean + shift, var)
}

fn estimate(samples: Vec<Vector>, convention: VarianceConvention, start: Instant) -> BaselineEstimate {
    let (mean, per_pixel) = moments(&samples, convention);
    BaselineEstimate {
        mean,
        scalar: per_pixel.sum(),
        per_pixel,
        count: samples.len(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Variance of `E[x1 | xt]` across ensemble members (population convention).
pub fn ensemble_uq<F: VelocityField>(members: &[F], xt: &Vector, t: FlowTime) -> Result<BaselineEstimate> {
    ensemble_uq_with(members, xt, t, VarianceConvention::Population)
}

pub fn ensemble_uq_with<F: VelocityField>(
    members: &[F],
    xt: &Vector,
    t: FlowTime,
    convention: VarianceConvention,
) -> Result<BaselineEstimate> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument(format!("ensemble needs at least 2 members, got {}", members.len())));
    }
    let t = t.require_open()?;
    let start = Instant::now();
    let means = members
        .par_iter()
        .map(|m| posterior_mean_from_velocity(xt, t, &m.eval(xt, t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(estimate(means, convention, start))
}

/// Variance of `E[x1 | xt]` over `passes` dropout masks; pass `p` uses the
/// masks drawn from `rng.split(p)`.
pub fn mc_dropout_uq(model: &Mlp, xt: &Vector, t: FlowTime, passes: usize, rng: RngState) -> Result<BaselineEstimate> {
    mc_dropout_uq_with(model, xt, t, passes, rng, VarianceConvention::Population)
}

pub fn mc_dropout_uq_with(
    model: &Mlp,
    xt: &Vector,
    t: FlowTime,
    passes: usize,
    rng: RngState,
    convention: VarianceConvention,
) -> Result<BaselineEstimate> {
    if passes < 2 {
        return Err(Error::InvalidArgument(format!("MC dropout needs at least 2 passes, got {passes}")));
    }
    let t = t.require_open()?;
    let start = Instant::now();
    let means = (0..passes)
        .into_par_iter()
        .map(|p| {
            let field = MlpField::with_dropout(model, DropoutMode::Sampled(rng.split(p as u64)));
            posterior_mean_from_velocity(xt, t, &field.eval(xt, t)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(estimate(means, convention, start))
}
