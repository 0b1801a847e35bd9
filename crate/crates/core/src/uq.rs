//! Posterior mean and covariance of `x1` given `xt` from a velocity field.
//!
//! For the interpolant `xt = t x1 + (1 - t) x0` with Gaussian `x0`:
//!
//! ```text
//! E[x1 | xt]   = xt / t + (1 - t)^2 / t * grad log p_t(xt)
//!              = xt + (1 - t) v(xt, t)
//! Cov(x1 | xt) = (1 - t)^2 / t * [I + (1 - t) J_v(xt, t)]
//! U(xt, t)     = (1 - t)^2 / t * [d + (1 - t) div v]
//! ```
//!
//! The divergence and the Jacobian diagonal are estimated with Rademacher
//! probes, one JVP each. Negative entries (which only occur when the field
//! is not the population optimum) are floored at zero; the raw values are
//! kept alongside.

use crate::error::{Error, Result};
use crate::interpolant::FlowTime;
use crate::models::VelocityField;
use crate::numerics::{check_dim, draw_rademacher, hutchinson, min_symmetric_eigenvalue, Matrix, ProbeSet, RngState, Vector};

/// Dense covariance is only assembled up to this dimension (one JVP per column).
pub const MAX_MATERIALIZED_DIM: usize = 64;

/// Grid times at or below zero are evaluated here instead.
pub const START_SHIFT: f64 = 1e-3;

/// Probe count used when the caller does not choose one.
pub fn default_probe_count(d: usize) -> usize {
    if d <= 1024 {
        50
    } else {
        64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub t: FlowTime,
    /// Scalar uncertainty `U`, floored at zero.
    pub trace: f64,
    pub trace_raw: f64,
    /// Per-coordinate posterior variances, floored at zero.
    pub diagonal: Vector,
    pub diagonal_raw: Vector,
    /// `Cov(x1 | xt)` before flooring; present only when requested and `d <= 64`.
    pub covariance: Option<Matrix>,
    /// Smallest eigenvalue of the materialized covariance (checked, not enforced).
    pub min_eigenvalue: Option<f64>,
    /// Divergence used for `trace`: exact when the covariance is materialized,
    /// otherwise the probe estimate.
    pub divergence: f64,
    pub hutchinson_divergence: f64,
    pub probe_seed: Option<RngState>,
    pub probe_count: usize,
    pub floored: bool,
    pub jvp_calls: usize,
}

/// `xt / t + (1 - t)^2 / t * score`.
pub fn tweedie_posterior_mean(xt: &Vector, t: FlowTime, score: &Vector) -> Result<Vector> {
    let prefactor = t.covariance_prefactor()?;
    check_dim(score, xt.len())?;
    Ok(xt / t.value() + score * prefactor)
}

/// `xt + (1 - t) v`.
pub fn posterior_mean_from_velocity(xt: &Vector, t: FlowTime, v: &Vector) -> Result<Vector> {
    check_dim(v, xt.len())?;
    Ok(xt + v * (1.0 - t.value()))
}

/// `(1 - t)^2 d / t`: the uncertainty of a divergence-free field.
pub fn prior_baseline(t: FlowTime, d: usize) -> Result<f64> {
    Ok(t.covariance_prefactor()? * d as f64)
}

/// Closed-form posterior covariance at `(xt, t)`.
pub fn cov_closed_form<F: VelocityField + ?Sized>(
    field: &F,
    xt: &Vector,
    t: FlowTime,
    probes: &ProbeSet,
    materialize_full: bool,
) -> Result<PosteriorEstimate> {
    let t = t.require_open()?;
    estimate(field, xt, t, probes, materialize_full)
}

/// Covariance of a one-step generator's output, evaluated at `t = epsilon`
/// on the noise input.
pub fn one_step_cov<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Vector,
    epsilon: f64,
    probes: &ProbeSet,
    materialize_full: bool,
) -> Result<PosteriorEstimate> {
    if !(epsilon > 0.0 && epsilon <= 0.1) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 0.1], got {epsilon}")));
    }
    estimate(field, x0, FlowTime::open(epsilon)?, probes, materialize_full)
}

fn estimate<F: VelocityField + ?Sized>(
    field: &F,
    xt: &Vector,
    t: FlowTime,
    probes: &ProbeSet,
    materialize_full: bool,
) -> Result<PosteriorEstimate> {
    let d = field.dim();
    check_dim(xt, d)?;
    if probes.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: probes.dim() });
    }
    let prefactor = t.covariance_prefactor()?;
    let one_minus_t = 1.0 - t.value();

    let mut jvp_calls = 0;
    let hutch = hutchinson(
        |eps| {
            jvp_calls += 1;
            field.jvp(xt, t, eps)
        },
        probes,
    )?;

    let mut jac_diag = hutch.diagonal.clone();
    let mut covariance = None;
    let mut min_eigenvalue = None;
    if materialize_full && d <= MAX_MATERIALIZED_DIM {
        let mut jac = Matrix::zeros(d, d);
        for i in 0..d {
            let mut e = Vector::zeros(d);
            e[i] = 1.0;
            jac.set_column(i, &field.jvp(xt, t, &e)?);
            jvp_calls += 1;
        }
        let cov = (Matrix::identity(d, d) + jac.clone() * one_minus_t) * prefactor;
        jac_diag = jac.diagonal();
        min_eigenvalue = Some(min_symmetric_eigenvalue(&cov));
        covariance = Some(cov);
    }

    let divergence = jac_diag.sum();
    let diagonal_raw = jac_diag.map(|j| prefactor * (1.0 + one_minus_t * j));
    let trace_raw = prefactor * (d as f64 + one_minus_t * divergence);
    let floored = trace_raw < 0.0 || diagonal_raw.iter().any(|&v| v < 0.0);
    if !trace_raw.is_finite() || diagonal_raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::FieldEvaluation);
    }
    Ok(PosteriorEstimate {
        t,
        trace: trace_raw.max(0.0),
        trace_raw,
        diagonal: diagonal_raw.map(|v| v.max(0.0)),
        diagonal_raw,
        covariance,
        min_eigenvalue,
        divergence,
        hutchinson_divergence: hutch.trace,
        probe_seed: probes.seed(),
        probe_count: probes.len(),
        floored,
        jvp_calls,
    })
}

/// Estimates along a trajectory, ordered by time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintyMapSeries {
    entries: Vec<PosteriorEstimate>,
}

impl UncertaintyMapSeries {
    pub fn new(entries: Vec<PosteriorEstimate>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].t.value() >= w[1].t.value()) {
            return Err(Error::InvalidArgument("series times must be strictly increasing".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PosteriorEstimate] {
        &self.entries
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.t.value()).collect()
    }

    pub fn traces(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.trace).collect()
    }
}

/// Map a requested grid time onto the open interval used for evaluation.
pub fn shift_endpoint(t: f64) -> Result<FlowTime> {
    if t <= 0.0 {
        FlowTime::open(START_SHIFT)
    } else {
        FlowTime::open(t)
    }
}

/// One estimate per `(time, state)` pair, each with a fresh probe set drawn
/// from `rng.split(index)`.
pub fn trajectory_uq<F: VelocityField + ?Sized>(
    field: &F,
    states: &[(f64, Vector)],
    probes_per_point: usize,
    rng: RngState,
) -> Result<UncertaintyMapSeries> {
    let entries = states
        .iter()
        .enumerate()
        .map(|(i, (t, x))| {
            let t = shift_endpoint(*t)?;
            let probes = draw_rademacher(rng.split(i as u64), field.dim(), probes_per_point)?;
            cov_closed_form(field, x, t, &probes, false)
        })
        .collect::<Result<Vec<_>>>()?;
    UncertaintyMapSeries::new(entries)
}
