//! The linear noise-to-data interpolant and its Gaussian conditional law.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{check_dim, Vector};

/// Flow time in `[0, 1]`; `0` is pure noise, `1` is data.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::TimeRange(t))
        }
    }

    /// Construct and require `t` strictly inside `(0, 1)`.
    pub fn open(t: f64) -> Result<Self> {
        Self::new(t).and_then(Self::require_open).map_err(|_| Error::OpenInterval(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn require_open(self) -> Result<Self> {
        if self.0 > 0.0 && self.0 < 1.0 {
            Ok(self)
        } else {
            Err(Error::OpenInterval(self.0))
        }
    }

    /// `(1 - t)^2 / t`, the scale shared by every covariance expression.
    pub fn covariance_prefactor(self) -> Result<f64> {
        let t = self.require_open()?.0;
        Ok((1.0 - t).powi(2) / t)
    }
}

impl TryFrom<f64> for FlowTime {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<FlowTime> for f64 {
    fn from(t: FlowTime) -> f64 {
        t.0
    }
}

impl fmt::Display for FlowTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `t x1 + (1 - t) x0`.
pub fn interpolate(x0: &Vector, x1: &Vector, t: FlowTime) -> Result<Vector> {
    check_dim(x1, x0.len())?;
    let t = t.value();
    Ok(x1 * t + x0 * (1.0 - t))
}

/// Score of `N(xt; t x1, (1 - t)^2 I)` with respect to `xt`.
pub fn conditional_score(xt: &Vector, x1: &Vector, t: FlowTime) -> Result<Vector> {
    check_dim(x1, xt.len())?;
    let t = t.value();
    if t >= 1.0 {
        return Err(Error::DegenerateConditional(t));
    }
    Ok(-(xt - x1 * t) / (1.0 - t).powi(2))
}

/// `log N(xt; t x1, (1 - t)^2 I)` including the normalizing constant.
pub fn conditional_log_density(xt: &Vector, x1: &Vector, t: FlowTime) -> Result<f64> {
    check_dim(x1, xt.len())?;
    let t = t.value();
    if t >= 1.0 {
        return Err(Error::DegenerateConditional(t));
    }
    let var = (1.0 - t).powi(2);
    let d = xt.len() as f64;
    let r2 = (xt - x1 * t).norm_squared();
    Ok(-0.5 * r2 / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln())
}
