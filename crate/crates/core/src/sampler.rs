//! Euler integration of a velocity field and one-step generation.

use crate::error::{Error, Result};
use crate::interpolant::FlowTime;
use crate::models::{mean_velocity_eval, Mlp, VelocityField};
use crate::numerics::{check_dim, Vector};

/// Step count used for generation when none is configured.
pub const DEFAULT_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub steps: usize,
    /// Set when integration stopped on a non-finite state; `states` then
    /// holds the snapshots reached so far.
    pub aborted_at: Option<usize>,
}

impl Trajectory {
    pub fn final_state(&self) -> Option<&Vector> {
        self.states.last()
    }

    pub fn pairs(&self) -> Vec<(f64, Vector)> {
        self.times.iter().copied().zip(self.states.iter().cloned()).collect()
    }
}

/// Integrate from `t = 0` to `t = 1` with `steps` uniform Euler steps.
///
/// Each requested snapshot time is served by the first grid node at or after
/// it. The start and end states are always included. Snapshot times must lie
/// in `[0, 1]`; duplicates that land on the same node are merged.
pub fn euler_generate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Vector,
    steps: usize,
    snapshots: &[f64],
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("euler_generate needs at least one step".into()));
    }
    check_dim(x0, field.dim())?;
    let dt = 1.0 / steps as f64;

    let mut nodes: Vec<usize> = snapshots
        .iter()
        .map(|&s| {
            FlowTime::new(s)?;
            Ok(((s * steps as f64) - 1e-9).ceil().clamp(0.0, steps as f64) as usize)
        })
        .collect::<Result<_>>()?;
    nodes.push(0);
    nodes.push(steps);
    nodes.sort_unstable();
    nodes.dedup();

    let mut traj = Trajectory { times: Vec::new(), states: Vec::new(), steps, aborted_at: None };
    let mut next = nodes.iter().peekable();
    let mut x = x0.clone();
    for k in 0..=steps {
        if next.peek() == Some(&&k) {
            next.next();
            traj.times.push(k as f64 * dt);
            traj.states.push(x.clone());
        }
        if k == steps {
            break;
        }
        let t = FlowTime::new(k as f64 * dt)?;
        let v = field.eval(&x, t)?;
        x += v * dt;
        if x.iter().any(|v| !v.is_finite()) {
            traj.aborted_at = Some(k + 1);
            return Ok(traj);
        }
    }
    Ok(traj)
}

/// `x0 + u(x0, 0)`: one network evaluation.
pub fn one_step_generate(model: &Mlp, x0: &Vector) -> Result<Vector> {
    Ok(x0 + mean_velocity_eval(model, x0)?)
}
