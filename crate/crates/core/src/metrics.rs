//! Agreement between uncertainty and error: rank correlation, top-K overlap,
//! and the corruption consistency protocol.

use std::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::baselines::{ensemble_uq, mc_dropout_uq};
use crate::error::{Error, Result};
use crate::interpolant::{interpolate, FlowTime};
use crate::models::{Mlp, VelocityField};
use crate::numerics::{draw_rademacher, RngState, Vector};
use crate::uq::{cov_closed_form, posterior_mean_from_velocity};

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of the average ranks.
pub fn spearman(u: &[f64], e: &[f64]) -> Result<f64> {
    if u.len() != e.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: e.len() });
    }
    if u.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two values".into()));
    }
    if u.iter().chain(e).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("spearman input contains NaN".into()));
    }
    pearson(&average_ranks(u), &average_ranks(e)).ok_or(Error::UndefinedCorrelation("constant input"))
}

/// Indices of the `k` largest values; ties go to the smaller index.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match values[b].total_cmp(&values[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order.truncate(k);
    order
}

/// Fraction of the top `k_percent` of `u` that is also in the top `k_percent` of `e`.
pub fn hitrate_at_k(u: &[f64], e: &[f64], k_percent: f64) -> Result<f64> {
    if u.len() != e.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: e.len() });
    }
    if u.is_empty() {
        return Err(Error::InvalidArgument("hitrate needs a non-empty map".into()));
    }
    if !(k_percent > 0.0 && k_percent < 100.0) {
        return Err(Error::InvalidArgument(format!("k_percent must lie in (0, 100), got {k_percent}")));
    }
    let k = ((u.len() as f64 * k_percent / 100.0).floor() as usize).max(1);
    let top_e = top_indices(e, k);
    let mut in_e = vec![false; e.len()];
    for i in top_e {
        in_e[i] = true;
    }
    let hits = top_indices(u, k).into_iter().filter(|&i| in_e[i]).count();
    Ok(hits as f64 / k as f64)
}

/// `(1 - lambda) x1 + lambda n` with standard normal `n`.
pub fn corrupt(x1: &Vector, lambda: f64, rng: RngState) -> Result<Vector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("noise level must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(x1.clone());
    }
    let mut g = rng.rng();
    let noise = Vector::from_fn(x1.len(), |_, _| StandardNormal.sample(&mut g));
    Ok(x1 * (1.0 - lambda) + noise * lambda)
}

pub fn squared_error(prediction: &Vector, target: &Vector) -> Vector {
    (prediction - target).map(|v| v * v)
}

/// What a method reports at one `(xt, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    /// Predicted `x1`.
    pub prediction: Vector,
    /// Per-pixel uncertainty.
    pub map: Vector,
    /// Scalar uncertainty for sample-level ranking.
    pub scalar: f64,
}

/// An uncertainty method under evaluation.
pub trait UqMethod: Sync {
    fn label(&self) -> String;
    fn assess(&self, xt: &Vector, t: FlowTime, rng: RngState) -> Result<Assessment>;
}

/// Closed-form covariance with a fresh probe set per call.
pub struct TweedieMethod<F> {
    pub field: F,
    pub probes: usize,
    pub label: String,
}

impl<F: VelocityField> UqMethod for TweedieMethod<F> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn assess(&self, xt: &Vector, t: FlowTime, rng: RngState) -> Result<Assessment> {
        let probes = draw_rademacher(rng, self.field.dim(), self.probes)?;
        let est = cov_closed_form(&self.field, xt, t, &probes, false)?;
        let v = self.field.eval(xt, t)?;
        Ok(Assessment {
            prediction: posterior_mean_from_velocity(xt, t, &v)?,
            map: est.diagonal,
            scalar: est.trace,
        })
    }
}

pub struct EnsembleMethod<F> {
    pub members: Vec<F>,
}

impl<F: VelocityField> UqMethod for EnsembleMethod<F> {
    fn label(&self) -> String {
        format!("ensemble-{}", self.members.len())
    }

    fn assess(&self, xt: &Vector, t: FlowTime, _rng: RngState) -> Result<Assessment> {
        let est = ensemble_uq(&self.members, xt, t)?;
        Ok(Assessment { prediction: est.mean, map: est.per_pixel, scalar: est.scalar })
    }
}

pub struct McDropoutMethod<'a> {
    pub model: &'a Mlp,
    pub passes: usize,
}

impl UqMethod for McDropoutMethod<'_> {
    fn label(&self) -> String {
        format!("mc-dropout-{}", self.passes)
    }

    fn assess(&self, xt: &Vector, t: FlowTime, rng: RngState) -> Result<Assessment> {
        let est = mc_dropout_uq(self.model, xt, t, self.passes, rng)?;
        Ok(Assessment { prediction: est.mean, map: est.per_pixel, scalar: est.scalar })
    }
}

/// Adapter for closures, mainly for stubs in tests and experiments.
pub struct FnMethod<G> {
    pub label: String,
    pub assess: G,
}

impl<G> UqMethod for FnMethod<G>
where
    G: Fn(&Vector, FlowTime, RngState) -> Result<Assessment> + Sync,
{
    fn label(&self) -> String {
        self.label.clone()
    }

    fn assess(&self, xt: &Vector, t: FlowTime, rng: RngState) -> Result<Assessment> {
        (self.assess)(xt, t, rng)
    }
}

/// Which image the reconstruction error is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorTarget {
    /// The uncorrupted `x1`.
    #[default]
    Clean,
    /// The corrupted image the trajectory was built from.
    Corrupted,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConsistencyConfig {
    pub noise_level: f64,
    pub times: Vec<f64>,
    pub k_percent: f64,
    pub target: ErrorTarget,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { noise_level: 0.5, times: vec![0.3, 0.5, 0.7, 0.9], k_percent: 30.0, target: ErrorTarget::Clean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRow {
    pub t: FlowTime,
    pub method: String,
    /// Mean over samples with a defined correlation; `None` if none was.
    pub pixel_spearman: Option<f64>,
    pub hitrate: f64,
    pub sample_spearman: Option<f64>,
    pub samples: usize,
}

struct Cell {
    pixel_spearman: Option<f64>,
    hitrate: f64,
    scalar_uq: f64,
    scalar_error: f64,
}

/// Corrupt each sample, build `xt` along a shared noise path, and score every
/// method at every time. Rows are ordered by time, then by method.
///
/// Sample `i` draws its corruption from `rng.split(i).split(0)`, its noise
/// endpoint from `rng.split(i).split(1)`, and hands `rng.split(i).split(2 + j)`
/// to the methods at the `j`-th time.
pub fn consistency_protocol(
    methods: &[&dyn UqMethod],
    samples: &[Vector],
    config: &ConsistencyConfig,
    rng: RngState,
) -> Result<Vec<ConsistencyRow>> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("consistency protocol needs at least two samples".into()));
    }
    let times = config.times.iter().map(|&t| FlowTime::open(t)).collect::<Result<Vec<_>>>()?;

    // cells[i][j][m]: sample i, time j, method m.
    let cells = samples
        .par_iter()
        .enumerate()
        .map(|(i, x1)| {
            let stream = rng.split(i as u64);
            let corrupted = corrupt(x1, config.noise_level, stream.split(0))?;
            let mut g = stream.split(1).rng();
            let x0 = Vector::from_fn(x1.len(), |_, _| StandardNormal.sample(&mut g));
            let target = match config.target {
                ErrorTarget::Clean => x1,
                ErrorTarget::Corrupted => &corrupted,
            };
            times
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let xt = interpolate(&x0, &corrupted, t)?;
                    methods
                        .iter()
                        .map(|m| {
                            let a = m.assess(&xt, t, stream.split(2 + j as u64))?;
                            let err = squared_error(&a.prediction, target);
                            Ok(Cell {
                                pixel_spearman: spearman(a.map.as_slice(), err.as_slice()).ok(),
                                hitrate: hitrate_at_k(a.map.as_slice(), err.as_slice(), config.k_percent)?,
                                scalar_uq: a.scalar,
                                scalar_error: err.sum(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let n = samples.len();
    let mut rows = Vec::with_capacity(times.len() * methods.len());
    for (j, &t) in times.iter().enumerate() {
        for (m, method) in methods.iter().enumerate() {
            let column: Vec<&Cell> = cells.iter().map(|s| &s[j][m]).collect();
            let defined: Vec<f64> = column.iter().filter_map(|c| c.pixel_spearman).collect();
            let uq: Vec<f64> = column.iter().map(|c| c.scalar_uq).collect();
            let err: Vec<f64> = column.iter().map(|c| c.scalar_error).collect();
            rows.push(ConsistencyRow {
                t,
                method: method.label(),
                pixel_spearman: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                hitrate: column.iter().map(|c| c.hitrate).sum::<f64>() / n as f64,
                sample_spearman: spearman(&uq, &err).ok(),
                samples: n,
            });
        }
    }
    Ok(rows)
}

/// Sample-level Spearman between scalar uncertainty and squared prediction
/// error on clean inputs at a single time, one entry per method.
pub fn error_correlation(
    methods: &[&dyn UqMethod],
    samples: &[Vector],
    t: FlowTime,
    rng: RngState,
) -> Result<Vec<(String, Option<f64>)>> {
    if samples.len() < 8 {
        return Err(Error::InvalidArgument(format!("error correlation needs at least 8 samples, got {}", samples.len())));
    }
    let config = ConsistencyConfig { noise_level: 0.0, times: vec![t.value()], ..ConsistencyConfig::default() };
    Ok(consistency_protocol(methods, samples, &config, rng)?
        .into_iter()
        .map(|r| (r.method, r.sample_spearman))
        .collect())
}
