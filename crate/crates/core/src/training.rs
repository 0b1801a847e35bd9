//! Flow matching and one-step training with AdamW.
//!
//! Batches are split into fixed chunks of [`CHUNK`] samples whose gradients
//! are summed in chunk order. The sequential and parallel modes share this
//! partition, so they produce bit-identical parameters for equal seeds.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{sample_pairs, GmmSpec};
use crate::interpolant::{interpolate, FlowTime};
use crate::models::{Gradients, Mlp, MlpConfig};
use crate::numerics::{Matrix, RngState, Vector};

/// Training times are drawn uniformly and clamped into this range.
pub const T_CLAMP: (f64, f64) = (1e-3, 1.0 - 1e-3);

const CHUNK: usize = 32;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Regress `v(xt, t)` onto `x1 - x0`.
    Fm,
    /// Regress `u(x0, 0)` onto `x1 - x0`.
    OneStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    /// Stream for the data order, noise draws, times and dropout masks.
    pub data_seed: RngState,
    pub objective: Objective,
    /// Pairs generated per epoch for mixture tasks.
    pub pairs_per_epoch: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 2e-4,
            schedule: LrSchedule::Cosine,
            weight_decay: 0.0,
            data_seed: RngState::with_stream(0, 1),
            objective: Objective::Fm,
            pairs_per_epoch: 8192,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone)]
pub enum TrainData {
    /// Fresh mixture samples every epoch.
    Gmm(GmmSpec),
    /// A fixed set of data points, shuffled every epoch and paired with fresh noise.
    Points(Vec<Vector>),
}

impl TrainData {
    pub fn dim(&self) -> usize {
        match self {
            TrainData::Gmm(spec) => spec.dim(),
            TrainData::Points(points) => points.first().map_or(0, |p| p.len()),
        }
    }

    fn epoch_pairs(&self, rng: RngState, pairs_per_epoch: usize) -> Vec<(Vector, Vector)> {
        match self {
            TrainData::Gmm(spec) => sample_pairs(spec, rng, pairs_per_epoch),
            TrainData::Points(points) => {
                let mut order: Vec<usize> = (0..points.len()).collect();
                order.shuffle(&mut rng.split(0).rng());
                let mut noise = rng.split(1).rng();
                order
                    .into_iter()
                    .map(|i| {
                        let x1 = points[i].clone();
                        let x0 = Vector::from_fn(x1.len(), |_, _| StandardNormal.sample(&mut noise));
                        (x0, x1)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub seconds: f64,
    pub checksum: u64,
    pub steps: usize,
    /// Forward plus backward passes over all samples, counted as 2 per sample.
    pub forward_equivalents: usize,
    pub t_clamp: (f64, f64),
    /// Always `true`: both modes reduce in a fixed chunk order.
    pub deterministic: bool,
}

/// One flow matching training example.
#[derive(Debug, Clone)]
pub struct FmSample {
    pub x0: Vector,
    pub x1: Vector,
    pub t: f64,
}

/// Mean over the batch of `||v(xt, t) - (x1 - x0)||^2` and its gradient.
pub fn fm_loss(model: &Mlp, batch: &[FmSample]) -> Result<(f64, Gradients)> {
    let (inputs, targets) = fm_batch(model, batch)?;
    mean_loss(model, &inputs, &targets, None)
}

/// Mean over the batch of `||u(x0, 0) - (x1 - x0)||^2` and its gradient.
pub fn one_step_loss(model: &Mlp, batch: &[(Vector, Vector)]) -> Result<(f64, Gradients)> {
    let (inputs, targets) = one_step_batch(model, batch)?;
    mean_loss(model, &inputs, &targets, None)
}

fn fm_batch(model: &Mlp, batch: &[FmSample]) -> Result<(Matrix, Matrix)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut xts = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    let mut targets = Matrix::zeros(model.data_dim(), batch.len());
    for (j, s) in batch.iter().enumerate() {
        xts.push(interpolate(&s.x0, &s.x1, FlowTime::new(s.t)?)?);
        ts.push(s.t);
        targets.set_column(j, &(&s.x1 - &s.x0));
    }
    Ok((model.input_matrix(&xts, &ts)?, targets))
}

fn one_step_batch(model: &Mlp, batch: &[(Vector, Vector)]) -> Result<(Matrix, Matrix)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let x0s: Vec<Vector> = batch.iter().map(|(x0, _)| x0.clone()).collect();
    let ts = vec![0.0; batch.len()];
    let mut targets = Matrix::zeros(model.data_dim(), batch.len());
    for (j, (x0, x1)) in batch.iter().enumerate() {
        targets.set_column(j, &(x1 - x0));
    }
    Ok((model.input_matrix(&x0s, &ts)?, targets))
}

fn mean_loss(model: &Mlp, inputs: &Matrix, targets: &Matrix, masks: Option<&Vec<Matrix>>) -> Result<(f64, Gradients)> {
    let (sum, grads) = chunked_loss(model, inputs, targets, masks, false)?;
    let b = inputs.ncols() as f64;
    let mut grads = grads;
    grads.scale(1.0 / b);
    Ok((sum / b, grads))
}

/// Summed loss and gradient over fixed-size column chunks.
fn chunked_loss(
    model: &Mlp,
    inputs: &Matrix,
    targets: &Matrix,
    masks: Option<&Vec<Matrix>>,
    parallel: bool,
) -> Result<(f64, Gradients)> {
    let n = inputs.ncols();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let eval = |&start: &usize| {
        let len = CHUNK.min(n - start);
        let x = inputs.columns(start, len).into_owned();
        let y = targets.columns(start, len).into_owned();
        let m = masks.map(|ms| ms.iter().map(|m| m.columns(start, len).into_owned()).collect::<Vec<_>>());
        model.squared_error_grad(&x, &y, m.as_ref())
    };
    let parts: Vec<Result<(f64, Gradients)>> = if parallel {
        with_pool(|| starts.par_iter().map(eval).collect())
    } else {
        starts.iter().map(eval).collect()
    };
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(model);
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Run `f` on a pool capped by `FLOWVAR_THREADS` when set.
pub(crate) fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("FLOWVAR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Decoupled-weight-decay Adam with `beta = (0.9, 0.999)`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub weight_decay: f64,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(model: &Mlp, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = Gradients::zeros_like(model).slices().map(|s| vec![0.0; s.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, weight_decay }
    }

    pub fn update(&mut self, model: &mut Mlp, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (((p, g), m), v) in model.param_slices_mut().zip(grads.slices()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * self.weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

fn scheduled_lr(config: &TrainConfig, step: usize, total: usize) -> f64 {
    match config.schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Cosine => {
            let progress = step as f64 / total.max(1) as f64;
            0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Train `model` in place.
pub fn train(model: &mut Mlp, data: &TrainData, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.dim() != model.data_dim() {
        return Err(Error::DimensionMismatch { expected: model.data_dim(), actual: data.dim() });
    }
    let started = Instant::now();
    let mut opt = AdamW::new(model, config.weight_decay);
    let per_epoch = match data {
        TrainData::Gmm(_) => config.pairs_per_epoch,
        TrainData::Points(points) => points.len(),
    };
    if per_epoch == 0 {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    let steps_per_epoch = per_epoch.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut forward_equivalents = 0;

    for epoch in 0..config.epochs {
        let epoch_seed = config.data_seed.split(epoch as u64);
        let pairs = data.epoch_pairs(epoch_seed.split(0), per_epoch);
        let mut time_rng = epoch_seed.split(1).rng();
        let mut mask_rng = epoch_seed.split(2).rng();
        let mut loss_sum = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let (inputs, targets) = match config.objective {
                Objective::Fm => {
                    let samples: Vec<FmSample> = batch
                        .iter()
                        .map(|(x0, x1)| FmSample {
                            x0: x0.clone(),
                            x1: x1.clone(),
                            t: time_rng.gen::<f64>().clamp(T_CLAMP.0, T_CLAMP.1),
                        })
                        .collect();
                    fm_batch(model, &samples)?
                }
                Objective::OneStep => one_step_batch(model, batch)?,
            };
            let masks = (model.dropout_rate() > 0.0).then(|| model.draw_batch_masks(&mut mask_rng, batch.len()));
            let (sum, mut grads) = match chunked_loss(model, &inputs, &targets, masks.as_ref(), config.parallel) {
                Ok(v) => v,
                Err(Error::ForwardDiverged) => {
                    return Err(Error::TrainingDiverged { epoch, loss: f64::INFINITY })
                }
                Err(e) => return Err(e),
            };
            grads.scale(1.0 / batch.len() as f64);
            opt.update(model, &grads, scheduled_lr(config, step, total_steps));
            step += 1;
            loss_sum += sum;
            forward_equivalents += 2 * batch.len();
        }
        let epoch_loss = loss_sum / per_epoch as f64;
        epoch_losses.push(epoch_loss);
        if !epoch_loss.is_finite() || epoch_loss > DIVERGENCE_LOSS {
            return Err(Error::TrainingDiverged { epoch, loss: epoch_loss });
        }
    }
    Ok(TrainReport {
        epoch_losses,
        seconds: started.elapsed().as_secs_f64(),
        checksum: model.checksum(),
        steps: step,
        forward_equivalents,
        t_clamp: T_CLAMP,
        deterministic: true,
    })
}

/// Seeds for ensemble member `index` under a master seed: initialization and
/// data order each get their own child stream.
pub fn member_seeds(master: RngState, index: usize) -> (RngState, RngState) {
    (master.split(1000 + index as u64), master.split(2000 + index as u64))
}

/// Train `count` independently initialized models. With `distinct_seeds`
/// off, every member reuses member 0's seeds.
pub fn train_ensemble(
    count: usize,
    model_config: &MlpConfig,
    data: &TrainData,
    config: &TrainConfig,
    master: RngState,
    distinct_seeds: bool,
) -> Result<Vec<(Mlp, TrainReport)>> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("ensemble needs at least 2 members, got {count}")));
    }
    (0..count)
        .map(|i| {
            let (init, order) = member_seeds(master, if distinct_seeds { i } else { 0 });
            let mut model = Mlp::new(model_config, init)?;
            let cfg = TrainConfig { data_seed: order, ..config.clone() };
            let report = train(&mut model, data, &cfg)?;
            Ok((model, report))
        })
        .collect()
}
