//! Velocity fields: a common eval/JVP contract and its implementations.
//!
//! [`Mlp`] is a small fully connected network on `[x || embed(t)]`. Its JVP
//! is computed by pushing a tangent through every layer alongside the
//! primal values, so one JVP costs about one forward pass. Differentiation is
//! with respect to `x` only; the time embedding carries a zero tangent.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::gmm::{optimal_velocity, single_gaussian_velocity_jacobian, GmmSpec};
use crate::interpolant::FlowTime;
use crate::numerics::{check_dim, finite_diff_jvp, Matrix, RngState, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Analytic,
    Mlp,
    MeanVelocity,
}

/// Anything that can report a velocity and its Jacobian-vector product.
pub trait VelocityField: Send + Sync {
    fn kind(&self) -> FieldKind;

    fn dim(&self) -> usize;

    fn eval(&self, x: &Vector, t: FlowTime) -> Result<Vector>;

    /// `J(x, t) u` with `J = d eval / d x`.
    fn jvp(&self, x: &Vector, t: FlowTime, u: &Vector) -> Result<Vector>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn kind(&self) -> FieldKind {
        (**self).kind()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &Vector, t: FlowTime) -> Result<Vector> {
        (**self).eval(x, t)
    }
    fn jvp(&self, x: &Vector, t: FlowTime, u: &Vector) -> Result<Vector> {
        (**self).jvp(x, t, u)
    }
}

/// The population-optimal velocity of a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    spec: GmmSpec,
    fd_step: f64,
}

impl AnalyticField {
    pub fn new(spec: GmmSpec) -> Self {
        Self { spec, fd_step: 1e-5 }
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }
}

pub fn analytic_handle(spec: GmmSpec) -> AnalyticField {
    AnalyticField::new(spec)
}

impl VelocityField for AnalyticField {
    fn kind(&self) -> FieldKind {
        FieldKind::Analytic
    }

    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn eval(&self, x: &Vector, t: FlowTime) -> Result<Vector> {
        optimal_velocity(&self.spec, x, t)
    }

    fn jvp(&self, x: &Vector, t: FlowTime, u: &Vector) -> Result<Vector> {
        check_dim(u, self.dim())?;
        if self.spec.components() == 1 {
            let jac = single_gaussian_velocity_jacobian(&self.spec.covariances()[0], t)?;
            return Ok(jac * u);
        }
        finite_diff_jvp(|y| optimal_velocity(&self.spec, y, t), x, u, self.fd_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and activation values.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::Container(format!("unknown activation code {other}"))),
        }
    }
}

/// `[sin(w_k t)..., cos(w_k t)...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    /// `count` frequencies spaced geometrically from 1 to 100 rad per unit time.
    pub fn geometric(count: usize) -> Self {
        let frequencies = match count {
            0 => Vec::new(),
            1 => vec![1.0],
            n => (0..n).map(|k| 100f64.powf(k as f64 / (n - 1) as f64)).collect(),
        };
        Self { frequencies }
    }

    pub fn from_frequencies(frequencies: Vec<f64>) -> Self {
        Self { frequencies }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn width(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let sin = self.frequencies.iter().map(|w| (w * t).sin());
        let cos = self.frequencies.iter().map(|w| (w * t).cos());
        sin.chain(cos).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

/// How dropout masks are chosen at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    /// One mask per hidden layer, drawn from `seed.split(layer)`.
    Sampled(RngState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl MlpConfig {
    /// `d + 16 -> 128 -> 128 -> d`, tanh, no dropout.
    pub fn default_for(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![128, 128],
            time_frequencies: 8,
            activation: Activation::Tanh,
            dropout_rate: 0.0,
        }
    }
}

/// Fully connected velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    data_dim: usize,
    embedding: TimeEmbedding,
    layers: Vec<Dense>,
    activation: Activation,
    dropout_rate: f64,
}

/// Per-hidden-layer dropout masks for a batch, each `width x batch`, holding
/// `0` or `1 / (1 - rate)`.
pub type BatchMasks = Vec<Matrix>;

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.outputs(), l.inputs()),
                    bias: Vector::zeros(l.outputs()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    /// Flat view in container order (row-major weights, then bias, per layer).
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        for r in 0..l.outputs() {
            out.extend(l.weight.row(r).iter());
        }
        out.extend(l.bias.iter());
    }
    out
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: &MlpConfig, rng: RngState) -> Result<Self> {
        if config.data_dim == 0 {
            return Err(Error::InvalidArgument("data dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                config.dropout_rate
            )));
        }
        let embedding = TimeEmbedding::geometric(config.time_frequencies);
        let mut widths = vec![config.data_dim + embedding.width()];
        widths.extend(&config.hidden);
        widths.push(config.data_dim);
        let mut gen = rng.rng();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                Dense {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| dist.sample(&mut gen)),
                    bias: Vector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            data_dim: config.data_dim,
            embedding,
            layers,
            activation: config.activation,
            dropout_rate: config.dropout_rate,
        })
    }

    /// Assemble a network from explicit layers.
    pub fn from_layers(
        data_dim: usize,
        embedding: TimeEmbedding,
        layers: Vec<Dense>,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if layers[0].inputs() != data_dim + embedding.width() {
            return Err(Error::DimensionMismatch {
                expected: data_dim + embedding.width(),
                actual: layers[0].inputs(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimensionMismatch { expected: pair[0].outputs(), actual: pair[1].inputs() });
            }
        }
        let last = layers.last().expect("non-empty");
        if last.outputs() != data_dim {
            return Err(Error::DimensionMismatch { expected: data_dim, actual: last.outputs() });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument("dropout rate must lie in [0, 1)".into()));
        }
        Ok(Self { data_dim, embedding, layers, activation, dropout_rate })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.embedding
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument("dropout rate must lie in [0, 1)".into()));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_output_head(mut self) -> Self {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch { expected: self.parameter_count(), actual: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.outputs() {
                for c in 0..l.inputs() {
                    l.weight[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Mutable parameter slices in the same order as [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    /// FNV-1a over the little-endian parameter bytes in container order.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.to_flat() {
            for byte in v.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }

    fn input(&self, x: &Vector, t: f64) -> Vector {
        let emb = self.embedding.embed(t);
        Vector::from_iterator(self.data_dim + emb.len(), x.iter().copied().chain(emb))
    }

    fn masks(&self, mode: DropoutMode) -> Vec<Option<Vector>> {
        let hidden = self.layers.len() - 1;
        match mode {
            DropoutMode::Off => vec![None; hidden],
            DropoutMode::Sampled(seed) => (0..hidden)
                .map(|l| Some(self.draw_mask(&mut seed.split(l as u64).rng(), self.layers[l].outputs())))
                .collect(),
        }
    }

    fn draw_mask<R: Rng>(&self, rng: &mut R, width: usize) -> Vector {
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        Vector::from_fn(width, |_, _| if rng.gen::<f64>() < keep { scale } else { 0.0 })
    }

    /// Dropout masks for a training batch.
    pub fn draw_batch_masks<R: Rng>(&self, rng: &mut R, batch: usize) -> BatchMasks {
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| Matrix::from_fn(l.outputs(), batch, |_, _| if rng.gen::<f64>() < keep { scale } else { 0.0 }))
            .collect()
    }

    fn check_input(&self, x: &Vector) -> Result<()> {
        check_dim(x, self.data_dim)
    }

    /// Forward pass with optional tangent propagation.
    fn run(&self, x: &Vector, t: f64, tangent: Option<&Vector>, mode: DropoutMode) -> Result<(Vector, Option<Vector>)> {
        self.check_input(x)?;
        let masks = self.masks(mode);
        let mut a = self.input(x, t);
        let mut da = tangent.map(|u| {
            Vector::from_iterator(a.len(), u.iter().copied().chain(std::iter::repeat_n(0.0, self.embedding.width())))
        });
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * &a + &layer.bias;
            let dz = da.as_ref().map(|d| &layer.weight * d);
            if l == last {
                a = z;
                da = dz;
                break;
            }
            let act = z.map(|v| self.activation.apply(v));
            da = dz.map(|dz| {
                Vector::from_fn(dz.len(), |i, _| self.activation.derivative(z[i], act[i]) * dz[i])
            });
            a = act;
            if let Some(mask) = &masks[l] {
                a.component_mul_assign(mask);
                if let Some(d) = da.as_mut() {
                    d.component_mul_assign(mask);
                }
            }
        }
        if a.iter().any(|v| !v.is_finite()) || da.as_ref().is_some_and(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::ForwardDiverged);
        }
        Ok((a, da))
    }

    pub fn forward(&self, x: &Vector, t: FlowTime, mode: DropoutMode) -> Result<Vector> {
        self.run(x, t.value(), None, mode).map(|(y, _)| y)
    }

    pub fn forward_jvp(&self, x: &Vector, t: FlowTime, u: &Vector, mode: DropoutMode) -> Result<(Vector, Vector)> {
        check_dim(u, self.data_dim)?;
        let (y, dy) = self.run(x, t.value(), Some(u), mode)?;
        Ok((y, dy.expect("tangent requested")))
    }

    /// Stack `[x || embed(t)]` columns for a batch.
    pub fn input_matrix(&self, xs: &[Vector], ts: &[f64]) -> Result<Matrix> {
        if xs.len() != ts.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), actual: ts.len() });
        }
        let width = self.data_dim + self.embedding.width();
        let mut m = Matrix::zeros(width, xs.len());
        for (j, (x, &t)) in xs.iter().zip(ts).enumerate() {
            self.check_input(x)?;
            m.set_column(j, &self.input(x, t));
        }
        Ok(m)
    }

    /// Sum over the batch of `||y_b - target_b||^2` and its parameter gradient,
    /// by reverse accumulation through the same layers as the forward pass.
    pub fn squared_error_grad(
        &self,
        inputs: &Matrix,
        targets: &Matrix,
        masks: Option<&BatchMasks>,
    ) -> Result<(f64, Gradients)> {
        let batch = inputs.ncols();
        if targets.ncols() != batch || targets.nrows() != self.data_dim {
            return Err(Error::DimensionMismatch { expected: self.data_dim, actual: targets.nrows() });
        }
        let last = self.layers.len() - 1;
        // activations[l] is the input to layer l.
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.layers.len() + 1);
        let mut pre: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        activations.push(inputs.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &activations[l];
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if l == last {
                activations.push(z.clone());
                pre.push(z);
                break;
            }
            let mut a = z.map(|v| self.activation.apply(v));
            if let Some(m) = masks {
                a.component_mul_assign(&m[l]);
            }
            pre.push(z);
            activations.push(a);
        }
        let output = &activations[self.layers.len()];
        let resid = output - targets;
        let loss = resid.norm_squared();
        if !loss.is_finite() {
            return Err(Error::ForwardDiverged);
        }

        let mut grads = Gradients::zeros_like(self);
        let mut delta = resid * 2.0;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            grads.layers[l].weight = &delta * activations[l].transpose();
            grads.layers[l].bias = delta.column_sum();
            if l == 0 {
                break;
            }
            let mut upstream = layer.weight.transpose() * &delta;
            if let Some(m) = masks {
                upstream.component_mul_assign(&m[l - 1]);
            }
            // activations[l] already includes the mask, so the derivative is
            // taken from the pre-activation.
            for (u, &zv) in upstream.iter_mut().zip(pre[l - 1].iter()) {
                let a = self.activation.apply(zv);
                *u *= self.activation.derivative(zv, a);
            }
            delta = upstream;
        }
        Ok((loss, grads))
    }

    /// Serialize into the FVAR container.
    pub fn write_container<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        let widths = self.widths();
        w.write_all(&(widths.len() as u32).to_le_bytes())?;
        for width in &widths {
            w.write_all(&(*width as u32).to_le_bytes())?;
        }
        w.write_all(&(self.data_dim as u32).to_le_bytes())?;
        w.write_all(&self.activation.code().to_le_bytes())?;
        w.write_all(&self.dropout_rate.to_le_bytes())?;
        w.write_all(&(self.embedding.frequencies.len() as u32).to_le_bytes())?;
        for f in &self.embedding.frequencies {
            w.write_all(&f.to_le_bytes())?;
        }
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_container(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_container<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(container_eof)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CONTAINER_VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let n_widths = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n_widths) {
            return Err(Error::Container(format!("implausible layer count {n_widths}")));
        }
        let widths = (0..n_widths).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let data_dim = read_u32(&mut r)? as usize;
        let activation = Activation::from_code(read_u32(&mut r)?)?;
        let dropout_rate = read_f64(&mut r)?;
        let n_freq = read_u32(&mut r)? as usize;
        if n_freq > 4096 {
            return Err(Error::Container("implausible embedding size".into()));
        }
        let freqs = (0..n_freq).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let embedding = TimeEmbedding::from_frequencies(freqs);
        let mut layers = Vec::with_capacity(n_widths - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for row in 0..fan_out {
                for col in 0..fan_in {
                    weight[(row, col)] = read_f64(&mut r)?;
                }
            }
            let bias = Vector::from_iterator(fan_out, (0..fan_out).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?);
            layers.push(Dense { weight, bias });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Container("trailing bytes after parameters".into()));
        }
        let model = Self::from_layers(data_dim, embedding, layers, activation, dropout_rate)
            .map_err(|e| Error::Container(e.to_string()))?;
        if model.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Container("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_container_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ModelNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Self::read_container(bytes.as_slice())
    }
}

const CONTAINER_MAGIC: &[u8; 4] = b"FVAR";
const CONTAINER_VERSION: u32 = 1;

fn container_eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Container("truncated container".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(container_eof)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(container_eof)?;
    Ok(f64::from_le_bytes(b))
}

/// An [`Mlp`] viewed as a velocity field under a fixed dropout mode.
#[derive(Debug, Clone, Copy)]
pub struct MlpField<'a> {
    model: &'a Mlp,
    mode: DropoutMode,
    kind: FieldKind,
}

impl<'a> MlpField<'a> {
    pub fn new(model: &'a Mlp) -> Self {
        Self { model, mode: DropoutMode::Off, kind: FieldKind::Mlp }
    }

    pub fn with_dropout(model: &'a Mlp, mode: DropoutMode) -> Self {
        Self { model, mode, kind: FieldKind::Mlp }
    }

    /// A one-step network trained on full-interval average velocities.
    pub fn mean_velocity(model: &'a Mlp) -> Self {
        Self { model, mode: DropoutMode::Off, kind: FieldKind::MeanVelocity }
    }

    pub fn model(&self) -> &'a Mlp {
        self.model
    }
}

impl VelocityField for MlpField<'_> {
    fn kind(&self) -> FieldKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.model.data_dim
    }

    fn eval(&self, x: &Vector, t: FlowTime) -> Result<Vector> {
        self.model.forward(x, t, self.mode)
    }

    fn jvp(&self, x: &Vector, t: FlowTime, u: &Vector) -> Result<Vector> {
        self.model.forward_jvp(x, t, u, self.mode).map(|(_, dy)| dy)
    }
}

impl VelocityField for Mlp {
    fn kind(&self) -> FieldKind {
        FieldKind::Mlp
    }

    fn dim(&self) -> usize {
        self.data_dim
    }

    fn eval(&self, x: &Vector, t: FlowTime) -> Result<Vector> {
        self.forward(x, t, DropoutMode::Off)
    }

    fn jvp(&self, x: &Vector, t: FlowTime, u: &Vector) -> Result<Vector> {
        self.forward_jvp(x, t, u, DropoutMode::Off).map(|(_, dy)| dy)
    }
}

pub fn mlp_eval(model: &Mlp, x: &Vector, t: FlowTime, mode: DropoutMode) -> Result<Vector> {
    model.forward(x, t, mode)
}

pub fn mlp_jvp(model: &Mlp, x: &Vector, t: FlowTime, u: &Vector, mode: DropoutMode) -> Result<Vector> {
    model.forward_jvp(x, t, u, mode).map(|(_, dy)| dy)
}

/// Predicted average velocity over `[0, 1]` from noise `x0`.
pub fn mean_velocity_eval(model: &Mlp, x0: &Vector) -> Result<Vector> {
    model.forward(x0, FlowTime::new(0.0).expect("0 is a valid time"), DropoutMode::Off)
}

/// Counts evaluations and JVPs passing through a field.
#[derive(Debug)]
pub struct CountingField<F> {
    inner: F,
    evals: AtomicUsize,
    jvps: AtomicUsize,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, evals: AtomicUsize::new(0), jvps: AtomicUsize::new(0) }
    }

    pub fn evals(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn jvps(&self) -> usize {
        self.jvps.load(Ordering::Relaxed)
    }

    /// Evaluations plus JVPs, each counted as one forward pass.
    pub fn forward_equivalents(&self) -> usize {
        self.evals() + self.jvps()
    }

    pub fn into_inner(self) -> F {
        self.inner
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn kind(&self) -> FieldKind {
        self.inner.kind()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &Vector, t: FlowTime) -> Result<Vector> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x, t)
    }

    fn jvp(&self, x: &Vector, t: FlowTime, u: &Vector) -> Result<Vector> {
        self.jvps.fetch_add(1, Ordering::Relaxed);
        self.inner.jvp(x, t, u)
    }
}

/// A field with the same velocity everywhere; its Jacobian is zero.
#[derive(Debug, Clone)]
pub struct ConstantField {
    value: Vector,
}

impl ConstantField {
    pub fn new(value: Vector) -> Self {
        Self { value }
    }
}

impl VelocityField for ConstantField {
    fn kind(&self) -> FieldKind {
        FieldKind::Analytic
    }

    fn dim(&self) -> usize {
        self.value.len()
    }

    fn eval(&self, x: &Vector, _t: FlowTime) -> Result<Vector> {
        check_dim(x, self.value.len())?;
        Ok(self.value.clone())
    }

    fn jvp(&self, x: &Vector, _t: FlowTime, u: &Vector) -> Result<Vector> {
        check_dim(x, self.value.len())?;
        check_dim(u, self.value.len())?;
        Ok(Vector::zeros(self.value.len()))
    }
}

/// `v(x, t) = A x + b`, with Jacobian `A`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl VelocityField for LinearField {
    fn kind(&self) -> FieldKind {
        FieldKind::Analytic
    }

    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, x: &Vector, _t: FlowTime) -> Result<Vector> {
        check_dim(x, self.dim())?;
        Ok(&self.matrix * x + &self.offset)
    }

    fn jvp(&self, x: &Vector, _t: FlowTime, u: &Vector) -> Result<Vector> {
        check_dim(x, self.dim())?;
        check_dim(u, self.dim())?;
        Ok(&self.matrix * u)
    }
}
