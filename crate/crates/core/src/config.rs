//! Experiment configuration: a TOML file with typed sections, or a built-in
//! preset by name. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_mnist, toy_image_dataset, ToyKind, MNIST_DEFAULT_SUBSAMPLE};
use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::models::{Activation, MlpConfig};
use crate::numerics::{Matrix, RngState, Vector};
use crate::report::Normalization;
use crate::training::{LrSchedule, Objective, TrainConfig, TrainData};
use crate::uq::shift_endpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// One row-major `d x d` matrix per component.
        covariances: Vec<Vec<f64>>,
    },
    ToyImage {
        shape: ToyKind,
        side: usize,
        count: usize,
    },
    Mnist {
        path: PathBuf,
        #[serde(default = "default_subsample")]
        subsample: usize,
    },
}

fn default_subsample() -> usize {
    MNIST_DEFAULT_SUBSAMPLE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![128, 128], time_frequencies: 8, activation: Activation::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub pairs_per_epoch: usize,
    pub parallel: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            schedule: d.schedule,
            weight_decay: d.weight_decay,
            pairs_per_epoch: d.pairs_per_epoch,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqSection {
    /// Evaluation time for single-time commands.
    pub t: f64,
    /// Grid for the consistency protocol and contractivity checks.
    pub times: Vec<f64>,
    /// Snapshot grid for trajectory series; `0` is shifted to `1e-3`.
    pub trajectory_times: Vec<f64>,
    pub probes: usize,
    pub epsilon: f64,
    /// Held-out samples for evaluation.
    pub samples: usize,
    pub steps: usize,
    pub noise_level: f64,
    pub k_percent: f64,
    pub normalization: Normalization,
}

impl Default for UqSection {
    fn default() -> Self {
        Self {
            t: 0.5,
            times: vec![0.3, 0.5, 0.7, 0.9],
            trajectory_times: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.98],
            probes: 50,
            epsilon: 1e-2,
            samples: 64,
            steps: 100,
            noise_level: 0.5,
            k_percent: 30.0,
            normalization: Normalization::PerFrame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsSection {
    pub tweedie_fm: bool,
    pub tweedie_onestep: bool,
    /// Ensemble size; `0` disables the method.
    pub ensemble: usize,
    /// MC dropout passes; `0` disables the method.
    pub mc_dropout: usize,
    pub dropout_rate: f64,
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self { tweedie_fm: true, tweedie_onestep: true, ensemble: 5, mc_dropout: 50, dropout_rate: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub uq: UqSection,
    #[serde(default)]
    pub methods: MethodsSection,
}

/// Names accepted in place of a config path.
pub const PRESETS: [&str; 4] = ["gmm2d", "gmm1", "toy-bars", "toy-blobs"];

fn gmm_task(spec: &GmmSpec) -> TaskConfig {
    TaskConfig::Gmm {
        weights: spec.weights().to_vec(),
        means: spec.means().iter().map(|m| m.iter().copied().collect()).collect(),
        covariances: spec.covariances().iter().map(|c| c.transpose().iter().copied().collect()).collect(),
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let desk_train = TrainSection { learning_rate: 1e-3, ..TrainSection::default() };
        let task = match name {
            "gmm2d" => gmm_task(&GmmSpec::default_task()),
            "gmm1" => gmm_task(&GmmSpec::standard_normal(2).expect("valid spec")),
            "toy-bars" => TaskConfig::ToyImage { shape: ToyKind::Bars, side: 8, count: 2048 },
            "toy-blobs" => TaskConfig::ToyImage { shape: ToyKind::Blobs, side: 8, count: 2048 },
            _ => return None,
        };
        let train = match task {
            TaskConfig::ToyImage { .. } => TrainSection { epochs: 100, ..desk_train },
            _ => desk_train,
        };
        Some(Self {
            seed: 0,
            out: None,
            task,
            model: ModelSection::default(),
            train,
            uq: UqSection::default(),
            methods: MethodsSection::default(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// A file path if one exists, otherwise a preset name.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.is_file() {
            return Self::from_toml(&std::fs::read_to_string(path)?);
        }
        match Self::preset(name_or_path) {
            Some(c) => Ok(c),
            None => Err(Error::Config(format!(
                "no config file or preset named {name_or_path:?} (presets: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match &self.task {
            TaskConfig::Gmm { .. } => {
                self.gmm_spec()?;
            }
            TaskConfig::ToyImage { side, count, .. } => {
                if !(4..=32).contains(side) {
                    return bad(format!("toy image side must lie in [4, 32], got {side}"));
                }
                if *count < 2 {
                    return bad("toy image count must be at least 2".into());
                }
            }
            TaskConfig::Mnist { path, subsample } => {
                if !path.is_file() {
                    return bad(format!("MNIST file not found: {}", path.display()));
                }
                if *subsample == 0 {
                    return bad("MNIST subsample must be positive".into());
                }
            }
        }
        for &t in self.uq.times.iter().chain([&self.uq.t]) {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("evaluation time {t} must lie in (0, 1)"));
            }
        }
        for &t in &self.uq.trajectory_times {
            if !(0.0..1.0).contains(&t) || shift_endpoint(t).is_err() {
                return bad(format!("trajectory time {t} must lie in [0, 1)"));
            }
        }
        if self.uq.trajectory_times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("trajectory times must be strictly increasing".into());
        }
        if self.uq.probes == 0 || self.uq.samples < 2 || self.uq.steps == 0 {
            return bad("probes, samples and steps must be positive (samples at least 2)".into());
        }
        if !(self.uq.epsilon > 0.0 && self.uq.epsilon <= 0.1) {
            return bad(format!("epsilon must lie in (0, 0.1], got {}", self.uq.epsilon));
        }
        if !(0.0..=1.0).contains(&self.uq.noise_level) {
            return bad("noise level must lie in [0, 1]".into());
        }
        if !(self.uq.k_percent > 0.0 && self.uq.k_percent < 100.0) {
            return bad("k_percent must lie in (0, 100)".into());
        }
        if self.methods.ensemble == 1 || self.methods.mc_dropout == 1 {
            return bad("ensemble size and dropout passes must be 0 or at least 2".into());
        }
        if !(0.0..1.0).contains(&self.methods.dropout_rate) {
            return bad("dropout rate must lie in [0, 1)".into());
        }
        self.train_config(Objective::Fm, RngState::new(0)).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn gmm_spec(&self) -> Result<GmmSpec> {
        let TaskConfig::Gmm { weights, means, covariances } = &self.task else {
            return Err(Error::Config("task is not a mixture".into()));
        };
        let d = means.first().map_or(0, |m| m.len());
        if d == 0 || covariances.iter().any(|c| c.len() != d * d) || means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("mixture means and covariances must share one dimension".into()));
        }
        GmmSpec::new(
            weights.clone(),
            means.iter().map(|m| Vector::from_row_slice(m)).collect(),
            covariances.iter().map(|c| Matrix::from_row_slice(d, d, c)).collect(),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn data_dim(&self) -> Result<usize> {
        Ok(match &self.task {
            TaskConfig::Gmm { .. } => self.gmm_spec()?.dim(),
            TaskConfig::ToyImage { side, .. } => side * side,
            TaskConfig::Mnist { .. } => crate::data::MNIST_SIDE * crate::data::MNIST_SIDE,
        })
    }

    /// Image side for map output, when the data are square images.
    pub fn image_side(&self) -> Option<usize> {
        match &self.task {
            TaskConfig::Gmm { .. } => None,
            TaskConfig::ToyImage { side, .. } => Some(*side),
            TaskConfig::Mnist { .. } => Some(crate::data::MNIST_SIDE),
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::new(self.seed)
    }

    pub fn mlp_config(&self, dropout_rate: f64) -> Result<MlpConfig> {
        Ok(MlpConfig {
            data_dim: self.data_dim()?,
            hidden: self.model.hidden.clone(),
            time_frequencies: self.model.time_frequencies,
            activation: self.model.activation,
            dropout_rate,
        })
    }

    pub fn train_config(&self, objective: Objective, data_seed: RngState) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            schedule: self.train.schedule,
            weight_decay: self.train.weight_decay,
            data_seed,
            objective,
            pairs_per_epoch: self.train.pairs_per_epoch,
            parallel: self.train.parallel,
        }
    }

    /// Training data for the task.
    pub fn train_data(&self) -> Result<TrainData> {
        let seeds = self.seeds();
        Ok(match &self.task {
            TaskConfig::Gmm { .. } => TrainData::Gmm(self.gmm_spec()?),
            TaskConfig::ToyImage { shape, side, count } => {
                TrainData::Points(toy_image_dataset(*shape, *side, *count, seeds.dataset)?)
            }
            TaskConfig::Mnist { path, subsample } => TrainData::Points(load_mnist(path, *subsample)?),
        })
    }

    /// Held-out data points, disjoint from the training draw.
    pub fn eval_samples(&self) -> Result<Vec<Vector>> {
        let seeds = self.seeds();
        let n = self.uq.samples;
        match &self.task {
            TaskConfig::Gmm { .. } => {
                let spec = self.gmm_spec()?;
                let mut g = seeds.held_out.rng();
                Ok((0..n).map(|_| spec.sample(&mut g)).collect())
            }
            TaskConfig::ToyImage { shape, side, .. } => toy_image_dataset(*shape, *side, n, seeds.held_out),
            TaskConfig::Mnist { path, subsample } => {
                let all = load_mnist(path, subsample + n)?;
                if all.len() < subsample + n {
                    return Err(Error::Config(format!(
                        "MNIST file holds {} images; {} are needed for training plus evaluation",
                        all.len(),
                        subsample + n
                    )));
                }
                Ok(all[*subsample..].to_vec())
            }
        }
    }
}

/// Every random stream an experiment uses, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seeds {
    pub dataset: RngState,
    pub held_out: RngState,
    pub fm_init: RngState,
    pub fm_data: RngState,
    pub onestep_init: RngState,
    pub onestep_data: RngState,
    pub ensemble: RngState,
    pub dropout_init: RngState,
    pub dropout_data: RngState,
    pub evaluation: RngState,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        let m = RngState::new(master);
        Self {
            dataset: m.split(1),
            held_out: m.split(2),
            fm_init: m.split(3),
            fm_data: m.split(4),
            onestep_init: m.split(5),
            onestep_data: m.split(6),
            ensemble: m.split(7),
            dropout_init: m.split(8),
            dropout_data: m.split(9),
            evaluation: m.split(10),
        }
    }
}
