//! Experiment runners behind the command line. Each runner is a pure function
//! of the configuration and master seed: CSVs and maps are byte-identical on
//! rerun, while timestamps and wall-clock go to `metadata-*.txt` and
//! `ledger.toml`.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand_distr::{Distribution, StandardNormal};

use crate::baselines::{ensemble_uq, mc_dropout_uq};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gmm::gmm_posterior;
use crate::interpolant::{interpolate, FlowTime};
use crate::metrics::{
    consistency_protocol, error_correlation, ConsistencyConfig, ConsistencyRow, EnsembleMethod, ErrorTarget,
    McDropoutMethod, TweedieMethod, UqMethod,
};
use crate::models::{analytic_handle, CountingField, Mlp, MlpField};
use crate::numerics::{draw_rademacher, relative_frobenius, ProbeSet, Vector};
use crate::report::{cost_report, cost_rows, write_metadata, write_report, write_uq_map, CostLedger, ReportRow};
use crate::sampler::euler_generate;
use crate::training::{train, train_ensemble, Objective, TrainReport};
use crate::uq::{cov_closed_form, one_step_cov, prior_baseline, trajectory_uq};

/// Tolerance for the oracle identity check.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

/// Maps are written for at most this many samples per command.
const MAP_SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Fm,
    OneStep,
    Ensemble,
    McDropout,
}

impl TrainTarget {
    pub const ALL: [TrainTarget; 4] = [Self::Fm, Self::OneStep, Self::Ensemble, Self::McDropout];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqKind {
    Tweedie,
    OneStep,
    Ensemble,
    McDropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub max_error: f64,
    pub points: usize,
    pub pass: bool,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    started: Instant,
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        std::fs::create_dir_all(out.join("models"))?;
        std::fs::create_dir_all(out.join("maps"))?;
        std::fs::write(out.join("config.toml"), config.to_toml()?)?;
        Ok(Self { config, out, started: Instant::now() })
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.out.join("models").join(format!("{name}.fvar"))
    }

    fn load_model(&self, name: &str) -> Result<Mlp> {
        let model = Mlp::load(&self.model_path(name))?;
        if model.data_dim() != self.config.data_dim()? {
            return Err(Error::DimensionMismatch { expected: self.config.data_dim()?, actual: model.data_dim() });
        }
        Ok(model)
    }

    fn load_ensemble(&self) -> Result<Vec<Mlp>> {
        (0..self.config.methods.ensemble).map(|i| self.load_model(&format!("ensemble-{i}"))).collect()
    }

    fn ledger_path(&self) -> PathBuf {
        self.out.join("ledger.toml")
    }

    pub fn ledger(&self) -> Result<CostLedger> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(CostLedger::new());
        }
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }

    fn update_ledger(&self, f: impl FnOnce(&mut CostLedger)) -> Result<()> {
        let mut ledger = self.ledger()?;
        f(&mut ledger);
        let text = toml::to_string(&ledger).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(self.ledger_path(), text)?;
        Ok(())
    }

    fn finish(&self, command: &str, extra: Vec<(String, String)>) -> Result<()> {
        let mut entries = vec![
            ("command".to_string(), command.to_string()),
            ("finished_unix".to_string(), unix_seconds().to_string()),
            ("elapsed_seconds".to_string(), format!("{:.3}", self.started.elapsed().as_secs_f64())),
            ("seed".to_string(), self.seed().to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ];
        entries.extend(extra);
        write_metadata(&self.out.join(format!("metadata-{command}.txt")), &entries)
    }

    pub fn method_label(&self, kind: UqKind) -> String {
        match kind {
            UqKind::Tweedie => "tweedie-fm".into(),
            UqKind::OneStep => "tweedie-onestep".into(),
            UqKind::Ensemble => format!("ensemble-{}", self.config.methods.ensemble),
            UqKind::McDropout => format!("mc-dropout-{}", self.config.methods.mc_dropout),
        }
    }

    /// Noise endpoint shared by every command for held-out sample `i`.
    fn noise(&self, i: usize) -> Vector {
        let mut g = self.config.seeds().evaluation.split(0).split(i as u64).rng();
        Vector::from_fn(self.config.data_dim().unwrap_or(0), |_, _| StandardNormal.sample(&mut g))
    }

    fn eval_points(&self, t: FlowTime) -> Result<Vec<(Vector, Vector)>> {
        self.config
            .eval_samples()?
            .into_iter()
            .enumerate()
            .map(|(i, x1)| {
                let x0 = self.noise(i);
                Ok((interpolate(&x0, &x1, t)?, x0))
            })
            .collect()
    }

    fn train_rows(&self, method: &str, report: &TrainReport, member: Option<usize>) -> Vec<ReportRow> {
        let mut rows: Vec<ReportRow> = report
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, &l)| ReportRow::new("train", method, self.seed(), "epoch_loss", Some(l)).index(e))
            .collect();
        let mut tail = vec![
            ReportRow::new("train", method, self.seed(), "steps", Some(report.steps as f64)),
            ReportRow::new("train", method, self.seed(), "forward_equivalents", Some(report.forward_equivalents as f64)),
            ReportRow::new("train", method, self.seed(), "t_clamp_low", Some(report.t_clamp.0)),
            ReportRow::new("train", method, self.seed(), "t_clamp_high", Some(report.t_clamp.1)),
        ];
        if let Some(m) = member {
            for r in &mut tail {
                r.index = Some(m);
            }
        }
        rows.extend(tail);
        rows
    }

    /// Train one model family, save its containers and report rows, and
    /// record the training cost.
    pub fn train(&self, target: TrainTarget) -> Result<Vec<ReportRow>> {
        let seeds = self.config.seeds();
        let data = self.config.train_data()?;
        let mut rows = Vec::new();
        let mut checksums = Vec::new();
        let (label, seconds, fe) = match target {
            TrainTarget::Fm | TrainTarget::OneStep | TrainTarget::McDropout => {
                let (name, objective, init, order, dropout) = match target {
                    TrainTarget::Fm => ("fm", Objective::Fm, seeds.fm_init, seeds.fm_data, 0.0),
                    TrainTarget::OneStep => ("onestep", Objective::OneStep, seeds.onestep_init, seeds.onestep_data, 0.0),
                    _ => ("dropout", Objective::Fm, seeds.dropout_init, seeds.dropout_data, self.config.methods.dropout_rate),
                };
                let mut model = Mlp::new(&self.config.mlp_config(dropout)?, init)?;
                let report = train(&mut model, &data, &self.config.train_config(objective, order))?;
                model.save(&self.model_path(name))?;
                rows.extend(self.train_rows(name, &report, None));
                checksums.push((name.to_string(), report.checksum));
                let label = match target {
                    TrainTarget::Fm => self.method_label(UqKind::Tweedie),
                    TrainTarget::OneStep => self.method_label(UqKind::OneStep),
                    _ => self.method_label(UqKind::McDropout),
                };
                (label, report.seconds, report.forward_equivalents as u64)
            }
            TrainTarget::Ensemble => {
                let m = self.config.methods.ensemble;
                let members = train_ensemble(
                    m,
                    &self.config.mlp_config(0.0)?,
                    &data,
                    &self.config.train_config(Objective::Fm, seeds.ensemble),
                    seeds.ensemble,
                    true,
                )?;
                let (mut seconds, mut fe) = (0.0, 0);
                for (i, (model, report)) in members.iter().enumerate() {
                    model.save(&self.model_path(&format!("ensemble-{i}")))?;
                    rows.extend(self.train_rows("ensemble", report, Some(i)));
                    checksums.push((format!("ensemble-{i}"), report.checksum));
                    seconds += report.seconds;
                    fe += report.forward_equivalents as u64;
                }
                (self.method_label(UqKind::Ensemble), seconds, fe)
            }
        };
        let name = match target {
            TrainTarget::Fm => "fm",
            TrainTarget::OneStep => "onestep",
            TrainTarget::Ensemble => "ensemble",
            TrainTarget::McDropout => "mc-dropout",
        };
        write_report(&self.out.join(format!("train-{name}.csv")), &rows)?;
        let mut w = csv::Writer::from_path(self.out.join(format!("checksums-{name}.csv")))?;
        w.write_record(["model", "seed", "checksum"])?;
        for (model, sum) in &checksums {
            w.write_record([model.as_str(), &self.seed().to_string(), &format!("{sum:016x}")])?;
        }
        w.flush()?;
        self.update_ledger(|l| l.set_training(&label, seconds, fe))?;
        self.finish(&format!("train-{name}"), vec![("train_seconds".into(), format!("{seconds:.3}"))])?;
        Ok(rows)
    }

    /// Uncertainty at every held-out point for one method. `t` overrides the
    /// configured time; the one-step method evaluates at `epsilon` on noise.
    pub fn uq(&self, kind: UqKind, t: Option<f64>) -> Result<Vec<ReportRow>> {
        let label = self.method_label(kind);
        let seeds = self.config.seeds();
        let t_value = t.unwrap_or(self.config.uq.t);
        let t = FlowTime::open(t_value)?;
        let s = self.config.uq.probes;
        let side = self.config.image_side();
        let points = self.eval_points(t)?;
        let mut rows = Vec::new();
        let mut traces = Vec::with_capacity(points.len());
        let mut forward = 0u64;
        let start = Instant::now();
        let mut maps: Vec<Vector> = Vec::new();
        let (eval_t, probes_used) = match kind {
            UqKind::Tweedie | UqKind::OneStep => {
                let onestep = kind == UqKind::OneStep;
                let model = self.load_model(if onestep { "onestep" } else { "fm" })?;
                let field = if onestep { MlpField::mean_velocity(&model) } else { MlpField::new(&model) };
                let counted = CountingField::new(field);
                for (i, (xt, x0)) in points.iter().enumerate() {
                    let probes = draw_rademacher(seeds.evaluation.split(1).split(i as u64), xt.len(), s)?;
                    let est = if onestep {
                        one_step_cov(&counted, x0, self.config.uq.epsilon, &probes, false)?
                    } else {
                        cov_closed_form(&counted, xt, t, &probes, false)?
                    };
                    traces.push(est.trace);
                    rows.push(
                        ReportRow::new("uq", &label, self.seed(), "trace_raw", Some(est.trace_raw))
                            .at(est.t.value())
                            .probes(s)
                            .index(i),
                    );
                    if i < MAP_SAMPLES {
                        maps.push(est.diagonal.clone());
                    }
                }
                forward = counted.forward_equivalents() as u64;
                (if onestep { self.config.uq.epsilon } else { t_value }, Some(s))
            }
            UqKind::Ensemble => {
                let members = self.load_ensemble()?;
                for (i, (xt, _)) in points.iter().enumerate() {
                    let est = ensemble_uq(&members, xt, t)?;
                    forward += est.count as u64;
                    traces.push(est.scalar);
                    if i < MAP_SAMPLES {
                        maps.push(est.per_pixel);
                    }
                }
                (t_value, None)
            }
            UqKind::McDropout => {
                let model = self.load_model("dropout")?;
                let passes = self.config.methods.mc_dropout;
                for (i, (xt, _)) in points.iter().enumerate() {
                    let est = mc_dropout_uq(&model, xt, t, passes, seeds.evaluation.split(2).split(i as u64))?;
                    forward += est.count as u64;
                    traces.push(est.scalar);
                    if i < MAP_SAMPLES {
                        maps.push(est.per_pixel);
                    }
                }
                (t_value, None)
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        let with_s = |r: ReportRow| match probes_used {
            Some(s) => r.probes(s),
            None => r,
        };
        for (i, &u) in traces.iter().enumerate() {
            rows.push(with_s(ReportRow::new("uq", &label, self.seed(), "trace", Some(u)).at(eval_t).index(i)));
        }
        let mean = traces.iter().sum::<f64>() / traces.len() as f64;
        rows.push(with_s(ReportRow::new("uq", &label, self.seed(), "mean_trace", Some(mean)).at(eval_t)));
        let d = self.config.data_dim()?;
        let baseline = prior_baseline(FlowTime::open(eval_t)?, d)?;
        rows.push(ReportRow::new("uq", &label, self.seed(), "prior_baseline", Some(baseline)).at(eval_t));
        rows.push(ReportRow::new("uq", &label, self.seed(), "forward_equivalents", Some(forward as f64)).at(eval_t));
        if let Some(side) = side {
            for (i, map) in maps.iter().enumerate() {
                let path = self.out.join("maps").join(format!("uq-{label}-t{eval_t:.3}-{i}.pgm"));
                let (lo, hi) = write_uq_map(map, side, self.config.uq.normalization, &path)?;
                rows.push(ReportRow::new("uq", &label, self.seed(), "map_lo", Some(lo)).at(eval_t).index(i));
                rows.push(ReportRow::new("uq", &label, self.seed(), "map_hi", Some(hi)).at(eval_t).index(i));
            }
        }
        write_report(&self.out.join(format!("uq-{label}.csv")), &rows)?;
        self.update_ledger(|l| l.set_inference(&label, seconds / points.len() as f64, forward / points.len() as u64))?;
        self.finish(&format!("uq-{label}"), vec![("inference_seconds".into(), format!("{seconds:.6}"))])?;
        Ok(rows)
    }

    /// Closed-form covariance on the exact mixture field against the
    /// conjugate posterior, over a grid within three marginal standard
    /// deviations and `t` in `{0.1, ..., 0.9}`.
    pub fn oracle_check(&self) -> Result<OracleCheck> {
        let spec = self.config.gmm_spec()?;
        let d = spec.dim();
        let field = analytic_handle(spec.clone());
        let probes = if d <= 4 {
            ProbeSet::exhaustive(d)?
        } else {
            draw_rademacher(self.config.seeds().evaluation.split(6), d, self.config.uq.probes)?
        };
        let mean = spec.marginal_mean();
        let cov = spec.marginal_covariance();
        let offsets = [-3.0, -1.5, 0.0, 1.5, 3.0];
        let mut rows = Vec::new();
        let mut worst: f64 = 0.0;
        let mut points = 0;
        for k in 1..=9 {
            let t = FlowTime::open(k as f64 / 10.0)?;
            let tv = t.value();
            let sd: Vec<f64> = (0..d).map(|i| (tv * tv * cov[(i, i)] + (1.0 - tv).powi(2)).sqrt()).collect();
            let mut worst_t: f64 = 0.0;
            // Full grid for d <= 2, axis lines otherwise.
            let grid: Vec<Vector> = if d <= 2 {
                (0..offsets.len().pow(d as u32))
                    .map(|mut code| {
                        Vector::from_fn(d, |i, _| {
                            let o = offsets[code % offsets.len()];
                            code /= offsets.len();
                            tv * mean[i] + o * sd[i]
                        })
                    })
                    .collect()
            } else {
                (0..d)
                    .flat_map(|axis| {
                        let (mean, sd) = (&mean, &sd);
                        offsets.iter().map(move |&o| {
                            Vector::from_fn(d, |i, _| tv * mean[i] + if i == axis { o * sd[i] } else { 0.0 })
                        })
                    })
                    .collect()
            };
            for xt in &grid {
                let est = cov_closed_form(&field, xt, t, &probes, true)?;
                let oracle = gmm_posterior(&spec, xt, t)?;
                let err = relative_frobenius(est.covariance.as_ref().expect("d <= 64"), &oracle.covariance);
                worst_t = worst_t.max(err);
                points += 1;
            }
            worst = worst.max(worst_t);
            rows.push(ReportRow::new("oracle-check", "analytic", self.seed(), "max_relative_frobenius", Some(worst_t)).at(tv));
        }
        rows.push(ReportRow::new("oracle-check", "analytic", self.seed(), "max_relative_frobenius", Some(worst)));
        rows.push(ReportRow::new("oracle-check", "analytic", self.seed(), "points", Some(points as f64)));
        write_report(&self.out.join("oracle-check.csv"), &rows)?;
        self.finish("oracle-check", Vec::new())?;
        Ok(OracleCheck { max_error: worst, points, pass: worst <= ORACLE_TOLERANCE })
    }

    /// Generate trajectories with the fm model and evaluate uncertainty at
    /// the configured snapshot times.
    pub fn traj(&self, count: usize) -> Result<Vec<ReportRow>> {
        let model = self.load_model("fm")?;
        let seeds = self.config.seeds();
        let uq = &self.config.uq;
        let label = self.method_label(UqKind::Tweedie);
        let d = self.config.data_dim()?;
        let mut rows = Vec::new();
        for i in 0..count {
            let x0 = self.noise(i);
            let traj = euler_generate(&model, &x0, uq.steps, &uq.trajectory_times)?;
            if let Some(step) = traj.aborted_at {
                return Err(Error::SamplerDiverged { step });
            }
            // The end node sits at t = 1, where the covariance is undefined;
            // requests that land there fall back to the last interior node.
            let interior = traj.times.iter().rposition(|&t| t < 1.0).expect("start node is interior");
            let mut nodes: Vec<usize> = uq
                .trajectory_times
                .iter()
                .map(|&r| traj.times.iter().position(|&t| t >= r - 1e-12).unwrap_or(interior).min(interior))
                .collect();
            nodes.dedup();
            let states: Vec<(f64, Vector)> = nodes.iter().map(|&k| (traj.times[k], traj.states[k].clone())).collect();
            let series = trajectory_uq(&model, &states, uq.probes, seeds.evaluation.split(5).split(i as u64))?;
            for (j, est) in series.entries().iter().enumerate() {
                let t = est.t.value();
                rows.push(ReportRow::new("traj", &label, self.seed(), "trace", Some(est.trace)).at(t).probes(uq.probes).index(i));
                rows.push(ReportRow::new("traj", &label, self.seed(), "prior_baseline", Some(prior_baseline(est.t, d)?)).at(t).index(i));
                if let Some(side) = self.config.image_side() {
                    let path = self.out.join("maps").join(format!("traj-{i}-{j}-t{t:.3}.pgm"));
                    let (lo, hi) = write_uq_map(est, side, uq.normalization, &path)?;
                    rows.push(ReportRow::new("traj", &label, self.seed(), "map_lo", Some(lo)).at(t).index(i));
                    rows.push(ReportRow::new("traj", &label, self.seed(), "map_hi", Some(hi)).at(t).index(i));
                }
            }
        }
        write_report(&self.out.join("traj.csv"), &rows)?;
        self.finish("traj", Vec::new())?;
        Ok(rows)
    }

    /// Corruption consistency table plus the clean error correlation at the
    /// configured time, for every enabled method with a trained model.
    pub fn consistency(&self) -> Result<Vec<ConsistencyRow>> {
        let methods_cfg = &self.config.methods;
        let fm = if methods_cfg.tweedie_fm { Some(self.load_model("fm")?) } else { None };
        let members = if methods_cfg.ensemble >= 2 { Some(self.load_ensemble()?) } else { None };
        let dropout = if methods_cfg.mc_dropout >= 2 { Some(self.load_model("dropout")?) } else { None };

        let tweedie = fm.as_ref().map(|m| TweedieMethod {
            field: MlpField::new(m),
            probes: self.config.uq.probes,
            label: self.method_label(UqKind::Tweedie),
        });
        let ensemble = members.as_ref().map(|ms| EnsembleMethod { members: ms.iter().collect() });
        let mc = dropout.as_ref().map(|m| McDropoutMethod { model: m, passes: methods_cfg.mc_dropout });
        let mut methods: Vec<&dyn UqMethod> = Vec::new();
        if let Some(m) = &tweedie {
            methods.push(m);
        }
        if let Some(m) = &ensemble {
            methods.push(m);
        }
        if let Some(m) = &mc {
            methods.push(m);
        }
        if methods.is_empty() {
            return Err(Error::Config("no methods enabled".into()));
        }

        let samples = self.config.eval_samples()?;
        let uq = &self.config.uq;
        let protocol = ConsistencyConfig {
            noise_level: uq.noise_level,
            times: uq.times.clone(),
            k_percent: uq.k_percent,
            target: ErrorTarget::Clean,
        };
        let rng = self.config.seeds().evaluation.split(3);
        let table = consistency_protocol(&methods, &samples, &protocol, rng)?;
        let correlation = error_correlation(&methods, &samples, FlowTime::open(uq.t)?, rng.split(1))?;

        let mut rows = Vec::new();
        for r in &table {
            let t = r.t.value();
            let probes = (r.method == self.method_label(UqKind::Tweedie)).then_some(uq.probes);
            for (metric, v) in [
                ("pixel_spearman", r.pixel_spearman),
                ("hitrate", Some(r.hitrate)),
                ("sample_spearman", r.sample_spearman),
            ] {
                let mut row = ReportRow::new("consistency", &r.method, self.seed(), metric, v).at(t);
                row.probes = probes;
                rows.push(row);
            }
        }
        for (method, rho) in correlation {
            rows.push(ReportRow::new("error-correlation", &method, self.seed(), "sample_spearman", rho).at(uq.t));
        }
        rows.push(ReportRow::new("consistency", "protocol", self.seed(), "noise_level", Some(uq.noise_level)));
        rows.push(ReportRow::new("consistency", "protocol", self.seed(), "k_percent", Some(uq.k_percent)));
        write_report(&self.out.join("consistency.csv"), &rows)?;
        self.finish("consistency", Vec::new())?;
        Ok(table)
    }

    /// Mean uncertainty over held-out points for each probe count and
    /// replicate, with the exact value alongside when `d <= 64`.
    pub fn ablate_probes(&self, counts: &[usize], replicates: usize) -> Result<Vec<ReportRow>> {
        if counts.is_empty() || counts.contains(&0) || replicates == 0 {
            return Err(Error::InvalidArgument("probe counts and replicates must be positive".into()));
        }
        let model = self.load_model("fm")?;
        let t = FlowTime::open(self.config.uq.t)?;
        let points = self.eval_points(t)?;
        let label = self.method_label(UqKind::Tweedie);
        let stream = self.config.seeds().evaluation.split(4);
        let mut rows = Vec::new();
        for &s in counts {
            for r in 0..replicates {
                let mut sum = 0.0;
                for (i, (xt, _)) in points.iter().enumerate() {
                    let probes = draw_rademacher(stream.split(s as u64).split(r as u64).split(i as u64), xt.len(), s)?;
                    sum += cov_closed_form(&model, xt, t, &probes, false)?.trace_raw;
                }
                let mean = sum / points.len() as f64;
                rows.push(ReportRow::new("ablate-probes", &label, self.seed(), "mean_trace", Some(mean)).at(t.value()).probes(s).index(r));
            }
        }
        if self.config.data_dim()? <= crate::uq::MAX_MATERIALIZED_DIM {
            let one = ProbeSet::from_vectors(vec![Vector::from_element(self.config.data_dim()?, 1.0)])?;
            let mut sum = 0.0;
            for (xt, _) in &points {
                sum += cov_closed_form(&model, xt, t, &one, true)?.trace_raw;
            }
            rows.push(ReportRow::new("ablate-probes", &label, self.seed(), "exact_mean_trace", Some(sum / points.len() as f64)).at(t.value()));
        }
        write_report(&self.out.join("ablate-probes.csv"), &rows)?;
        self.finish("ablate-probes", Vec::new())?;
        Ok(rows)
    }

    /// Cost summary from the ledger filled by earlier `train` and `uq` runs.
    pub fn cost(&self) -> Result<CostLedger> {
        let ledger = self.ledger()?;
        if ledger.entries().next().is_none() {
            return Err(Error::Config("cost ledger is empty; run train and uq first".into()));
        }
        write_report(&self.out.join("cost.csv"), &cost_rows(&ledger, "cost", self.seed()))?;
        let (totals, ratios) = cost_report(&ledger);
        let mut extra = Vec::new();
        for (method, e) in &totals {
            extra.push((format!("{method}.train_seconds"), format!("{:.6}", e.train_seconds)));
            extra.push((format!("{method}.inference_seconds"), format!("{:.6}", e.inference_seconds)));
            extra.push((format!("{method}.total_seconds"), format!("{:.6}", e.total_seconds())));
        }
        for r in &ratios {
            if let Some(s) = r.seconds {
                extra.push((format!("{}/{}.seconds_ratio", r.numerator, r.denominator), format!("{s:.3}")));
            }
        }
        self.finish("cost", extra)?;
        Ok(ledger)
    }
}

/// Every CSV and PGM under `dir`, sorted, with contents; used to compare reruns.
pub fn deterministic_outputs(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "pgm" | "fvar")) {
                let bytes = std::fs::read(&path)?;
                out.push((path.strip_prefix(dir).expect("under dir").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}
