//! Gaussian-mixture data distributions and their exact flow posteriors.
//!
//! Under the interpolant, component `k` of the mixture induces the marginal
//! `xt ~ N(t mu_k, t^2 Sigma_k + (1 - t)^2 I)`. Conditioning each component on
//! `xt` is ordinary Gaussian conjugacy; the mixture posterior then follows
//! from the responsibilities and the law of total variance. These quantities
//! are the ground truth every estimator in the crate is checked against.

use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::error::{Error, Result};
use crate::interpolant::FlowTime;
use crate::numerics::{check_dim, is_symmetric, Matrix, RngState, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vector>,
    covariances: Vec<Matrix>,
    chol_factors: Vec<Matrix>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, covariances: Vec<Matrix>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidSpec("mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidSpec(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidSpec("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        let mut chol_factors = Vec::with_capacity(k);
        for (mu, sigma) in means.iter().zip(&covariances) {
            if mu.len() != d || sigma.nrows() != d || sigma.ncols() != d {
                return Err(Error::InvalidSpec("inconsistent component dimensions".into()));
            }
            if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("non-finite parameter".into()));
            }
            if !is_symmetric(sigma) {
                return Err(Error::InvalidSpec("covariance is not symmetric".into()));
            }
            let chol = Cholesky::new(sigma.clone())
                .ok_or_else(|| Error::InvalidSpec("covariance is not positive definite".into()))?;
            chol_factors.push(chol.l());
        }
        Ok(Self { weights, means, covariances, chol_factors })
    }

    /// Single isotropic component `N(mu, scale^2 I)`.
    pub fn isotropic(mean: Vector, scale: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![1.0], vec![mean], vec![Matrix::identity(d, d) * (scale * scale)])
    }

    pub fn standard_normal(d: usize) -> Result<Self> {
        Self::isotropic(Vector::zeros(d), 1.0)
    }

    /// Two-component task in two dimensions used as the default training
    /// problem: modes at `(+-1.5, 0)` with isotropic scale 0.15.
    pub fn default_task() -> Self {
        let sigma = Matrix::identity(2, 2) * 0.0225;
        Self::new(
            vec![0.5, 0.5],
            vec![Vector::from_row_slice(&[-1.5, 0.0]), Vector::from_row_slice(&[1.5, 0.0])],
            vec![sigma.clone(), sigma],
        )
        .expect("default task is valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix] {
        &self.covariances
    }

    pub fn marginal_mean(&self) -> Vector {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(Vector::zeros(self.dim()), |acc, (w, mu)| acc + mu * *w)
    }

    /// `Cov(x1)` of the mixture.
    pub fn marginal_covariance(&self) -> Matrix {
        let m = self.marginal_mean();
        let d = self.dim();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .fold(Matrix::zeros(d, d), |acc, (w, (mu, sigma))| {
                let dm = mu - &m;
                acc + (sigma + &dm * dm.transpose()) * *w
            })
    }

    /// Apply a permutation to the component order: new component `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.components() {
            return Err(Error::InvalidArgument("permutation length".into()));
        }
        Self::new(
            perm.iter().map(|&i| self.weights[i]).collect(),
            perm.iter().map(|&i| self.means[i].clone()).collect(),
            perm.iter().map(|&i| self.covariances[i].clone()).collect(),
        )
    }

    /// Draw `x1` from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let k = if self.components() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
        };
        let z = Vector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.means[k] + &self.chol_factors[k] * z
    }
}

/// Exact `E[x1 | xt]`, `Cov(x1 | xt)` and component responsibilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorOracle {
    pub mean: Vector,
    pub covariance: Matrix,
    pub responsibilities: Vec<f64>,
}

struct ComponentPosterior {
    log_weight: f64,
    mean: Vector,
    covariance: Matrix,
    /// `-C_k^{-1} (xt - t mu_k)`, the component's marginal score.
    score: Vector,
}

fn component_posteriors(spec: &GmmSpec, xt: &Vector, t: f64) -> Result<Vec<ComponentPosterior>> {
    let d = spec.dim();
    let noise_var = (1.0 - t).powi(2);
    let mut out = Vec::with_capacity(spec.components());
    for k in 0..spec.components() {
        let sigma = &spec.covariances[k];
        let mu = &spec.means[k];
        let marginal_cov = sigma * (t * t) + Matrix::identity(d, d) * noise_var;
        let chol = Cholesky::new(marginal_cov)
            .ok_or_else(|| Error::InvalidSpec("marginal covariance lost definiteness".into()))?;
        let resid = xt - mu * t;
        let solved = chol.solve(&resid);
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_density = -0.5 * (resid.dot(&solved) + log_det + d as f64 * LN_2PI);
        // Gain t Sigma C^{-1}; the posterior covariance is Sigma - t^2 Sigma C^{-1} Sigma.
        let sigma_c_inv_sigma = sigma * chol.solve(sigma);
        let mut covariance = sigma - sigma_c_inv_sigma * (t * t);
        covariance = (&covariance + covariance.transpose()) * 0.5;
        out.push(ComponentPosterior {
            log_weight: spec.weights[k].ln() + log_density,
            mean: mu + sigma * &solved * t,
            covariance,
            score: -solved,
        });
    }
    Ok(out)
}

fn responsibilities(parts: &[ComponentPosterior]) -> Result<Vec<f64>> {
    let max = parts.iter().map(|c| c.log_weight).fold(f64::NEG_INFINITY, f64::max);
    // Every component density underflows: no meaningful posterior.
    if !max.is_finite() || max < f64::MIN_POSITIVE.ln() {
        return Err(Error::NegligibleDensity);
    }
    let unnorm: Vec<f64> = parts.iter().map(|c| (c.log_weight - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

fn below_one(t: FlowTime) -> Result<f64> {
    if t.value() < 1.0 {
        Ok(t.value())
    } else {
        Err(Error::OpenInterval(t.value()))
    }
}

/// Exact posterior of `x1` given `xt` under the mixture prior.
///
/// Defined for `t` in `[0, 1)`; at `t = 0` it reduces to the prior moments.
pub fn gmm_posterior(spec: &GmmSpec, xt: &Vector, t: FlowTime) -> Result<PosteriorOracle> {
    let t = below_one(t)?;
    check_dim(xt, spec.dim())?;
    let parts = component_posteriors(spec, xt, t)?;
    let resp = responsibilities(&parts)?;
    let d = spec.dim();
    let mean = parts
        .iter()
        .zip(&resp)
        .fold(Vector::zeros(d), |acc, (c, r)| acc + &c.mean * *r);
    let covariance = parts.iter().zip(&resp).fold(Matrix::zeros(d, d), |acc, (c, r)| {
        let dm = &c.mean - &mean;
        acc + (&c.covariance + &dm * dm.transpose()) * *r
    });
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(PosteriorOracle { mean, covariance, responsibilities: resp })
}

/// `grad log p_t(xt)` of the interpolated marginal.
pub fn gmm_marginal_score(spec: &GmmSpec, xt: &Vector, t: FlowTime) -> Result<Vector> {
    let t = below_one(t)?;
    check_dim(xt, spec.dim())?;
    let parts = component_posteriors(spec, xt, t)?;
    let resp = responsibilities(&parts)?;
    Ok(parts
        .iter()
        .zip(&resp)
        .fold(Vector::zeros(spec.dim()), |acc, (c, r)| acc + &c.score * *r))
}

/// Population-optimal velocity `(E[x1 | xt] - xt) / (1 - t)`.
pub fn optimal_velocity(spec: &GmmSpec, xt: &Vector, t: FlowTime) -> Result<Vector> {
    let post = gmm_posterior(spec, xt, t)?;
    Ok((post.mean - xt) / (1.0 - t.value()))
}

/// Posterior of a single Gaussian `N(mu, Sigma)` in precision form:
/// `Cov = (Sigma^{-1} + t^2/(1-t)^2 I)^{-1}`,
/// `mean = Cov (Sigma^{-1} mu + t/(1-t)^2 xt)`.
///
/// Kept separate from [`gmm_posterior`] so the two algebraic routes can be
/// checked against each other.
pub fn single_gaussian_posterior(
    mu: &Vector,
    sigma: &Matrix,
    xt: &Vector,
    t: FlowTime,
) -> Result<(Vector, Matrix)> {
    let t = t.require_open()?.value();
    let d = mu.len();
    check_dim(xt, d)?;
    let sigma_inv = sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidSpec("singular covariance".into()))?;
    let noise_var = (1.0 - t).powi(2);
    let precision = &sigma_inv + Matrix::identity(d, d) * (t * t / noise_var);
    let cov = precision
        .try_inverse()
        .ok_or_else(|| Error::InvalidSpec("singular posterior precision".into()))?;
    let mean = &cov * (&sigma_inv * mu + xt * (t / noise_var));
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Jacobian of the optimal velocity for a single Gaussian component:
/// `(t Sigma (t^2 Sigma + (1-t)^2 I)^{-1} - I) / (1 - t)`; independent of `xt`.
pub fn single_gaussian_velocity_jacobian(sigma: &Matrix, t: FlowTime) -> Result<Matrix> {
    let t = below_one(t)?;
    let d = sigma.nrows();
    let eye = Matrix::identity(d, d);
    let marginal = sigma * (t * t) + &eye * (1.0 - t).powi(2);
    let inv = marginal
        .try_inverse()
        .ok_or_else(|| Error::InvalidSpec("singular marginal covariance".into()))?;
    Ok((sigma * &inv * t - eye) / (1.0 - t))
}

/// `(1-t)^2 / (t^2 + (1-t)^2)`: posterior variance per coordinate for a
/// standard normal data distribution.
pub fn standard_normal_posterior_variance(t: FlowTime) -> Result<f64> {
    let t = t.require_open()?.value();
    let s = (1.0 - t).powi(2);
    Ok(s / (t * t + s))
}

/// Draw `(x0, x1)` pairs with `x0 ~ N(0, I)` and `x1` from the mixture. The
/// two coordinates come from separate child streams of the seed.
pub struct PairSampler<'a> {
    spec: &'a GmmSpec,
    noise: rand_chacha::ChaCha8Rng,
    data: rand_chacha::ChaCha8Rng,
}

impl<'a> PairSampler<'a> {
    pub fn new(spec: &'a GmmSpec, rng: RngState) -> Self {
        Self { spec, noise: rng.split(0).rng(), data: rng.split(1).rng() }
    }

    pub fn next_pair(&mut self) -> (Vector, Vector) {
        let x0 = Vector::from_fn(self.spec.dim(), |_, _| StandardNormal.sample(&mut self.noise));
        let x1 = self.spec.sample(&mut self.data);
        (x0, x1)
    }
}

pub fn sample_pair(spec: &GmmSpec, rng: RngState) -> (Vector, Vector) {
    PairSampler::new(spec, rng).next_pair()
}

pub fn sample_pairs(spec: &GmmSpec, rng: RngState, n: usize) -> Vec<(Vector, Vector)> {
    let mut sampler = PairSampler::new(spec, rng);
    (0..n).map(|_| sampler.next_pair()).collect()
}

/// Self-normalized importance sampling estimate of the posterior, with the
/// mixture prior as proposal and `N(xt; t x1, (1-t)^2 I)` as weights.
#[derive(Debug, Clone)]
pub struct ImportanceEstimate {
    pub mean: Vector,
    pub covariance: Matrix,
    /// Delta-method standard errors of each entry.
    pub mean_se: Vector,
    pub covariance_se: Matrix,
    pub effective_sample_size: f64,
}

pub fn importance_posterior(
    spec: &GmmSpec,
    xt: &Vector,
    t: FlowTime,
    draws: usize,
    rng: RngState,
) -> Result<ImportanceEstimate> {
    let t = t.require_open()?.value();
    check_dim(xt, spec.dim())?;
    if draws < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let d = spec.dim();
    let mut gen = rng.rng();
    let samples: Vec<Vector> = (0..draws).map(|_| spec.sample(&mut gen)).collect();
    let noise_var = (1.0 - t).powi(2);
    let logw: Vec<f64> = samples
        .iter()
        .map(|x1| -0.5 * (xt - x1 * t).norm_squared() / noise_var)
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();

    let mean = samples.iter().zip(&w).fold(Vector::zeros(d), |acc, (x, wi)| acc + x * *wi);
    let mut covariance = Matrix::zeros(d, d);
    for (x, wi) in samples.iter().zip(&w) {
        let dx = x - &mean;
        covariance += &dx * dx.transpose() * *wi;
    }
    let mut mean_var = Vector::zeros(d);
    let mut cov_var = Matrix::zeros(d, d);
    for (x, wi) in samples.iter().zip(&w) {
        let dx = x - &mean;
        let w2 = wi * wi;
        mean_var += dx.map(|v| v * v) * w2;
        let outer = &dx * dx.transpose() - &covariance;
        cov_var += outer.map(|v| v * v) * w2;
    }
    Ok(ImportanceEstimate {
        mean,
        covariance,
        mean_se: mean_var.map(f64::sqrt),
        covariance_se: cov_var.map(f64::sqrt),
        effective_sample_size: ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_jvp, min_symmetric_eigenvalue, relative_frobenius};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ft(t: f64) -> FlowTime {
        FlowTime::new(t).unwrap()
    }

    fn three_component() -> GmmSpec {
        GmmSpec::new(
            vec![0.2, 0.5, 0.3],
            vec![
                Vector::from_row_slice(&[-1.0, 0.5]),
                Vector::from_row_slice(&[1.2, -0.3]),
                Vector::from_row_slice(&[0.0, 2.0]),
            ],
            vec![
                Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                Matrix::from_row_slice(2, 2, &[0.2, -0.05, -0.05, 0.4]),
                Matrix::identity(2, 2) * 0.25,
            ],
        )
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        let mu = vec![Vector::zeros(2)];
        assert!(GmmSpec::new(vec![0.9], mu.clone(), vec![Matrix::identity(2, 2)]).is_err());
        assert!(GmmSpec::new(vec![1.0], mu.clone(), vec![-Matrix::identity(2, 2)]).is_err());
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GmmSpec::new(vec![1.0], mu.clone(), vec![asym]).is_err());
        assert!(GmmSpec::new(vec![], vec![], vec![]).is_err());
        assert!(GmmSpec::new(vec![1.0], mu, vec![Matrix::identity(2, 2)]).is_ok());
    }

    #[test]
    fn standard_normal_closed_forms() {
        let spec = GmmSpec::standard_normal(1).unwrap();
        let xt = Vector::from_element(1, 0.37);
        let post = gmm_posterior(&spec, &xt, ft(0.5)).unwrap();
        assert_abs_diff_eq!(post.covariance[(0, 0)], 0.5, epsilon = 1e-14);
        let post = gmm_posterior(&spec, &xt, ft(0.75)).unwrap();
        assert_abs_diff_eq!(post.covariance[(0, 0)], 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(standard_normal_posterior_variance(ft(0.75)).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn small_t_recovers_marginal_covariance() {
        let spec = three_component();
        let post = gmm_posterior(&spec, &Vector::from_row_slice(&[0.3, -0.2]), ft(1e-6)).unwrap();
        let marginal = spec.marginal_covariance();
        assert!(relative_frobenius(&post.covariance, &marginal) < 1e-3);
    }

    #[test]
    fn endpoints_rejected() {
        let spec = GmmSpec::standard_normal(2).unwrap();
        let xt = Vector::zeros(2);
        assert!(matches!(gmm_posterior(&spec, &xt, ft(1.0)), Err(Error::OpenInterval(_))));
        let prior = gmm_posterior(&spec, &xt, ft(0.0)).unwrap();
        assert!((prior.mean - spec.marginal_mean()).amax() < 1e-12);
        assert!((prior.covariance - spec.marginal_covariance()).amax() < 1e-12);
        assert!(matches!(optimal_velocity(&spec, &xt, ft(1.0)), Err(Error::OpenInterval(_))));
    }

    #[test]
    fn negligible_density_is_an_error() {
        let spec = GmmSpec::isotropic(Vector::zeros(2), 0.01).unwrap();
        let far = Vector::from_row_slice(&[1e3, 1e3]);
        assert!(matches!(gmm_posterior(&spec, &far, ft(0.99)), Err(Error::NegligibleDensity)));
    }

    #[test]
    fn optimal_velocity_standard_normal() {
        let spec = GmmSpec::standard_normal(2).unwrap();
        let v = optimal_velocity(&spec, &Vector::from_row_slice(&[1.0, 0.0]), ft(0.5)).unwrap();
        assert_abs_diff_eq!(v.norm(), 0.0, epsilon = 1e-15);

        // K = 1 closed form: v = [t/(t^2 + (1-t)^2) - 1] x / (1-t).
        let t = 0.3;
        let x = Vector::from_row_slice(&[0.4, -1.7]);
        let v = optimal_velocity(&spec, &x, ft(t)).unwrap();
        let expected = &x * ((t / (t * t + (1.0 - t).powi(2)) - 1.0) / (1.0 - t));
        assert_abs_diff_eq!((v - expected).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn velocity_vanishes_at_posterior_mean_fixed_point() {
        // K = 1: mean(xt) = a xt + b with a = t/(t^2+(1-t)^2); fixed point xt = b/(1 - a).
        let spec = GmmSpec::isotropic(Vector::from_row_slice(&[0.5, 0.5]), 1.0).unwrap();
        let t = ft(0.4);
        let a = 0.4 / (0.16 + 0.36);
        let b = gmm_posterior(&spec, &Vector::zeros(2), t).unwrap().mean;
        let fixed = &b / (1.0 - a);
        let v = optimal_velocity(&spec, &fixed, t).unwrap();
        assert!(v.amax() < 1e-12, "{v}");
    }

    #[test]
    fn single_gaussian_jacobian_matches_fd() {
        let spec = GmmSpec::standard_normal(3).unwrap();
        for t in [0.2, 0.5, 0.8] {
            let t = ft(t);
            let jac = single_gaussian_velocity_jacobian(&Matrix::identity(3, 3), t).unwrap();
            let tv = t.value();
            let expected = (2.0 * tv - 1.0) / (tv * tv + (1.0 - tv).powi(2));
            assert_abs_diff_eq!((jac.clone() - Matrix::identity(3, 3) * expected).amax(), 0.0, epsilon = 1e-14);
            let x = Vector::from_row_slice(&[0.3, -0.8, 1.1]);
            for i in 0..3 {
                let e = Vector::from_fn(3, |j, _| if i == j { 1.0 } else { 0.0 });
                let col = finite_diff_jvp(|y: &Vector| optimal_velocity(&spec, y, t), &x, &e, 1e-5).unwrap();
                assert!((col - jac.column(i)).amax() < 1e-5);
            }
        }
    }

    #[test]
    fn precision_form_agrees_with_general_path() {
        let sigma = Matrix::from_row_slice(3, 3, &[0.6, 0.1, 0.0, 0.1, 0.9, -0.2, 0.0, -0.2, 0.4]);
        let mu = Vector::from_row_slice(&[0.3, -1.0, 2.0]);
        let spec = GmmSpec::new(vec![1.0], vec![mu.clone()], vec![sigma.clone()]).unwrap();
        let xt = Vector::from_row_slice(&[0.1, 0.2, 0.9]);
        for t in [0.1, 0.45, 0.9] {
            let post = gmm_posterior(&spec, &xt, ft(t)).unwrap();
            let (mean, cov) = single_gaussian_posterior(&mu, &sigma, &xt, ft(t)).unwrap();
            assert!((post.mean - mean).amax() < 1e-12);
            assert!((post.covariance - cov).amax() < 1e-12);
        }
    }

    #[test]
    fn marginal_score_matches_fd_of_log_density() {
        // K = 1: log p_t = log N(xt; t mu, C); score = -C^{-1}(xt - t mu).
        let spec = GmmSpec::isotropic(Vector::from_row_slice(&[1.0, -2.0]), 0.7).unwrap();
        let t = ft(0.6);
        let xt = Vector::from_row_slice(&[0.2, -0.5]);
        let score = gmm_marginal_score(&spec, &xt, t).unwrap();
        let c = 0.36 * 0.49 + 0.16;
        let expected = -(&xt - spec.means()[0].clone() * 0.6) / c;
        assert!((score - expected).amax() < 1e-12);
    }

    #[test]
    fn pair_sampling_statistics() {
        let spec = GmmSpec::isotropic(Vector::from_row_slice(&[3.0, 0.0]), 1.0).unwrap();
        let pairs = sample_pairs(&spec, RngState::new(17), 10_000);
        let n = pairs.len() as f64;
        let mean_x1 = pairs.iter().fold(Vector::zeros(2), |a, (_, x1)| a + x1) / n;
        assert!((mean_x1 - Vector::from_row_slice(&[3.0, 0.0])).amax() < 0.1);
        let mean_x0 = pairs.iter().fold(Vector::zeros(2), |a, (x0, _)| a + x0) / n;
        let cov_x0 = pairs.iter().fold(Matrix::zeros(2, 2), |a, (x0, _)| {
            let d = x0 - &mean_x0;
            a + &d * d.transpose()
        }) / n;
        assert!((cov_x0 - Matrix::identity(2, 2)).norm() < 0.1);
    }

    #[test]
    fn noise_stream_is_independent_of_data_stream() {
        let a = GmmSpec::isotropic(Vector::zeros(2), 1.0).unwrap();
        let b = GmmSpec::isotropic(Vector::from_row_slice(&[5.0, 5.0]), 0.1).unwrap();
        let pa = sample_pairs(&a, RngState::new(3), 20);
        let pb = sample_pairs(&b, RngState::new(3), 20);
        for ((x0a, _), (x0b, _)) in pa.iter().zip(&pb) {
            assert_eq!(x0a, x0b);
        }
    }

    #[test]
    fn importance_sampling_agrees_with_oracle() {
        let spec = three_component();
        let xt = Vector::from_row_slice(&[0.2, 0.4]);
        let t = ft(0.4);
        let post = gmm_posterior(&spec, &xt, t).unwrap();
        let is = importance_posterior(&spec, &xt, t, 100_000, RngState::new(8)).unwrap();
        for i in 0..2 {
            assert!((is.mean[i] - post.mean[i]).abs() <= 4.0 * is.mean_se[i]);
            for j in 0..2 {
                let diff = (is.covariance[(i, j)] - post.covariance[(i, j)]).abs();
                assert!(diff <= 4.0 * is.covariance_se[(i, j)], "{i}{j}: {diff}");
            }
        }
    }

    proptest! {
        #[test]
        fn posterior_is_psd_and_normalized(
            x in -3.0f64..3.0, y in -3.0f64..3.0, t in 0.05f64..0.95
        ) {
            let spec = three_component();
            let post = gmm_posterior(&spec, &Vector::from_row_slice(&[x, y]), ft(t)).unwrap();
            prop_assert!(min_symmetric_eigenvalue(&post.covariance) >= -1e-10);
            prop_assert!(is_symmetric(&post.covariance));
            prop_assert!((post.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn responsibilities_follow_permutation(
            x in -3.0f64..3.0, y in -3.0f64..3.0, t in 0.05f64..0.95
        ) {
            let spec = three_component();
            let perm = [2usize, 0, 1];
            let permuted = spec.permuted(&perm).unwrap();
            let xt = Vector::from_row_slice(&[x, y]);
            let a = gmm_posterior(&spec, &xt, ft(t)).unwrap();
            let b = gmm_posterior(&permuted, &xt, ft(t)).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((b.responsibilities[i] - a.responsibilities[p]).abs() < 1e-12);
            }
            prop_assert!((a.mean - b.mean).amax() < 1e-12);
        }
    }
}
