//! Dense vectors and matrices, seeded randomness, Rademacher probes and the
//! Hutchinson estimators built on top of them.
//!
//! Everything that needs randomness takes an explicit [`RngState`]; there is
//! no global generator. Two states with the same `(seed, stream)` pair yield
//! the same draws on every platform (ChaCha8 is endian- and word-size
//! independent).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Seed plus stream id. Cheap to copy; call [`RngState::rng`] to get a fresh
/// generator positioned at the start of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derive an independent child stream. Children of distinct parents or with
    /// distinct ids land on distinct streams with overwhelming probability.
    pub fn split(&self, child: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(child.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A set of Rademacher sign vectors shared by the trace and diagonal
/// estimators at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    probes: Vec<Vector>,
    /// `None` for the exhaustive enumeration, which involves no randomness.
    seed: Option<RngState>,
}

impl ProbeSet {
    pub fn probes(&self) -> &[Vector] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.probes[0].len()
    }

    pub fn seed(&self) -> Option<RngState> {
        self.seed
    }

    /// All `2^d` sign vectors. Under full enumeration the off-diagonal
    /// contributions cancel and the estimators are exact.
    pub fn exhaustive(d: usize) -> Result<Self> {
        if d == 0 || d > 20 {
            return Err(Error::InvalidArgument(format!(
                "exhaustive probes need 1 <= d <= 20, got {d}"
            )));
        }
        let probes = (0..1usize << d)
            .map(|mask| {
                Vector::from_fn(d, |i, _| if mask >> i & 1 == 1 { -1.0 } else { 1.0 })
            })
            .collect();
        Ok(Self { probes, seed: None })
    }

    /// Build a probe set from explicit vectors, rejecting entries outside {-1, +1}.
    pub fn from_vectors(probes: Vec<Vector>) -> Result<Self> {
        let Some(first) = probes.first() else {
            return Err(Error::InvalidArgument("probe set must be non-empty".into()));
        };
        let d = first.len();
        for p in &probes {
            if p.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: p.len() });
            }
            if p.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::InvalidArgument("probe entries must be +-1".into()));
            }
        }
        Ok(Self { probes, seed: None })
    }
}

/// `count` independent Rademacher vectors of length `d`.
pub fn draw_rademacher(rng: RngState, d: usize, count: usize) -> Result<ProbeSet> {
    if d == 0 || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "rademacher probes need d >= 1 and S >= 1 (d = {d}, S = {count})"
        )));
    }
    let mut gen = rng.rng();
    let probes = (0..count)
        .map(|_| Vector::from_fn(d, |_, _| if gen.gen::<bool>() { 1.0 } else { -1.0 }))
        .collect();
    Ok(ProbeSet { probes, seed: Some(rng) })
}

pub fn ensure_finite(v: &Vector) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::FieldEvaluation)
    }
}

pub fn check_dim(v: &Vector, expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual: v.len() })
    }
}

/// Central-difference directional derivative `(f(x + h u) - f(x - h u)) / 2h`.
pub fn finite_diff_jvp<F>(mut f: F, x: &Vector, u: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    check_dim(u, x.len())?;
    let plus = f(&(x + u * h)).map_err(|_| Error::FieldEvaluation)?;
    let minus = f(&(x - u * h)).map_err(|_| Error::FieldEvaluation)?;
    ensure_finite(&plus)?;
    ensure_finite(&minus)?;
    if plus.len() != minus.len() {
        return Err(Error::DimensionMismatch { expected: plus.len(), actual: minus.len() });
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Joint trace and diagonal estimates from one pass over the probes.
#[derive(Debug, Clone, PartialEq)]
pub struct HutchinsonEstimate {
    pub diagonal: Vector,
    /// Sum of `diagonal`, so the two estimates agree exactly.
    pub trace: f64,
    /// Per-probe quadratic forms `eps^T J eps`, kept for variance diagnostics.
    pub samples: Vec<f64>,
}

/// Runs one JVP per probe and accumulates `eps_i (J eps)_i` per coordinate.
pub fn hutchinson<F>(mut jvp: F, probes: &ProbeSet) -> Result<HutchinsonEstimate>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let d = probes.dim();
    let mut acc = Vector::zeros(d);
    let mut samples = Vec::with_capacity(probes.len());
    for eps in probes.probes() {
        let j_eps = jvp(eps)?;
        check_dim(&j_eps, d)?;
        let prod = eps.component_mul(&j_eps);
        samples.push(prod.sum());
        acc += prod;
    }
    let diagonal = acc / probes.len() as f64;
    let trace = diagonal.sum();
    Ok(HutchinsonEstimate { diagonal, trace, samples })
}

/// `(1/S) sum_s eps_s^T J eps_s`.
pub fn hutchinson_trace<F>(jvp: F, probes: &ProbeSet) -> Result<f64>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    hutchinson(jvp, probes).map(|h| h.trace)
}

/// Per-coordinate `(1/S) sum_s eps_i (J eps)_i`.
pub fn hutchinson_diagonal<F>(jvp: F, probes: &ProbeSet) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    hutchinson(jvp, probes).map(|h| h.diagonal)
}

/// True when `max|A - A^T| <= 1e-9 * max|A|`.
pub fn is_symmetric(a: &Matrix) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax();
    let asym = (a - a.transpose()).amax();
    asym <= 1e-9 * scale
}

/// `||a - b||_F / ||b||_F`, falling back to the absolute error when `b` is zero.
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let denom = b.norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_symmetric_eigenvalue(a: &Matrix) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}
