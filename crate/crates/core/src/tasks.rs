//! In-context linear regression tasks.
//!
//! A prompt holds `n` noiseless examples `y_i = w*·x_i` with
//! `x_i ~ N(0, Σ*)` and a task vector `w* ~ N(0, Σ*^{-1})`, plus a query
//! `x_q ~ N(0, Σ*)`.
//!
//! Randomness contract: sample `i` of stream `seed` is drawn from
//! `ChaCha8Rng::seed_from_u64(seed)` switched to stream `i`. ChaCha is
//! platform-stable, so the same `(seed, i)` gives the same instance everywhere
//! and parallel generation does not depend on the worker count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matkernel::{eig_sym, SymMatrix};

/// Conditioning limit of `XX^T` for [`solve_exact`].
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// RNG for sample `index` of stream `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives an independent stream seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer with the parent seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

#[derive(Clone, Debug)]
pub struct TaskDistribution {
    d: usize,
    n: usize,
    sigma_star: SymMatrix,
    seed: u64,
    sigma_sqrt: SymMatrix,
    sigma_inv: SymMatrix,
    sigma_inv_sqrt: SymMatrix,
    isotropic: bool,
}

impl TaskDistribution {
    pub fn new(n: usize, sigma_star: SymMatrix, seed: u64) -> Result<Self> {
        let d = sigma_star.dim();
        if d == 0 || n == 0 {
            return Err(LabError::InvalidParameter(format!("need d ≥ 1 and n ≥ 1 (d = {d}, n = {n})")));
        }
        let sigma_inv = sigma_star.inverse_pd()?;
        let sigma_sqrt = sigma_star.psd_sqrt()?;
        let sigma_inv_sqrt = sigma_inv.psd_sqrt()?;
        let isotropic = sigma_star == SymMatrix::identity(d);
        Ok(Self { d, n, sigma_star, seed, sigma_sqrt, sigma_inv, sigma_inv_sqrt, isotropic })
    }

    /// Σ* = I.
    pub fn isotropic(d: usize, n: usize, seed: u64) -> Result<Self> {
        Self::new(n, SymMatrix::identity(d), seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        Self::new(n, self.sigma_star.clone(), self.seed)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sigma_star(&self) -> &SymMatrix {
        &self.sigma_star
    }

    pub fn sigma_star_inv(&self) -> &SymMatrix {
        &self.sigma_inv
    }

    pub fn sigma_star_sqrt(&self) -> &SymMatrix {
        &self.sigma_sqrt
    }

    pub fn is_isotropic(&self) -> bool {
        self.isotropic
    }

    /// Theorem verifiers assume more examples than dimensions.
    pub fn require_overdetermined(&self) -> Result<()> {
        if self.n <= self.d {
            return Err(LabError::InvalidParameter(format!(
                "theorem checks need n > d (n = {}, d = {})",
                self.n, self.d
            )));
        }
        Ok(())
    }

    /// Instance `index` of this distribution's own stream.
    pub fn instance(&self, index: u64) -> RegressionInstance {
        sample_instance(self, &mut substream(self.seed, index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionInstance {
    /// d×n, one example per column.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_q: DVector<f64>,
    pub w_star: DVector<f64>,
    pub y_q: f64,
}

impl RegressionInstance {
    /// Builds a realizable instance, computing the labels from `w_star`.
    pub fn realizable(x: DMatrix<f64>, x_q: DVector<f64>, w_star: DVector<f64>) -> Result<Self> {
        if x.nrows() != w_star.len() || x_q.len() != w_star.len() {
            return Err(LabError::DimensionMismatch { expected: w_star.len(), got: x.nrows() });
        }
        let y = x.transpose() * &w_star;
        let y_q = w_star.dot(&x_q);
        Ok(Self { x, y, x_q, w_star, y_q })
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Data covariance `(1/n) X X^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.x * self.x.transpose() / self.n() as f64
    }

    pub fn to_doc(&self, seed: u64) -> InstanceDoc {
        InstanceDoc {
            d: self.d(),
            n: self.n(),
            x: self.x.transpose().as_slice().to_vec(),
            y: self.y.as_slice().to_vec(),
            x_q: self.x_q.as_slice().to_vec(),
            w_star: self.w_star.as_slice().to_vec(),
            y_q: self.y_q,
            seed,
        }
    }
}

/// JSON fixture layout of an instance; `X` is row-major d×n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "X")]
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub x_q: Vec<f64>,
    pub w_star: Vec<f64>,
    pub y_q: f64,
    pub seed: u64,
}

impl InstanceDoc {
    pub fn to_instance(&self) -> Result<RegressionInstance> {
        let (d, n) = (self.d, self.n);
        if self.x.len() != d * n {
            return Err(LabError::DimensionMismatch { expected: d * n, got: self.x.len() });
        }
        for (len, expected) in [(self.y.len(), n), (self.x_q.len(), d), (self.w_star.len(), d)] {
            if len != expected {
                return Err(LabError::DimensionMismatch { expected, got: len });
            }
        }
        Ok(RegressionInstance {
            x: DMatrix::from_row_slice(d, n, &self.x),
            y: DVector::from_column_slice(&self.y),
            x_q: DVector::from_column_slice(&self.x_q),
            w_star: DVector::from_column_slice(&self.w_star),
            y_q: self.y_q,
        })
    }
}

/// Draws X column by column, then `x_q`, then `w*`.
pub fn sample_instance<R: Rng + ?Sized>(dist: &TaskDistribution, rng: &mut R) -> RegressionInstance {
    let (d, n) = (dist.d, dist.n);
    let z = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let zq = gaussian_vector(d, rng);
    let zw = gaussian_vector(d, rng);
    let (x, x_q, w_star) = if dist.isotropic {
        (z, zq, zw)
    } else {
        let s = dist.sigma_sqrt.as_matrix();
        (s * z, s * zq, dist.sigma_inv_sqrt.as_matrix() * zw)
    };
    let y = x.transpose() * &w_star;
    let y_q = w_star.dot(&x_q);
    RegressionInstance { x, y, x_q, w_star, y_q }
}

/// Sample covariance `(1/n) XX^T` of `n` draws from `N(0, Σ*)`.
///
/// Uses the Bartlett decomposition of the Wishart matrix when `n ≥ d`
/// (O(d²) draws), and explicit samples otherwise.
pub fn sample_covariance<R: Rng + ?Sized>(dist: &TaskDistribution, rng: &mut R) -> DMatrix<f64> {
    if dist.n >= dist.d {
        sample_covariance_bartlett(dist, rng)
    } else {
        sample_covariance_direct(dist, rng)
    }
}

pub fn sample_covariance_direct<R: Rng + ?Sized>(dist: &TaskDistribution, rng: &mut R) -> DMatrix<f64> {
    let z = DMatrix::from_fn(dist.d, dist.n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = &z * z.transpose() / dist.n as f64;
    color(dist, w)
}

pub fn sample_covariance_bartlett<R: Rng + ?Sized>(dist: &TaskDistribution, rng: &mut R) -> DMatrix<f64> {
    let (d, n) = (dist.d, dist.n);
    assert!(n >= d, "Bartlett sampling needs n ≥ d");
    let mut t = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new((n - i) as f64).expect("positive degrees of freedom");
        t[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            t[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let w = &t * t.transpose() / n as f64;
    color(dist, w)
}

fn color(dist: &TaskDistribution, white: DMatrix<f64>) -> DMatrix<f64> {
    let m = if dist.isotropic {
        white
    } else {
        let s = dist.sigma_sqrt.as_matrix();
        s * white * s
    };
    let t = m.transpose();
    (m + t) * 0.5
}

/// The sufficient statistics of an instance for the looped model:
/// the prediction depends on X only through `XX^T` because `y = X^T w*`.
#[derive(Clone, Debug)]
pub struct CompactInstance {
    pub sigma: DMatrix<f64>,
    pub w_star: DVector<f64>,
    pub x_q: DVector<f64>,
}

impl CompactInstance {
    pub fn y_q(&self) -> f64 {
        self.w_star.dot(&self.x_q)
    }

    pub fn from_instance(inst: &RegressionInstance) -> Self {
        Self { sigma: inst.covariance(), w_star: inst.w_star.clone(), x_q: inst.x_q.clone() }
    }
}

pub fn sample_compact<R: Rng + ?Sized>(dist: &TaskDistribution, rng: &mut R) -> CompactInstance {
    let sigma = sample_covariance(dist, rng);
    let zq = gaussian_vector(dist.d, rng);
    let zw = gaussian_vector(dist.d, rng);
    let (x_q, w_star) = if dist.isotropic {
        (zq, zw)
    } else {
        (dist.sigma_sqrt.as_matrix() * zq, dist.sigma_inv_sqrt.as_matrix() * zw)
    };
    CompactInstance { sigma, w_star, x_q }
}

/// Least-squares solution `(XX^T)^{-1} X y`.
pub fn solve_exact(inst: &RegressionInstance) -> Result<DVector<f64>> {
    let gram = SymMatrix::symmetrize(&inst.x * inst.x.transpose());
    let e = eig_sym(&gram)?;
    let (max, min) = (e.max_eigenvalue(), e.min_eigenvalue());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(LabError::SingularGram { condition });
    }
    let xy = &inst.x * &inst.y;
    let chol = gram
        .into_matrix()
        .cholesky()
        .ok_or(LabError::SingularGram { condition })?;
    Ok(chol.solve(&xy))
}

/// Preconditioned gradient descent from `w_0 = 0`:
/// `w_{t+1} = w_t + (1/n) A X (y − X^T w_t)`. Returns `w_0..=w_steps`.
pub fn gd_oracle(inst: &RegressionInstance, a: &SymMatrix, steps: usize) -> Result<Vec<DVector<f64>>> {
    if a.dim() != inst.d() {
        return Err(LabError::DimensionMismatch { expected: inst.d(), got: a.dim() });
    }
    let n = inst.n() as f64;
    let mut iterates = Vec::with_capacity(steps + 1);
    let mut w = DVector::zeros(inst.d());
    iterates.push(w.clone());
    for _ in 0..steps {
        let residual = &inst.y - inst.x.transpose() * &w;
        w += a.as_matrix() * (&inst.x * residual) / n;
        iterates.push(w.clone());
    }
    Ok(iterates)
}
