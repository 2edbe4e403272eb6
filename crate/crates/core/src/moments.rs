//! Moments `E[Σ̂^k]` of a Gaussian sample covariance `Σ̂ = (1/n) Σ_i x_i x_i^T`.
//!
//! Entry `(r, c)` of `Σ̂^k` expands into a sum over index paths
//! `r = c_0, c_1, …, c_k = c` and sample indices `i_1..i_k` of products of
//! `2k` Gaussian scalars `x_{i_a, c_{a−1}} x_{i_a, c_a}`. By Isserlis'
//! theorem each expectation is a sum over the `(2k−1)!!` perfect pairings of
//! those scalars, where a pair contributes `Σ[c_s, c_t]` if both belong to
//! the same sample and zero otherwise. For a fixed pairing, the sample
//! indices it allows are exactly the assignments that are constant on each
//! connected component of the factor graph (factors joined by pairs), so the
//! sum over `i_1..i_k` contributes `n^{#components}` and never has to be
//! enumerated.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matkernel::{eig_sym, psd_sqrt, SymMatrix};
use crate::par::{mean_stderr, Exec};
use crate::report::BoundReport;
use crate::tasks::{sample_covariance_bartlett, substream, TaskDistribution};
use crate::theory::delta;

/// Largest dimension handled by [`moment_exact`].
pub const EXACT_MAX_DIM: usize = 3;
/// Largest power handled by [`moment_exact`].
pub const EXACT_MAX_POWER: usize = 4;

/// A perfect pairing of `2k` positions together with the number of
/// connected components it induces on the `k` factors.
#[derive(Clone, Debug)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
    pub components: u32,
}

/// All perfect pairings of `0..2k`.
pub fn pairings(k: usize) -> &'static [Pairing] {
    static CACHE: [OnceLock<Vec<Pairing>>; EXACT_MAX_POWER + 1] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    assert!((1..=EXACT_MAX_POWER).contains(&k), "pairings cached for 1 ≤ k ≤ {EXACT_MAX_POWER}");
    CACHE[k].get_or_init(|| enumerate_pairings(2 * k).into_iter().map(|p| with_components(p, k)).collect())
}

fn enumerate_pairings(size: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(free: &mut Vec<usize>, current: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if free.is_empty() {
            out.push(current.clone());
            return;
        }
        let first = free.remove(0);
        for idx in 0..free.len() {
            let partner = free.remove(idx);
            current.push((first, partner));
            rec(free, current, out);
            current.pop();
            free.insert(idx, partner);
        }
        free.insert(0, first);
    }
    let mut out = Vec::new();
    rec(&mut (0..size).collect(), &mut Vec::new(), &mut out);
    out
}

fn with_components(pairs: Vec<(usize, usize)>, k: usize) -> Pairing {
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(s, t) in &pairs {
        let (a, b) = (find(&mut parent, s / 2), find(&mut parent, t / 2));
        if a != b {
            parent[a] = b;
        }
    }
    let components = (0..k).filter(|&f| find(&mut parent, f) == f).count() as u32;
    Pairing { pairs, components }
}

/// `(2k − 1)!!`.
pub fn double_factorial_odd(k: usize) -> usize {
    (1..=k).map(|j| 2 * j - 1).product()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentResult {
    pub k: usize,
    pub n: usize,
    pub sigma: SymMatrix,
    pub moment: SymMatrix,
    /// Eigenvalues of `sigma`, descending.
    pub lambdas: Vec<f64>,
    /// `α_j = u_j^T · moment · u_j` in the eigenbasis of `sigma`.
    pub coeffs: Vec<f64>,
    pub coeff_stderr: Vec<f64>,
    /// Per-entry standard error (zero for exact results).
    pub stderr: Vec<f64>,
    pub exact: bool,
    /// Number of pairing terms evaluated (exact results only).
    pub pairing_terms: usize,
}

impl MomentResult {
    /// `‖moment·sigma − sigma·moment‖_F`.
    pub fn commutator_norm(&self) -> f64 {
        let (m, s) = (self.moment.as_matrix(), self.sigma.as_matrix());
        (m * s - s * m).norm()
    }
}

fn check_envelope(d: usize, k: usize) -> Result<()> {
    if d > EXACT_MAX_DIM || k > EXACT_MAX_POWER {
        return Err(LabError::Envelope(format!(
            "d = {d}, k = {k}; exact oracle supports d ≤ {EXACT_MAX_DIM}, k ≤ {EXACT_MAX_POWER}"
        )));
    }
    Ok(())
}

/// Exact `E[Σ̂^k]` by Wick pairing enumeration.
pub fn moment_exact(sigma: &SymMatrix, n: usize, k: usize) -> Result<MomentResult> {
    let d = sigma.dim();
    check_envelope(d, k)?;
    if n == 0 || k == 0 {
        return Err(LabError::InvalidParameter("moment_exact needs n ≥ 1 and k ≥ 1".into()));
    }
    let pairs = pairings(k);
    let s = sigma.as_matrix();
    let nf = n as f64;
    let weights: Vec<f64> = pairs.iter().map(|p| nf.powi(p.components as i32) / nf.powi(k as i32)).collect();
    let mut moment = DMatrix::zeros(d, d);
    let mut terms = 0usize;
    let mut path = vec![0usize; k + 1];
    let inner = d.pow(k as u32 - 1);
    for r in 0..d {
        for c in 0..d {
            let mut acc = 0.0;
            for code in 0..inner {
                path[0] = r;
                path[k] = c;
                let mut rest = code;
                for slot in path.iter_mut().take(k).skip(1) {
                    *slot = rest % d;
                    rest /= d;
                }
                // position 2a is coordinate c_a, position 2a+1 is c_{a+1}
                let coord = |pos: usize| path[pos / 2 + pos % 2];
                for (p, w) in pairs.iter().zip(&weights) {
                    let mut prod = *w;
                    for &(u, v) in &p.pairs {
                        prod *= s[(coord(u), coord(v))];
                    }
                    acc += prod;
                    terms += 1;
                }
            }
            moment[(r, c)] = acc;
        }
    }
    finish(sigma, n, k, moment, vec![0.0; d * d], None, true, terms)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    sigma: &SymMatrix,
    n: usize,
    k: usize,
    moment: DMatrix<f64>,
    stderr: Vec<f64>,
    coeff_stderr: Option<Vec<f64>>,
    exact: bool,
    pairing_terms: usize,
) -> Result<MomentResult> {
    let eig = eig_sym(sigma)?;
    let moment = SymMatrix::symmetrize(moment);
    let coeffs = eig.coefficients(moment.as_matrix());
    let d = sigma.dim();
    Ok(MomentResult {
        k,
        n,
        sigma: sigma.clone(),
        moment,
        lambdas: eig.eigenvalues.iter().copied().collect(),
        coeffs,
        coeff_stderr: coeff_stderr.unwrap_or_else(|| vec![0.0; d]),
        stderr,
        exact,
        pairing_terms,
    })
}

/// Draws `Σ̂` for covariance `sigma` (PSD allowed) from the Bartlett factor.
fn sample_hat<R: rand::Rng + ?Sized>(white: &TaskDistribution, root: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let w = sample_covariance_bartlett(white, rng);
    root * w * root
}

/// Monte-Carlo `E[Σ̂^k]` over `m` draws of stream `seed`.
pub fn moment_mc(sigma: &SymMatrix, n: usize, k: usize, m: usize, seed: u64, exec: Exec) -> Result<MomentResult> {
    if m < 100 {
        return Err(LabError::InvalidParameter("moment_mc needs m ≥ 100".into()));
    }
    let d = sigma.dim();
    if n < d {
        return Err(LabError::InvalidParameter("moment_mc samples through the Bartlett factor and needs n ≥ d".into()));
    }
    let white = TaskDistribution::isotropic(d, n, seed)?;
    let root = psd_sqrt(sigma)?.into_matrix();
    let eig = eig_sym(sigma)?;
    let draws = exec.map(m, |i| {
        let hat = sample_hat(&white, &root, &mut substream(seed, i as u64));
        let mut p = hat.clone();
        for _ in 1..k {
            p = &p * &hat;
        }
        SymMatrix::symmetrize(p).into_matrix()
    });
    mc_result(sigma, n, k, &draws, &eig.eigenvectors)
}

fn mc_result(sigma: &SymMatrix, n: usize, k: usize, draws: &[DMatrix<f64>], basis: &DMatrix<f64>) -> Result<MomentResult> {
    let d = sigma.dim();
    let mut mean = DMatrix::zeros(d, d);
    let mut stderr = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            let vals: Vec<f64> = draws.iter().map(|m| m[(r, c)]).collect();
            let (mu, se) = mean_stderr(&vals);
            mean[(r, c)] = mu;
            stderr[r * d + c] = se;
        }
    }
    let coeff_stderr = (0..d)
        .map(|j| {
            let u = basis.column(j);
            let vals: Vec<f64> = draws.iter().map(|m| u.dot(&(m * u))).collect();
            mean_stderr(&vals).1
        })
        .collect();
    finish(sigma, n, k, mean, stderr, Some(coeff_stderr), false, 0)
}

/// Moment oracle choice: exact inside the envelope, Monte Carlo outside.
#[derive(Clone, Copy, Debug)]
pub struct MomentOptions {
    pub m: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self { m: 100_000, seed: 0, exec: Exec::default() }
    }
}

pub fn moment(sigma: &SymMatrix, n: usize, k: usize, opts: MomentOptions) -> Result<MomentResult> {
    if sigma.dim() <= EXACT_MAX_DIM && k <= EXACT_MAX_POWER {
        moment_exact(sigma, n, k)
    } else {
        moment_mc(sigma, n, k, opts.m, opts.seed, opts.exec)
    }
}

/// Coefficient bound `|α_j − λ_j^k| ≤ (4kd/√n)·λ_1^k`, and `1 ≤ α_j ≤ 1 + 4kd/√n`
/// when `sigma = I`.
pub fn check_moment_bounds(sigma: &SymMatrix, n: usize, k: usize, opts: MomentOptions) -> Result<BoundReport> {
    let d = sigma.dim();
    let mut report = BoundReport::new("moment_control")
        .param("d", d as f64)
        .param("n", n as f64)
        .param("k", k as f64);
    if n < 4 * k * k * d * d {
        report.precondition_failed(format!("n = {n} < 4k²d² = {}", 4 * k * k * d * d));
        return Ok(report);
    }
    let res = moment(sigma, n, k, opts)?;
    let slack = 4.0 * (k * d) as f64 / (n as f64).sqrt();
    let top = res.lambdas[0].powi(k as i32);
    // the main-text δ with k = 2L
    let loops = k.div_ceil(2);
    let delta_main = delta(n, d, loops);
    for j in 0..d {
        let gap = (res.coeffs[j] - res.lambdas[j].powi(k as i32)).abs();
        let margin = 4.0 * res.coeff_stderr[j];
        report.check(format!("|alpha_{j} - lambda_{j}^k| <= 4kd/sqrt(n) lambda_1^k"), gap, slack * top + margin);
        report.info(format!("|alpha_{j} - lambda_{j}^k| <= delta^k lambda_1^k"), gap, delta_main.powi(k as i32) * top);
        report.info(format!("|alpha_{j} - lambda_{j}^k| <= delta lambda_1^k"), gap, delta_main * top);
    }
    let is_identity = (sigma.as_matrix() - DMatrix::identity(d, d)).norm() == 0.0;
    if is_identity {
        for j in 0..d {
            let margin = 4.0 * res.coeff_stderr[j];
            report.check(format!("1 <= alpha_{j}"), 1.0, res.coeffs[j] + margin);
            report.check(format!("alpha_{j} <= 1 + 4kd/sqrt(n)"), res.coeffs[j], 1.0 + slack + margin);
        }
    }
    if res.exact {
        report.check("commutator with sigma", res.commutator_norm(), 1e-8 * res.moment.frobenius_norm().max(1.0));
    } else {
        report.note("Monte-Carlo moments; slack inflated by 4 stderr");
    }
    Ok(report)
}

/// `E[(I − A^{1/2} Σ̂ A^{1/2})^k]` via the binomial expansion over moments of
/// the sample covariance of `N(0, A^{1/2} Σ* A^{1/2})`.
pub fn residual_moment(a: &SymMatrix, sigma_star: &SymMatrix, n: usize, k: usize, opts: MomentOptions) -> Result<(SymMatrix, SymMatrix, bool)> {
    let root = psd_sqrt(a)?;
    let b = SymMatrix::new(root.as_matrix() * sigma_star.as_matrix() * root.as_matrix())?;
    let d = b.dim();
    let mut acc = DMatrix::identity(d, d);
    let mut binom = 1.0;
    let mut exact = true;
    for j in 1..=k {
        binom *= (k + 1 - j) as f64 / j as f64;
        let mj = moment(&b, n, j, opts)?;
        exact &= mj.exact;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        acc += mj.moment.as_matrix() * (sign * binom);
    }
    Ok((SymMatrix::symmetrize(acc), b, exact))
}

/// Band `β_i ∈ (1 − λ_i)^k ± δ̄(λ_1 + 1)^k` with `δ̄ = 4kd/√n`, where `λ_i` are
/// the eigenvalues of `A^{1/2} Σ* A^{1/2}` and `β_i` the coefficients of the
/// residual moment in its eigenbasis.
pub fn check_eig_approx(a: &SymMatrix, sigma_star: &SymMatrix, n: usize, k: usize, opts: MomentOptions) -> Result<BoundReport> {
    let d = a.dim();
    let mut report = BoundReport::new("eig_approx")
        .param("d", d as f64)
        .param("n", n as f64)
        .param("k", k as f64);
    if n < 4 * k * k * d * d {
        report.precondition_failed(format!("n = {n} < 4k²d² = {}", 4 * k * k * d * d));
        return Ok(report);
    }
    let (res, b, exact) = residual_moment(a, sigma_star, n, k, opts)?;
    let eig = eig_sym(&b)?;
    let betas = eig.coefficients(res.as_matrix());
    let lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let dbar = 4.0 * (k * d) as f64 / (n as f64).sqrt();
    let half = dbar * (lambdas[0] + 1.0).powi(k as i32);
    for i in 0..d {
        let centre = (1.0 - lambdas[i]).powi(k as i32);
        report.check(format!("beta_{i} <= (1 - lambda_{i})^k + width"), betas[i], centre + half);
        report.check(format!("(1 - lambda_{i})^k - width <= beta_{i}"), centre - half, betas[i]);
        let flipped = (lambdas[i] - 1.0).powi(k as i32);
        report.info(format!("beta_{i} <= (lambda_{i} - 1)^k + width"), betas[i], flipped + half);
        report.info(format!("(lambda_{i} - 1)^k - width <= beta_{i}"), flipped - half, betas[i]);
    }
    if !exact {
        report.note("Monte-Carlo moments used outside the exact envelope");
    }
    Ok(report)
}

/// The literal multi-index expansion, for cross-checking [`moment_exact`] on
/// tiny `n`.
pub fn moment_bruteforce(sigma: &SymMatrix, n: usize, k: usize) -> DMatrix<f64> {
    let d = sigma.dim();
    let s = sigma.as_matrix();
    let pairs = pairings(k);
    let mut out = DMatrix::zeros(d, d);
    let mut path = vec![0usize; k + 1];
    let mut idx = vec![0usize; k];
    for r in 0..d {
        for c in 0..d {
            let mut acc = 0.0;
            for code in 0..d.pow(k as u32 - 1) {
                path[0] = r;
                path[k] = c;
                let mut rest = code;
                for slot in path.iter_mut().take(k).skip(1) {
                    *slot = rest % d;
                    rest /= d;
                }
                for mcode in 0..n.pow(k as u32) {
                    let mut rest = mcode;
                    for slot in idx.iter_mut() {
                        *slot = rest % n;
                        rest /= n;
                    }
                    for p in pairs {
                        let mut prod = 1.0;
                        for &(u, v) in &p.pairs {
                            if idx[u / 2] != idx[v / 2] {
                                prod = 0.0;
                                break;
                            }
                            prod *= s[(path[u / 2 + u % 2], path[v / 2 + v % 2])];
                        }
                        acc += prod;
                    }
                }
            }
            out[(r, c)] = acc / (n as f64).powi(k as i32);
        }
    }
    out
}

/// `E[(χ²_n / n)^k] = Π_{j<k} (n + 2j) / n`.
pub fn chi_square_moment(n: usize, k: usize) -> f64 {
    (0..k).map(|j| (n + 2 * j) as f64 / n as f64).product()
}

/// `((n+1)/n) Σ² + (tr Σ / n) Σ`.
pub fn wishart_second_moment(sigma: &SymMatrix, n: usize) -> DMatrix<f64> {
    let s = sigma.as_matrix();
    let nf = n as f64;
    s * s * ((nf + 1.0) / nf) + s * (sigma.trace() / nf)
}
