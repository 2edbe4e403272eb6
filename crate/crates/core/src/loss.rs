//! Population loss of the looped model.
//!
//! With `u = 0` the prediction error on an instance is `−w*^T M x_q` where
//! `M = (I − ΣA)^L` and `Σ = (1/n)XX^T`. Averaging over `x_q ~ N(0, Σ*)` and
//! `w* ~ N(0, Σ*^{-1})` leaves one matrix integrand per sampled `Σ`:
//!
//! `f(Σ) = tr(Σ*^{-1} M Σ* M^T)`   (`= ‖M‖_F²` when `Σ* = I`)
//!
//! A nonzero `u` adds `r^T Σ* r` with `r^T = Σ_{i<L} u^T ΣA (I − ΣA)^{L−1−i}`.
//! The trace-power integrand `tr((I − ΣA)^{2L})` is also provided; it agrees
//! with `f` when `A ∝ Σ*^{-1}` or `d = 1` and differs otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::matkernel::SymMatrix;
use crate::model::{compact_error, forward_looped, LoopedParams};
use crate::par::{mean_stderr, Exec};
use crate::tasks::{derive_seed, sample_covariance, sample_instance, substream, TaskDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Empirical,
    Closedform,
    ClosedformWithU,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub m: usize,
    pub kind: EstimatorKind,
    /// `(mean, stderr)` of the u-term alone, for [`EstimatorKind::ClosedformWithU`].
    pub u_term: Option<(f64, f64)>,
}

impl LossEstimate {
    fn from_samples(values: &[f64], kind: EstimatorKind) -> Self {
        let (mean, stderr) = mean_stderr(values);
        Self { mean, stderr, m: values.len(), kind, u_term: None }
    }
}

/// Monte-Carlo sample count and execution strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mc {
    pub m: usize,
    pub exec: Exec,
}

impl Mc {
    pub fn new(m: usize) -> Self {
        Self { m, exec: Exec::default() }
    }

    pub fn with_exec(self, exec: Exec) -> Self {
        Self { exec, ..self }
    }
}

/// Seed of the instance stream used by [`empirical_loss`].
pub fn instance_seed(dist: &TaskDistribution) -> u64 {
    derive_seed(dist.seed(), "instances")
}

/// Seed of the covariance stream shared by the closed-form estimators.
pub fn covariance_seed(dist: &TaskDistribution) -> u64 {
    derive_seed(dist.seed(), "covariances")
}

/// `Σ*` and `Σ*^{-1}`, or nothing for the isotropic case.
#[derive(Clone, Debug)]
pub enum Metric {
    Identity,
    General { star: DMatrix<f64>, inv: DMatrix<f64> },
}

impl Metric {
    pub fn of(dist: &TaskDistribution) -> Self {
        if dist.is_isotropic() {
            Metric::Identity
        } else {
            Metric::General {
                star: dist.sigma_star().as_matrix().clone(),
                inv: dist.sigma_star_inv().as_matrix().clone(),
            }
        }
    }

    fn quad(&self, v: &DVector<f64>) -> f64 {
        match self {
            Metric::Identity => v.norm_squared(),
            Metric::General { star, .. } => v.dot(&(star * v)),
        }
    }
}

/// `(I − ΣA)^k` for `k = 0..=top`.
fn residual_powers(sigma: &DMatrix<f64>, a: &DMatrix<f64>, top: usize) -> Vec<DMatrix<f64>> {
    let d = sigma.nrows();
    let step = DMatrix::identity(d, d) - sigma * a;
    let mut out = Vec::with_capacity(top + 1);
    out.push(DMatrix::identity(d, d));
    for k in 0..top {
        out.push(&out[k] * &step);
    }
    out
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// `tr(Σ*^{-1} M Σ* M^T)` with `M = (I − ΣA)^L`.
pub fn loss_integrand(sigma: &DMatrix<f64>, a: &DMatrix<f64>, loops: usize, metric: &Metric) -> f64 {
    let m = residual_powers(sigma, a, loops).pop().expect("non-empty");
    frob_metric(&m, metric)
}

fn frob_metric(m: &DMatrix<f64>, metric: &Metric) -> f64 {
    match metric {
        Metric::Identity => m.norm_squared(),
        Metric::General { star, inv } => (inv * m * star).component_mul(m).sum(),
    }
}

/// Integrand and its symmetric gradient in `A`.
///
/// The unconstrained gradient is `−2 Σ_k (P_{L−1−k} G P_k Σ)^T` with
/// `P_k = (I − ΣA)^k` and `G = Σ* M^T Σ*^{-1}`; the returned matrix is its
/// symmetric part.
pub fn loss_integrand_grad(
    sigma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    loops: usize,
    metric: &Metric,
) -> (f64, DMatrix<f64>) {
    let p = residual_powers(sigma, a, loops);
    let m = &p[loops];
    let value = frob_metric(m, metric);
    let g = match metric {
        Metric::Identity => m.transpose(),
        Metric::General { star, inv } => star * m.transpose() * inv,
    };
    let d = sigma.nrows();
    let mut acc = DMatrix::zeros(d, d);
    for k in 0..loops {
        acc += &p[loops - 1 - k] * &g * &p[k];
    }
    let grad = -(acc * sigma).transpose() * 2.0;
    (value, sym(grad))
}

/// `r^T Σ* r` with `r^T = Σ_{i<L} u^T ΣA (I − ΣA)^{L−1−i}`.
pub fn u_term_integrand(sigma: &DMatrix<f64>, a: &DMatrix<f64>, u: &DVector<f64>, loops: usize, metric: &Metric) -> f64 {
    let p = residual_powers(sigma, a, loops.saturating_sub(1));
    let left = (sigma * a).tr_mul(u);
    let mut r = DVector::zeros(u.len());
    for power in &p {
        r += power.tr_mul(&left);
    }
    metric.quad(&r)
}

/// `tr((I − ΣA)^{2L})`.
pub fn trace_power_integrand(sigma: &DMatrix<f64>, a: &DMatrix<f64>, loops: usize) -> f64 {
    residual_powers(sigma, a, 2 * loops).pop().expect("non-empty").trace()
}

/// `−L [Σ(I − AΣ)^{2L−1} + (I − ΣA)^{2L−1} Σ]`, the symmetric gradient of
/// [`trace_power_integrand`].
pub fn trace_power_grad(sigma: &DMatrix<f64>, a: &DMatrix<f64>, loops: usize) -> DMatrix<f64> {
    let q = residual_powers(sigma, a, 2 * loops - 1).pop().expect("non-empty");
    let right = &q * sigma;
    (right.transpose() + right) * -(loops as f64)
}

/// Mean of `(forward_looped(inst) − y_q)²` over `m` fresh instances.
pub fn empirical_loss(p: &LoopedParams, dist: &TaskDistribution, mc: Mc) -> LossEstimate {
    let seed = instance_seed(dist);
    let values = mc.exec.map(mc.m, |i| {
        let inst = sample_instance(dist, &mut substream(seed, i as u64));
        let e = forward_looped(&inst, p).expect("params match the distribution") - inst.y_q;
        e * e
    });
    LossEstimate::from_samples(&values, EstimatorKind::Empirical)
}

/// A fixed batch of sampled data covariances, for common-random-number
/// estimates of the closed-form loss and its gradient.
#[derive(Clone, Debug)]
pub struct CovarianceBatch {
    pub sigmas: Vec<DMatrix<f64>>,
    pub metric: Metric,
    pub exec: Exec,
}

impl CovarianceBatch {
    /// Draws covariance `i` from stream `(covariance_seed(dist), i)`.
    pub fn sample(dist: &TaskDistribution, mc: Mc) -> Self {
        let seed = covariance_seed(dist);
        let sigmas = mc.exec.map(mc.m, |i| sample_covariance(dist, &mut substream(seed, i as u64)));
        Self { sigmas, metric: Metric::of(dist), exec: mc.exec }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn loss(&self, a: &SymMatrix, loops: usize) -> LossEstimate {
        let values = self.exec.map_slice(&self.sigmas, |s| loss_integrand(s, a.as_matrix(), loops, &self.metric));
        LossEstimate::from_samples(&values, EstimatorKind::Closedform)
    }

    pub fn loss_with_u(&self, a: &SymMatrix, u: &DVector<f64>, loops: usize) -> LossEstimate {
        let pairs = self.exec.map_slice(&self.sigmas, |s| {
            let base = loss_integrand(s, a.as_matrix(), loops, &self.metric);
            (base, u_term_integrand(s, a.as_matrix(), u, loops, &self.metric))
        });
        let total: Vec<f64> = pairs.iter().map(|(b, t)| b + t).collect();
        let terms: Vec<f64> = pairs.iter().map(|(_, t)| *t).collect();
        let mut est = LossEstimate::from_samples(&total, EstimatorKind::ClosedformWithU);
        est.u_term = Some(mean_stderr(&terms));
        est
    }

    /// Loss estimate and the batch-mean symmetric gradient.
    pub fn loss_and_grad(&self, a: &SymMatrix, loops: usize) -> (LossEstimate, SymMatrix) {
        let per = self.exec.map_slice(&self.sigmas, |s| loss_integrand_grad(s, a.as_matrix(), loops, &self.metric));
        let values: Vec<f64> = per.iter().map(|(v, _)| *v).collect();
        let d = a.dim();
        let mut g = DMatrix::zeros(d, d);
        for (_, gi) in &per {
            g += gi;
        }
        g /= per.len() as f64;
        (LossEstimate::from_samples(&values, EstimatorKind::Closedform), SymMatrix::symmetrize(g))
    }

    pub fn trace_power_loss(&self, a: &SymMatrix, loops: usize) -> LossEstimate {
        let values = self.exec.map_slice(&self.sigmas, |s| trace_power_integrand(s, a.as_matrix(), loops));
        LossEstimate::from_samples(&values, EstimatorKind::Closedform)
    }
}

/// Closed-form loss `E_Σ f(Σ)` at `u = 0`, by Monte Carlo over `Σ`.
pub fn closedform_loss(a: &SymMatrix, loops: usize, dist: &TaskDistribution, mc: Mc) -> LossEstimate {
    CovarianceBatch::sample(dist, mc).loss(a, loops)
}

/// Closed-form loss including the u-term (reported separately).
pub fn closedform_loss_with_u(
    a: &SymMatrix,
    u: &DVector<f64>,
    loops: usize,
    dist: &TaskDistribution,
    mc: Mc,
) -> LossEstimate {
    CovarianceBatch::sample(dist, mc).loss_with_u(a, u, loops)
}

/// Symmetric gradient of [`closedform_loss`] in `A`, on the same covariance
/// samples that `closedform_loss` draws for this `(dist, mc)`.
pub fn grad_loss(a: &SymMatrix, loops: usize, dist: &TaskDistribution, mc: Mc) -> SymMatrix {
    CovarianceBatch::sample(dist, mc).loss_and_grad(a, loops).1
}

/// Squared error of the compact model, averaged over a batch of instances.
pub fn compact_loss(p: &LoopedParams, dist: &TaskDistribution, mc: Mc) -> LossEstimate {
    let seed = instance_seed(dist);
    let values = mc.exec.map(mc.m, |i| {
        let ci = crate::tasks::sample_compact(dist, &mut substream(seed, i as u64));
        compact_error(&ci, p).powi(2)
    });
    LossEstimate::from_samples(&values, EstimatorKind::Empirical)
}

/// Loss at one evaluation depth, with the paired stderr of the change from
/// the previous depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub loops: usize,
    pub mean: f64,
    pub stderr: f64,
    pub diff_mean: f64,
    pub diff_stderr: f64,
}

/// Evaluates the shared layer `(A, u)` at every depth `lo..=hi` on the same
/// instances; depth `l` is the `l`-th iterate of one recursion per instance.
pub fn loop_sweep(p: &LoopedParams, lo: usize, hi: usize, dist: &TaskDistribution, mc: Mc) -> Vec<SweepPoint> {
    let seed = instance_seed(dist);
    let per = mc.exec.map(mc.m, |i| {
        let ci = crate::tasks::sample_compact(dist, &mut substream(seed, i as u64));
        let mut v = ci.w_star.clone();
        let mut out = Vec::with_capacity(hi + 1 - lo);
        for t in 0..hi {
            let s = &ci.sigma * (&v + &p.u);
            v -= p.a.as_matrix() * s;
            if t + 1 >= lo {
                out.push(v.dot(&ci.x_q).powi(2));
            }
        }
        if lo == 0 {
            out.insert(0, ci.w_star.dot(&ci.x_q).powi(2));
        }
        out
    });
    (lo..=hi)
        .enumerate()
        .map(|(j, loops)| {
            let vals: Vec<f64> = per.iter().map(|r| r[j]).collect();
            let (mean, stderr) = mean_stderr(&vals);
            let (diff_mean, diff_stderr) = if j == 0 {
                (0.0, 0.0)
            } else {
                mean_stderr(&per.iter().map(|r| r[j] - r[j - 1]).collect::<Vec<_>>())
            };
            SweepPoint { loops, mean, stderr, diff_mean, diff_stderr }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matkernel::{random_orthogonal, random_symmetric, random_with_spectrum};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_sym_grad(f: impl Fn(&DMatrix<f64>) -> f64, a: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        // directional derivative along the symmetric basis, mapped back to
        // entries so that it compares with a symmetric gradient
        let d = a.nrows();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let mut e = DMatrix::zeros(d, d);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let dd = (f(&(a + &e * h)) - f(&(a - &e * h))) / (2.0 * h);
                if i == j {
                    g[(i, i)] = dd;
                } else {
                    g[(i, j)] = dd / 2.0;
                    g[(j, i)] = dd / 2.0;
                }
            }
        }
        g
    }

    fn spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let spectrum: Vec<f64> = (0..d).map(|i| 0.5 + 0.4 * i as f64).collect();
        random_with_spectrum(&spectrum, rng).into_matrix()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn zero_preconditioner_gives_dimension() {
        let dist = TaskDistribution::isotropic(3, 10, 1).unwrap();
        let est = closedform_loss(&SymMatrix::zeros(3), 2, &dist, Mc::new(50));
        assert_eq!(est.mean, 3.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn scalar_integrand_is_chi_square_variance() {
        // d = 1, A = 1, L = 1: (1 − s)² with s ~ χ²_n / n
        let dist = TaskDistribution::isotropic(1, 100, 3).unwrap();
        let est = closedform_loss(&SymMatrix::identity(1), 1, &dist, Mc::new(100_000));
        assert!((est.mean - 0.02).abs() <= 4.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn forms_agree_when_a_is_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = spd(3, &mut rng);
        let a = DMatrix::identity(3, 3) * 0.7;
        let f = loss_integrand(&sigma, &a, 2, &Metric::Identity);
        let t = trace_power_integrand(&sigma, &a, 2);
        assert!((f - t).abs() < 1e-12 * t.abs().max(1.0));
    }

    #[test]
    fn stationary_scalar_gradient() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(trace_power_grad(&one, &one, 1)[(0, 0)], 0.0);
        assert_eq!(loss_integrand_grad(&one, &one, 1, &Metric::Identity).1[(0, 0)], 0.0);
    }

    #[test]
    fn integrand_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let d = 1 + trial % 4;
            let loops = 1 + trial % 4;
            let sigma = spd(d, &mut rng);
            let a = random_symmetric(d, &mut rng).scale(0.4).into_matrix();
            let (_, g) = loss_integrand_grad(&sigma, &a, loops, &Metric::Identity);
            let fd = fd_sym_grad(|x| loss_integrand(&sigma, x, loops, &Metric::Identity), &a, 1e-5);
            assert!(rel_err(&g, &fd) <= 1e-5, "trial {trial}: {}\n{g}\n{fd}", rel_err(&g, &fd));
            let g2 = trace_power_grad(&sigma, &a, loops);
            let fd2 = fd_sym_grad(|x| trace_power_integrand(&sigma, x, loops), &a, 1e-5);
            assert!(rel_err(&g2, &fd2) <= 1e-5, "trial {trial}: {}", rel_err(&g2, &fd2));
        }
    }

    #[test]
    fn general_metric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let star = spd(3, &mut rng);
        let inv = star.clone().try_inverse().unwrap();
        let metric = Metric::General { star, inv };
        let sigma = spd(3, &mut rng);
        let a = random_symmetric(3, &mut rng).scale(0.3).into_matrix();
        let (_, g) = loss_integrand_grad(&sigma, &a, 3, &metric);
        let fd = fd_sym_grad(|x| loss_integrand(&sigma, x, 3, &metric), &a, 1e-5);
        assert!(rel_err(&g, &fd) <= 1e-5);
    }

    #[test]
    fn mc_gradient_matches_crn_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = TaskDistribution::isotropic(3, 20, 11).unwrap();
        let mc = Mc::new(2000);
        let a = random_symmetric(3, &mut rng).scale(0.3).add(&SymMatrix::identity(3).scale(0.5));
        let g = grad_loss(&a, 2, &dist, mc);
        let fd = fd_sym_grad(
            |x| closedform_loss(&SymMatrix::new(x.clone()).unwrap(), 2, &dist, mc).mean,
            a.as_matrix(),
            1e-5,
        );
        assert!(rel_err(g.as_matrix(), &fd) <= 1e-4);
    }

    #[test]
    fn sweep_matches_compact_loss() {
        let dist = TaskDistribution::isotropic(3, 15, 8).unwrap();
        let p = LoopedParams::new(SymMatrix::identity(3).scale(0.6), DVector::from_vec(vec![0.05, 0.0, -0.02]), 4).unwrap();
        let sweep = loop_sweep(&p, 2, 6, &dist, Mc::new(500));
        assert_eq!(sweep.len(), 5);
        for pt in &sweep {
            let direct = compact_loss(&p.with_loops(pt.loops).unwrap(), &dist, Mc::new(500));
            assert!((pt.mean - direct.mean).abs() <= 1e-12 * direct.mean.max(1.0));
        }
        assert!((sweep[3].diff_mean - (sweep[3].mean - sweep[2].mean)).abs() < 1e-12);
    }

    #[test]
    fn closedform_matches_empirical_anisotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let star = SymMatrix::from_diagonal(&[1.5, 1.0, 0.6]).unwrap();
        let dist = TaskDistribution::new(12, star, 21).unwrap();
        let a = random_with_spectrum(&[0.9, 0.5, 0.2], &mut rng);
        let p = LoopedParams::new(a.clone(), DVector::from_vec(vec![0.2, -0.1, 0.3]), 2).unwrap();
        let emp = empirical_loss(&p, &dist, Mc::new(40_000));
        let cf = closedform_loss_with_u(&a, &p.u, 2, &dist, Mc::new(40_000));
        assert!((emp.mean - cf.mean).abs() <= 4.0 * (emp.stderr + cf.stderr), "{emp:?} {cf:?}");
        let compact = compact_loss(&p, &dist, Mc::new(40_000));
        assert!((compact.mean - cf.mean).abs() <= 4.0 * (compact.stderr + cf.stderr));
    }

    #[test]
    fn u_term_positive_and_zero_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = TaskDistribution::isotropic(2, 10, 1).unwrap();
        let a = random_with_spectrum(&[1.0, 0.5], &mut rng);
        let zero = closedform_loss_with_u(&a, &DVector::zeros(2), 2, &dist, Mc::new(200));
        let base = closedform_loss(&a, 2, &dist, Mc::new(200));
        assert_eq!(zero.mean, base.mean);
        assert_eq!(zero.u_term.unwrap().0, 0.0);
        let with = closedform_loss_with_u(&a, &DVector::from_vec(vec![0.3, 0.1]), 2, &dist, Mc::new(200));
        assert!(with.u_term.unwrap().0 > 0.0);
    }

    #[test]
    fn estimates_are_deterministic_across_exec() {
        let dist = TaskDistribution::isotropic(2, 8, 9).unwrap();
        let p = LoopedParams::preconditioner(SymMatrix::identity(2).scale(0.5), 3).unwrap();
        let seq = empirical_loss(&p, &dist, Mc::new(500).with_exec(Exec::Sequential));
        let par = empirical_loss(&p, &dist, Mc::new(500).with_exec(Exec::Parallel));
        assert_eq!(seq.mean.to_bits(), par.mean.to_bits());
        assert_eq!(seq.stderr.to_bits(), par.stderr.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn loss_is_even_in_u(seed in any::<u64>(), loops in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = spd(3, &mut rng);
            let a = random_symmetric(3, &mut rng).scale(0.5).into_matrix();
            let u = DVector::from_fn(3, |i, _| 0.1 * (i as f64 + 1.0) * if seed % 2 == 0 { 1.0 } else { -1.0 });
            let plus = u_term_integrand(&sigma, &a, &u, loops, &Metric::Identity);
            let minus = u_term_integrand(&sigma, &a, &(-&u), loops, &Metric::Identity);
            prop_assert_eq!(plus, minus);
            prop_assert!(plus >= 0.0);
        }

        #[test]
        fn rotation_equivariance(seed in any::<u64>(), loops in 1usize..=3) {
            // x ↦ Rx maps Σ to RΣR^T
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = spd(3, &mut rng);
            let a = random_symmetric(3, &mut rng).scale(0.4).into_matrix();
            let r = random_orthogonal(3, &mut rng);
            let rotated_sigma = &r * &sigma * r.transpose();
            let rotated_a = &r * &a * r.transpose();
            let base = loss_integrand(&sigma, &a, loops, &Metric::Identity);
            let rot = loss_integrand(&rotated_sigma, &rotated_a, loops, &Metric::Identity);
            prop_assert!((base - rot).abs() <= 1e-10 * base.max(1.0));
        }

        #[test]
        fn integrands_non_negative(seed in any::<u64>(), loops in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = spd(2, &mut rng);
            let a = random_symmetric(2, &mut rng).into_matrix();
            prop_assert!(loss_integrand(&sigma, &a, loops, &Metric::Identity) >= 0.0);
        }
    }
}
