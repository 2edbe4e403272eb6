//! Verifiers for the minimizer characterization, the proximity bound and the
//! out-of-distribution bound, plus the shared `δ` bookkeeping.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{closedform_loss_with_u, Mc};
use crate::matkernel::{loewner_band, random_with_spectrum, SymMatrix};
use crate::model::{forward_looped, LoopedParams};
use crate::report::BoundReport;
use crate::tasks::{derive_seed, substream, RegressionInstance, TaskDistribution};

/// `δ = (8Ld/√n)^{1/(2L)}`.
pub fn delta(n: usize, d: usize, loops: usize) -> f64 {
    (8.0 * (loops * d) as f64 / (n as f64).sqrt()).powf(1.0 / (2 * loops) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaParams {
    pub n: usize,
    pub d: usize,
    pub loops: usize,
    pub delta: f64,
    /// `8δ d^{1/(2L)}`.
    pub c_opt: f64,
    /// `8Ld² 2^{2L} / √n`.
    pub loss_bound_opt: f64,
    /// `8Ld²/√n`, compared with `2^{−2L}`.
    pub condition_lhs: f64,
    pub condition_ok: bool,
}

pub fn delta_params(n: usize, d: usize, loops: usize) -> DeltaParams {
    let dl = delta(n, d, loops);
    let root_d = (d as f64).powf(1.0 / (2 * loops) as f64);
    let sqrt_n = (n as f64).sqrt();
    let lhs = 8.0 * (loops * d * d) as f64 / sqrt_n;
    DeltaParams {
        n,
        d,
        loops,
        delta: dl,
        c_opt: 8.0 * dl * root_d,
        loss_bound_opt: lhs * 4f64.powi(loops as i32),
        condition_lhs: lhs,
        condition_ok: lhs <= 0.25f64.powi(loops as i32),
    }
}

/// `d^{1/(2L)}`.
pub fn root_d(d: usize, loops: usize) -> f64 {
    (d as f64).powf(1.0 / (2 * loops) as f64)
}

/// Band `[lo, hi]` for `A` relative to `Σ*^{-1}` when `A` is within
/// `(1 ± outer)·A^opt` and `A^opt` within `(1 ± inner)·Σ*^{-1}`.
pub fn compose_band(inner: f64, outer: f64) -> (f64, f64) {
    let scale = 1.0 - outer;
    // a negative outer factor flips which inner edge bounds from below
    let lo = if scale >= 0.0 { scale * (1.0 - inner) } else { scale * (1.0 + inner) };
    (lo, (1.0 + inner) * (1.0 + outer))
}

/// `ε` for the proximity bound from a measured loss: `max((2·loss)^{1/(2L)}, 4δ)`.
pub fn proximity_epsilon(loss: f64, n: usize, d: usize, loops: usize) -> f64 {
    (2.0 * loss.max(0.0)).powf(1.0 / (2 * loops) as f64).max(4.0 * delta(n, d, loops))
}

/// `4 + 16 d^{1/(2L)}`.
pub fn proximity_constant(d: usize, loops: usize) -> f64 {
    4.0 + 16.0 * root_d(d, loops)
}

/// Half-width `8(1 + 4d^{1/(2L)}) ξ^{1/(2L)}` of the band reached by the flow.
pub fn flow_band_width(xi: f64, d: usize, loops: usize) -> f64 {
    8.0 * (1.0 + 4.0 * root_d(d, loops)) * xi.powf(1.0 / (2 * loops) as f64)
}

/// Checks the candidate against the loss bound, the `(1 ± c)Σ*^{-1}` band and
/// `‖u‖ ≤ u_tol`. The verdict is advisory unless `8Ld²/√n ≤ 2^{−2L}`.
pub fn verify_global_minimizer(
    a: &SymMatrix,
    u: &DVector<f64>,
    loops: usize,
    dist: &TaskDistribution,
    mc: Mc,
    u_tol: f64,
) -> Result<BoundReport> {
    let (d, n) = (dist.d(), dist.n());
    let dp = delta_params(n, d, loops);
    let mut report = BoundReport::new("global_minimizer")
        .param("d", d as f64)
        .param("n", n as f64)
        .param("L", loops as f64)
        .param("delta", dp.delta)
        .param("c", dp.c_opt);
    if let Err(e) = dist.require_overdetermined() {
        report.precondition_failed(e.to_string());
        return Ok(report);
    }
    report.strict = dp.condition_ok;
    if !dp.condition_ok {
        report.note(format!("8Ld²/√n = {:.4e} > 2^(-2L); verdict advisory", dp.condition_lhs));
    }
    let est = closedform_loss_with_u(a, u, loops, dist, mc);
    report.check("loss <= 8Ld^2 2^(2L)/sqrt(n) (+4 stderr)", est.mean, dp.loss_bound_opt + 4.0 * est.stderr);
    report.info("loss <= d (2 delta)^(2L)", est.mean, d as f64 * (2.0 * dp.delta).powi(2 * loops as i32));
    let band = loewner_band(a, dist.sigma_star_inv(), 1.0 - dp.c_opt, 1.0 + dp.c_opt)?;
    report.check("band margin >= 0", -band.margin, 0.0);
    report.check("|u| <= tol", u.norm(), u_tol);
    Ok(report)
}

/// Checks `(1 − cε)A^opt ≼ A ≼ (1 + cε)A^opt` with `A^opt` replaced by the
/// `(1 ± c_opt)Σ*^{-1}` band; `ε` comes from the loss upper confidence limit.
pub fn verify_proximity(a: &SymMatrix, loops: usize, dist: &TaskDistribution, mc: Mc) -> Result<BoundReport> {
    let est = closedform_loss_with_u(a, &DVector::zeros(a.dim()), loops, dist, mc);
    proximity_report(a, loops, dist, est.mean, est.stderr)
}

/// [`verify_proximity`] for an already measured loss.
pub fn proximity_report(a: &SymMatrix, loops: usize, dist: &TaskDistribution, loss: f64, stderr: f64) -> Result<BoundReport> {
    let (d, n) = (dist.d(), dist.n());
    let dp = delta_params(n, d, loops);
    let upper = loss + 4.0 * stderr;
    let eps = proximity_epsilon(upper, n, d, loops);
    let c = proximity_constant(d, loops);
    let (lo, hi) = compose_band(dp.c_opt, c * eps);
    let mut report = BoundReport::new("proximity")
        .param("d", d as f64)
        .param("n", n as f64)
        .param("L", loops as f64)
        .param("epsilon", eps)
        .param("c", c)
        .param("lo", lo)
        .param("hi", hi);
    if stderr > 0.25 * loss {
        report.inconclusive(format!("loss stderr {stderr:.3e} exceeds 25% of loss {loss:.3e}"));
    }
    report.info("loss (upper) <= epsilon^(2L)/2", upper, eps.powi(2 * loops as i32) / 2.0);
    let band = loewner_band(a, dist.sigma_star_inv(), lo, hi)?;
    report.check("band margin >= 0", -band.margin, 0.0);
    Ok(report)
}

/// Inputs of the out-of-distribution bound for one instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OodTerms {
    pub lhs: f64,
    pub rhs: f64,
    /// RHS with the weights `‖x_q‖²_{Σ*^{-1}} ‖w‖²_{Σ*}` the proof produces.
    pub rhs_proof: f64,
    pub sandwich_ok: bool,
}

/// Evaluates the out-of-distribution bound for `(A, u = 0, L)` on one instance
/// with `Σ^out = (1/n) X X^T`.
pub fn ood_terms(inst: &RegressionInstance, a: &SymMatrix, loops: usize, dist: &TaskDistribution, zeta: f64) -> Result<OodTerms> {
    let (d, n) = (dist.d(), dist.n());
    let sigma_out = SymMatrix::new(inst.covariance())?;
    let sandwich = loewner_band(&sigma_out, dist.sigma_star(), zeta, 2.0 - zeta)?;
    let p = LoopedParams::preconditioner(a.clone(), loops)?;
    let err = forward_looped(inst, &p)? - inst.y_q;
    let w = 1.0 + 16.0 * delta(n, d, loops) * root_d(d, loops);
    let factor = w * w * (w - zeta).powi(2 * loops as i32);
    let star = dist.sigma_star();
    let inv = dist.sigma_star_inv();
    Ok(OodTerms {
        lhs: err * err,
        rhs: factor * star.quad_form(&inst.x_q) * inv.quad_form(&inst.w_star),
        rhs_proof: factor * inv.quad_form(&inst.x_q) * star.quad_form(&inst.w_star),
        sandwich_ok: sandwich.inside,
    })
}

pub fn ood_check(inst: &RegressionInstance, a: &SymMatrix, loops: usize, dist: &TaskDistribution, zeta: f64) -> Result<BoundReport> {
    let mut report = BoundReport::new("ood")
        .param("d", dist.d() as f64)
        .param("n", dist.n() as f64)
        .param("L", loops as f64)
        .param("zeta", zeta);
    report.note("Sigma_out normalized by 1/n");
    if !(0.0 < zeta && zeta < 1.0) {
        report.precondition_failed(format!("zeta = {zeta} outside (0, 1)"));
        return Ok(report);
    }
    let t = ood_terms(inst, a, loops, dist, zeta)?;
    if !t.sandwich_ok {
        report.precondition_failed("zeta Sigma* <= Sigma_out <= (2 - zeta) Sigma* violated");
        return Ok(report);
    }
    report.check("(TF - y_q)^2 <= bound", t.lhs, t.rhs);
    report.info("(TF - y_q)^2 <= bound (proof weights)", t.lhs, t.rhs_proof);
    Ok(report)
}

/// Out-of-distribution task family: `Σ_out = Σ*^{1/2} R diag(s) R^T Σ*^{1/2}`
/// with `s` evenly spaced on `[lo, hi]` and a random rotation `R`.
pub fn ood_distribution(dist: &TaskDistribution, lo: f64, hi: f64, seed: u64) -> Result<TaskDistribution> {
    let d = dist.d();
    let spectrum: Vec<f64> = if d == 1 {
        vec![(lo + hi) / 2.0]
    } else {
        (0..d).map(|i| lo + (hi - lo) * i as f64 / (d - 1) as f64).collect()
    };
    let inner = random_with_spectrum(&spectrum, &mut substream(derive_seed(seed, "ood-rotation"), 0));
    let root = dist.sigma_star_sqrt().as_matrix();
    TaskDistribution::new(dist.n(), SymMatrix::new(root * inner.as_matrix() * root)?, derive_seed(seed, "ood-instances"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matkernel::random_with_spectrum;
    use crate::report::Verdict;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn delta_example() {
        let p = delta_params(1_000_000, 5, 2);
        assert!((p.delta - 0.08f64.powf(0.25)).abs() < 1e-12);
        assert!((p.delta - 0.53183).abs() < 1e-5);
        assert!((p.condition_lhs - 0.4).abs() < 1e-12);
        assert!(!p.condition_ok);
    }

    #[test]
    fn delta_scaling() {
        for loops in 1..=5 {
            let a = delta(10_000, 3, loops);
            let b = delta(40_000, 3, loops);
            assert!((b / a - 2f64.powf(-1.0 / (2 * loops) as f64)).abs() < 1e-12);
        }
        let mut prev = f64::INFINITY;
        for n in [10, 100, 1000, 10_000] {
            let d = delta(n, 2, 2);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn condition_consistent() {
        let p = delta_params(1usize << 30, 2, 1);
        assert_eq!(p.condition_ok, p.condition_lhs <= 0.25);
        assert!(p.condition_ok);
    }

    #[test]
    fn band_composition() {
        assert_eq!(compose_band(0.0, 0.0), (1.0, 1.0));
        let (lo, hi) = compose_band(0.1, 0.2);
        assert!((lo - 0.72).abs() < 1e-15 && (hi - 1.32).abs() < 1e-15);
        let (lo, _) = compose_band(1.5, 0.2);
        assert!((lo + 0.4).abs() < 1e-15);
        let (lo, _) = compose_band(0.1, 1.5);
        assert!((lo + 0.55).abs() < 1e-15);
    }

    #[test]
    fn band_monotone_in_epsilon() {
        let c = proximity_constant(3, 2);
        let mut prev = compose_band(0.3, 0.0);
        for i in 1..200 {
            let eps = i as f64 * 0.01;
            let cur = compose_band(0.3, c * eps);
            assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }

    #[test]
    fn proximity_example_width() {
        let c = proximity_constant(3, 2);
        assert!((c * 0.3 - (4.0 + 16.0 * 3f64.powf(0.25)) * 0.3).abs() < 1e-12);
    }

    #[test]
    fn optimum_scale_passes_global_band() {
        let dist = TaskDistribution::isotropic(2, 1 << 23, 1).unwrap();
        let r = verify_global_minimizer(&SymMatrix::identity(2), &DVector::zeros(2), 1, &dist, Mc::new(2000), 1e-2).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.strict);
        let twice = verify_global_minimizer(&SymMatrix::identity(2).scale(2.0), &DVector::zeros(2), 1, &dist, Mc::new(200), 1e-2)
            .unwrap();
        assert!(dist_c(&dist) < 1.0);
        assert_eq!(twice.verdict, Verdict::Fail);
    }

    fn dist_c(dist: &TaskDistribution) -> f64 {
        delta_params(dist.n(), dist.d(), 1).c_opt
    }

    #[test]
    fn proximity_at_centre() {
        let dist = TaskDistribution::isotropic(2, 1_000_000, 3).unwrap();
        let r = verify_proximity(&SymMatrix::identity(2), 2, &dist, Mc::new(2000)).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn ood_zero_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dist = TaskDistribution::isotropic(3, 10_000, 2).unwrap();
        let x = nalgebra::DMatrix::from_fn(3, 10_000, |_, _| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal));
        let inst = RegressionInstance::realizable(x, DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::zeros(3)).unwrap();
        let t = ood_terms(&inst, &SymMatrix::identity(3), 3, &dist, 0.5).unwrap();
        assert_eq!(t.lhs, 0.0);
        assert_eq!(t.rhs, 0.0);
    }

    #[test]
    fn ood_bound_on_shifted_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = TaskDistribution::isotropic(3, 10_000, 2).unwrap();
        let out_cov = random_with_spectrum(&[1.4, 1.0, 0.6], &mut rng);
        let out = TaskDistribution::new(10_000, out_cov, 9).unwrap();
        let mut checked = 0;
        for i in 0..20 {
            let r = ood_check(&out.instance(i), &SymMatrix::identity(3), 3, &dist, 0.5).unwrap();
            if r.verdict != Verdict::PreconditionFailed {
                assert!(r.passed(), "{r:?}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn ood_requires_sandwich() {
        let dist = TaskDistribution::isotropic(2, 1000, 2).unwrap();
        let out = TaskDistribution::new(1000, SymMatrix::from_diagonal(&[3.0, 1.0]).unwrap(), 1).unwrap();
        let r = ood_check(&out.instance(0), &SymMatrix::identity(2), 2, &dist, 0.5).unwrap();
        assert_eq!(r.verdict, Verdict::PreconditionFailed);
    }
}
