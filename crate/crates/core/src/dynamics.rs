//! Gradient flow on the closed-form loss, gradient-dominance scans, and
//! online training of looped and multilayer models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::loss::{closedform_loss, CovarianceBatch, Mc};
use crate::matkernel::{loewner_band, random_orthogonal, spectral_norm, SymMatrix};
use crate::model::{compact_error_grad, LayerParams, LayerParamsSeq, Layers, LoopedParams};
use crate::par::{mean_stderr, Exec};
use crate::report::{BoundReport, Verdict};
use crate::tasks::{derive_seed, sample_compact, substream, TaskDistribution};
use crate::theory::{compose_band, delta, delta_params, flow_band_width};

/// One row of a training or flow trace; also the CSV schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step_or_time: f64,
    pub loss: f64,
    pub loss_smoothed: f64,
    pub grad_norm: f64,
    pub spec_dist_to_identity: f64,
    pub u_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FlowTrace {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<(f64, SymMatrix)>,
    pub aborted: bool,
}

impl FlowTrace {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.step_or_time).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Row recorded exactly at time `t`.
    pub fn at(&self, t: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.step_or_time == t)
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `‖A Σ* − I‖₂`.
pub fn spec_dist(a: &DMatrix<f64>, sigma_star: &SymMatrix) -> f64 {
    let d = a.nrows();
    spectral_norm(&(a * sigma_star.as_matrix() - DMatrix::identity(d, d)))
}

/// Solution of `g' = −(1/16) g^{(2L−1)/L}`, `g(0) = f0`:
/// `g(t) = (f0^{−(L−1)/L} + (L−1)t/(16L))^{−L/(L−1)}` (`L ≥ 2`), and
/// `f0·e^{−t/16}` for `L = 1`.
pub fn comparison_bound(t: f64, f0: f64, loops: usize) -> f64 {
    let l = loops as f64;
    if loops == 1 {
        return f0 * (-t / 16.0).exp();
    }
    let q = (l - 1.0) / l;
    (f0.powf(-q) + (l - 1.0) * t / (16.0 * l)).powf(-1.0 / q)
}

/// `t* = (1/ξ)^{(L−1)/L} (16L/(L−1))^{(L−1)/(2L−1)}`; `None` for `L = 1`.
pub fn flow_time_bound(xi: f64, loops: usize) -> Option<f64> {
    if loops < 2 {
        return None;
    }
    let l = loops as f64;
    Some((1.0 / xi).powf((l - 1.0) / l) * (16.0 * l / (l - 1.0)).powf((l - 1.0) / (2.0 * l - 1.0)))
}

#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub loops: usize,
    pub dt0: f64,
    pub t_end: f64,
    /// Local error tolerance of the Heun/Euler pair, relative to `max(1, ‖A‖_F)`.
    pub tol: f64,
    pub m: usize,
    /// Times that must appear exactly in the trace.
    pub checkpoints: Vec<f64>,
    /// Ratio of the geometric recording grid.
    pub grid_ratio: f64,
    pub exec: Exec,
}

impl FlowConfig {
    pub fn new(loops: usize, t_end: f64, m: usize) -> Self {
        Self { loops, dt0: 0.01, t_end, tol: 1e-3, m, checkpoints: Vec::new(), grid_ratio: 1.25, exec: Exec::default() }
    }
}

fn stop_times(cfg: &FlowConfig) -> Vec<f64> {
    let mut stops = vec![cfg.t_end];
    let mut t = cfg.dt0;
    while t < cfg.t_end {
        stops.push(t);
        t *= cfg.grid_ratio;
    }
    stops.extend(cfg.checkpoints.iter().copied().filter(|&c| c > 0.0 && c <= cfg.t_end));
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    stops
}

/// Integrates `dA/dt = −∇L(A)` on a fixed covariance batch.
///
/// Heun steps with an embedded Euler error estimate; a step is accepted only
/// if the error is within tolerance and the batch loss strictly decreases,
/// otherwise the step is halved. Trace rows are written at the stop times
/// (geometric grid, checkpoints and `t_end`).
pub fn integrate_flow(a0: &SymMatrix, dist: &TaskDistribution, cfg: &FlowConfig) -> Result<FlowTrace> {
    if cfg.t_end <= 0.0 || cfg.dt0 <= 0.0 {
        return Err(LabError::InvalidParameter("flow needs t_end > 0 and dt0 > 0".into()));
    }
    let batch = CovarianceBatch::sample(dist, Mc { m: cfg.m, exec: cfg.exec });
    let row = |t: f64, a: &SymMatrix, loss: f64, g: &SymMatrix| TraceRow {
        step_or_time: t,
        loss,
        loss_smoothed: loss,
        grad_norm: g.frobenius_norm(),
        spec_dist_to_identity: spec_dist(a.as_matrix(), dist.sigma_star()),
        u_norm: 0.0,
    };
    let mut trace = FlowTrace::default();
    let mut a = a0.clone();
    let (est, mut g) = batch.loss_and_grad(&a, cfg.loops);
    let mut loss = est.mean;
    trace.rows.push(row(0.0, &a, loss, &g));
    trace.snapshots.push((0.0, a.clone()));
    let mut t = 0.0;
    let mut dt = cfg.dt0;
    let mut stationary = false;
    for stop in stop_times(cfg) {
        while t < stop {
            if stationary {
                t = stop;
                break;
            }
            let h = dt.min(stop - t);
            let euler = a.sub(&g.scale(h));
            let (_, g_e) = batch.loss_and_grad(&euler, cfg.loops);
            let heun = a.sub(&g.add(&g_e).scale(h / 2.0));
            let err = (heun.as_matrix() - euler.as_matrix()).norm();
            let scale = heun.frobenius_norm().max(1.0);
            if err > cfg.tol * scale {
                dt = h / 2.0;
            } else {
                let (est, g_h) = batch.loss_and_grad(&heun, cfg.loops);
                if est.mean < loss {
                    a = heun;
                    loss = est.mean;
                    g = g_h;
                    t = if h == stop - t { stop } else { t + h };
                    if err < 0.25 * cfg.tol * scale {
                        dt = h * 1.5;
                    } else {
                        dt = h;
                    }
                    if g.frobenius_norm() <= 1e-13 * loss.max(1e-300) {
                        stationary = true;
                    }
                    continue;
                }
                // no strict decrease: either converged to round-off or the step is too long
                if g.frobenius_norm().powi(2) * h <= 1e-14 * loss.abs() {
                    stationary = true;
                    continue;
                }
                dt = h / 2.0;
            }
            if dt < 1e-12 {
                trace.rows.push(row(t.max(f64::MIN_POSITIVE), &a, loss, &g));
                trace.aborted = true;
                return Err(LabError::Stalled { time: t, trace: Box::new(trace) });
            }
        }
        trace.rows.push(row(stop, &a, loss, &g));
        trace.snapshots.push((stop, a.clone()));
    }
    Ok(trace)
}

/// Runs the flow from `a0` to the largest `t*(ξ)` and reports, for each `ξ`,
/// the population loss at `t*` (independent estimate) and the end-state band
/// around `Σ*^{-1}`.
pub fn certify_flow(
    a0: &SymMatrix,
    dist: &TaskDistribution,
    loops: usize,
    xis: &[f64],
    flow_m: usize,
    eval: Mc,
) -> Result<(FlowTrace, Vec<BoundReport>)> {
    let times: Vec<f64> = xis
        .iter()
        .map(|&xi| flow_time_bound(xi, loops).ok_or_else(|| LabError::InvalidParameter("flow rate needs L ≥ 2".into())))
        .collect::<Result<_>>()?;
    let mut cfg = FlowConfig::new(loops, times.iter().copied().fold(0.0, f64::max), flow_m);
    cfg.checkpoints = times.clone();
    cfg.exec = eval.exec;
    let trace = integrate_flow(a0, dist, &cfg)?;
    let (d, n) = (dist.d(), dist.n());
    let dp = delta_params(n, d, loops);
    let eval_dist = dist.with_seed(derive_seed(dist.seed(), "flow-eval"));
    let f0 = trace.rows[0].loss;
    let max_rise = trace.rows.windows(2).map(|w| w[1].loss - w[0].loss).fold(f64::NEG_INFINITY, f64::max);
    let mut reports = Vec::new();
    for (&xi, &t) in xis.iter().zip(&times) {
        let a = &trace.snapshots.iter().find(|(s, _)| *s == t).expect("checkpoint recorded").1;
        let est = closedform_loss(a, loops, &eval_dist, eval);
        let mut r = BoundReport::new("gradient_flow")
            .param("d", d as f64)
            .param("n", n as f64)
            .param("L", loops as f64)
            .param("xi", xi)
            .param("t_star", t);
        let hypothesis = 2.0 * (4.0 * dp.delta).powi(2 * loops as i32);
        if xi < hypothesis {
            r.strict = false;
            r.note(format!("xi < 2(4 delta)^(2L) = {hypothesis:.4e}; rate checked without the hypothesis"));
        }
        r.check("L(A(t*)) + 4 stderr <= xi", est.mean + 4.0 * est.stderr, xi);
        let (lo, hi) = compose_band(dp.c_opt, flow_band_width(xi, d, loops));
        let band = loewner_band(a, dist.sigma_star_inv(), lo, hi)?;
        r.check("end-state band margin >= 0", -band.margin, 0.0);
        r.check("max loss increase along the trace <= 0", max_rise.max(0.0), 0.0);
        r.info("batch loss at t* <= comparison solution", trace.at(t).map_or(f64::NAN, |row| row.loss), comparison_bound(t, f0, loops));
        reports.push(r);
    }
    Ok((trace, reports))
}

/// Both dominance thresholds: `2(4δ)^{2L}` and `16Ld4^L/√n`.
pub fn dominance_thresholds(n: usize, d: usize, loops: usize) -> (f64, f64) {
    let dl = delta(n, d, loops);
    let appendix = 2.0 * (4.0 * dl).powi(2 * loops as i32);
    let main = 16.0 * (loops * d) as f64 * 4f64.powi(loops as i32) / (n as f64).sqrt();
    (appendix, main)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DominanceSample {
    pub loss: f64,
    pub loss_stderr: f64,
    pub grad_norm_sq: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DominanceReport {
    pub d: usize,
    pub n: usize,
    pub loops: usize,
    pub trials: usize,
    pub samples: Vec<DominanceSample>,
    pub threshold_appendix: f64,
    pub threshold_main: f64,
    pub threshold_used: f64,
    /// Samples dropped because their loss interval straddles the threshold.
    pub straddling: usize,
    pub min_ratio: f64,
    pub required_ratio: f64,
    pub min_samples: usize,
    pub verdict: Verdict,
}

impl DominanceReport {
    pub fn to_bound_report(&self) -> BoundReport {
        let mut r = BoundReport::new("gradient_dominance")
            .param("d", self.d as f64)
            .param("n", self.n as f64)
            .param("L", self.loops as f64)
            .param("threshold", self.threshold_used)
            .param("qualifying", self.samples.len() as f64)
            .param("straddling", self.straddling as f64);
        r.info("2(4 delta)^(2L) <= threshold", self.threshold_appendix, self.threshold_used);
        r.info("16 L d 4^L / sqrt(n) <= threshold", self.threshold_main, self.threshold_used);
        if self.samples.len() < self.min_samples {
            r.inconclusive(format!("{} qualifying samples, need {}", self.samples.len(), self.min_samples));
        } else {
            r.check("1/16 <= min |grad|^2 / loss^((2L-1)/L)", self.required_ratio, self.min_ratio);
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct DominanceConfig {
    pub trials: usize,
    pub m: usize,
    pub spectrum_lo: f64,
    pub spectrum_hi: f64,
    pub min_samples: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self { trials: 400, m: 2000, spectrum_lo: 0.05, spectrum_hi: 3.0, min_samples: 200, seed: 0, exec: Exec::default() }
    }
}

/// Random `A = V diag(λ) V^T` with `log λ` uniform on `[log lo, log hi]`.
pub fn random_log_spectrum<R: Rng + ?Sized>(d: usize, lo: f64, hi: f64, rng: &mut R) -> SymMatrix {
    let spectrum: Vec<f64> = (0..d).map(|_| (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp()).collect();
    let v = random_orthogonal(d, rng);
    SymMatrix::symmetrize(&v * DMatrix::from_diagonal(&DVector::from_vec(spectrum)) * v.transpose())
}

/// Checks `‖∇L‖² ≥ L^{(2L−1)/L}/16` on random preconditioners whose loss
/// interval (mean ± 4 stderr) lies entirely above the larger threshold.
pub fn scan_dominance(dist: &TaskDistribution, loops: usize, cfg: &DominanceConfig) -> DominanceReport {
    let (d, n) = (dist.d(), dist.n());
    let batch = CovarianceBatch::sample(dist, Mc { m: cfg.m, exec: cfg.exec });
    let (appendix, main) = dominance_thresholds(n, d, loops);
    let threshold = appendix.max(main);
    let power = (2 * loops - 1) as f64 / loops as f64;
    let seed = derive_seed(cfg.seed, "dominance");
    let mut samples = Vec::new();
    let mut straddling = 0;
    for i in 0..cfg.trials {
        let a = random_log_spectrum(d, cfg.spectrum_lo, cfg.spectrum_hi, &mut substream(seed, i as u64));
        let (est, g) = batch.loss_and_grad(&a, loops);
        let (lo, hi) = (est.mean - 4.0 * est.stderr, est.mean + 4.0 * est.stderr);
        if hi < threshold {
            continue;
        }
        if lo < threshold {
            straddling += 1;
            continue;
        }
        let gsq = g.frobenius_norm().powi(2);
        samples.push(DominanceSample { loss: est.mean, loss_stderr: est.stderr, grad_norm_sq: gsq, ratio: gsq / est.mean.powf(power) });
    }
    let min_ratio = samples.iter().map(|s| s.ratio).fold(f64::INFINITY, f64::min);
    let required = 1.0 / 16.0;
    let verdict = if samples.len() < cfg.min_samples {
        Verdict::Inconclusive
    } else if min_ratio >= required {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    DominanceReport {
        d,
        n,
        loops,
        trials: cfg.trials,
        samples,
        threshold_appendix: appendix,
        threshold_main: main,
        threshold_used: threshold,
        straddling,
        min_ratio,
        required_ratio: required,
        min_samples: cfg.min_samples,
        verdict,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to `lr·floor` over the run.
    Cosine,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub lr_floor: f64,
    /// EMA factor for `loss_smoothed`.
    pub ema: f64,
    pub record_every: usize,
    /// Abort when the smoothed loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Rescale the batch gradient to at most this global norm.
    pub clip: Option<f64>,
    pub seed: u64,
    pub exec: Exec,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            batch: 64,
            lr,
            optimizer: Optimizer::Adam,
            schedule: Schedule::Cosine,
            lr_floor: 0.01,
            ema: 0.99,
            record_every: 10,
            divergence_factor: 1e3,
            clip: None,
            seed,
            exec: Exec::default(),
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                self.lr * (self.lr_floor + (1.0 - self.lr_floor) * w)
            }
        }
    }
}

/// Trainable parameters: one shared layer or one per step.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Looped(LoopedParams),
    Multilayer(LayerParamsSeq),
}

impl Model {
    pub fn depth(&self) -> usize {
        match self {
            Model::Looped(p) => p.loops,
            Model::Multilayer(s) => s.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Looped(p) => p.d(),
            Model::Multilayer(s) => s.d(),
        }
    }

    fn blocks(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        match self {
            Model::Looped(p) => vec![(p.a.as_matrix().clone(), p.u.clone())],
            Model::Multilayer(s) => s.0.iter().map(|l| (l.a.as_matrix().clone(), l.u.clone())).collect(),
        }
    }

    fn with_blocks(&self, blocks: &[(DMatrix<f64>, DVector<f64>)]) -> Model {
        match self {
            Model::Looped(p) => Model::Looped(LoopedParams {
                a: SymMatrix::symmetrize(blocks[0].0.clone()),
                u: blocks[0].1.clone(),
                loops: p.loops,
            }),
            Model::Multilayer(_) => Model::Multilayer(LayerParamsSeq(
                blocks.iter().map(|(a, u)| LayerParams { a: SymMatrix::symmetrize(a.clone()), u: u.clone() }).collect(),
            )),
        }
    }

    /// Largest `‖A_t Σ* − I‖₂` and `‖u_t‖` over blocks.
    fn distances(&self, sigma_star: &SymMatrix) -> (f64, f64) {
        self.blocks()
            .iter()
            .map(|(a, u)| (spec_dist(a, sigma_star), u.norm()))
            .fold((0.0, 0.0), |acc, x| (acc.0.max(x.0), acc.1.max(x.1)))
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub trace: FlowTrace,
    pub model: Model,
}

type BlockGrads = Vec<(DMatrix<f64>, DVector<f64>)>;

/// Batch loss and gradient of the mean squared error, per parameter block.
fn batch_grad(model: &Model, dist: &TaskDistribution, seed: u64, first: u64, cfg: &TrainConfig) -> (Vec<f64>, BlockGrads) {
    match model {
        Model::Looped(p) => batch_grad_of(p, true, dist, seed, first, cfg),
        Model::Multilayer(s) => batch_grad_of(s, false, dist, seed, first, cfg),
    }
}

fn batch_grad_of<P: Layers + Sync>(
    layers: &P,
    looped: bool,
    dist: &TaskDistribution,
    seed: u64,
    first: u64,
    cfg: &TrainConfig,
) -> (Vec<f64>, BlockGrads) {
    let d = layers.dim();
    let nblocks = if looped { 1 } else { layers.depth() };
    let per = cfg.exec.map(cfg.batch, |j| {
        let ci = sample_compact(dist, &mut substream(seed, first + j as u64));
        let eg = compact_error_grad(&ci, layers);
        let mut blocks = vec![(DMatrix::zeros(d, d), DVector::zeros(d)); nblocks];
        for t in 0..eg.grad_a.len() {
            let b = if looped { 0 } else { t };
            blocks[b].0 += &eg.grad_a[t] * (2.0 * eg.error);
            blocks[b].1 += &eg.grad_u[t] * (2.0 * eg.error);
        }
        (eg.error * eg.error, blocks)
    });
    let mut grads = vec![(DMatrix::zeros(d, d), DVector::zeros(d)); nblocks];
    let mut losses = Vec::with_capacity(per.len());
    for (l, blocks) in &per {
        losses.push(*l);
        for (acc, b) in grads.iter_mut().zip(blocks) {
            acc.0 += &b.0;
            acc.1 += &b.1;
        }
    }
    let scale = 1.0 / per.len() as f64;
    for g in grads.iter_mut() {
        let sym = (&g.0 + g.0.transpose()) * (0.5 * scale);
        g.0 = sym;
        g.1 *= scale;
    }
    (losses, grads)
}

/// Online minibatch training on fresh instances; step `s` uses samples
/// `s·batch .. (s+1)·batch` of the training stream.
pub fn train_sgd(dist: &TaskDistribution, init: &Model, cfg: &TrainConfig) -> Result<TrainResult> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(LabError::InvalidParameter("training needs steps ≥ 1 and batch ≥ 1".into()));
    }
    if init.dim() != dist.d() {
        return Err(LabError::DimensionMismatch { expected: dist.d(), got: init.dim() });
    }
    let seed = derive_seed(cfg.seed, "train");
    let mut model = init.clone();
    let mut blocks = model.blocks();
    let zeros: Vec<(DMatrix<f64>, DVector<f64>)> =
        blocks.iter().map(|(a, u)| (DMatrix::zeros(a.nrows(), a.ncols()), DVector::zeros(u.len()))).collect();
    let (mut m1, mut m2) = (zeros.clone(), zeros);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut trace = FlowTrace::default();
    let mut smoothed = f64::NAN;
    let mut initial = f64::NAN;
    for step in 0..cfg.steps {
        let (losses, mut grads) = batch_grad(&model, dist, seed, (step * cfg.batch) as u64, cfg);
        let (loss, _) = mean_stderr(&losses);
        if step == 0 {
            smoothed = loss;
            initial = loss;
        } else {
            smoothed = cfg.ema * smoothed + (1.0 - cfg.ema) * loss;
        }
        let grad_norm = grads.iter().map(|(a, u)| a.norm_squared() + u.norm_squared()).sum::<f64>().sqrt();
        if let Some(c) = cfg.clip {
            if grad_norm > c {
                for (ga, gu) in grads.iter_mut() {
                    *ga *= c / grad_norm;
                    *gu *= c / grad_norm;
                }
            }
        }
        let diverged = !loss.is_finite() || smoothed > cfg.divergence_factor * initial;
        if step % cfg.record_every == 0 || step + 1 == cfg.steps || diverged {
            let (dist_i, u_norm) = model.distances(dist.sigma_star());
            trace.rows.push(TraceRow {
                step_or_time: step as f64,
                loss,
                loss_smoothed: smoothed,
                grad_norm,
                spec_dist_to_identity: dist_i,
                u_norm,
            });
        }
        if diverged {
            trace.aborted = true;
            break;
        }
        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        for (i, (ga, gu)) in grads.iter().enumerate() {
            match cfg.optimizer {
                Optimizer::Sgd => {
                    blocks[i].0 -= ga * lr;
                    blocks[i].1 -= gu * lr;
                }
                Optimizer::Adam => {
                    m1[i].0 = &m1[i].0 * b1 + ga * (1.0 - b1);
                    m1[i].1 = &m1[i].1 * b1 + gu * (1.0 - b1);
                    m2[i].0 = &m2[i].0 * b2 + ga.component_mul(ga) * (1.0 - b2);
                    m2[i].1 = &m2[i].1 * b2 + gu.component_mul(gu) * (1.0 - b2);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    blocks[i].0 -= (&m1[i].0 / c1).zip_map(&m2[i].0, |m, v| lr * m / ((v / c2).sqrt() + eps));
                    blocks[i].1 -= (&m1[i].1 / c1).zip_map(&m2[i].1, |m, v| lr * m / ((v / c2).sqrt() + eps));
                }
            }
        }
        model = model.with_blocks(&blocks);
        blocks = model.blocks();
    }
    Ok(TrainResult { trace, model })
}
