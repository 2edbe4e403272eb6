//! Experiment configs, run directories, and the CLI subcommands.
//!
//! Every run writes its artifacts into `<root>/<command>-<hash>`, where the
//! hash covers the command and the config (minus the output root), plus a
//! `manifest.json` from which the run can be repeated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acceptance;
use crate::dynamics::{
    certify_flow, random_log_spectrum, scan_dominance, train_sgd, DominanceConfig, Model, Optimizer, TrainConfig,
};
use crate::error::{LabError, Result};
use crate::loss::{closedform_loss, compact_loss, empirical_loss, grad_loss, loop_sweep, Mc};
use crate::matkernel::{random_with_spectrum, SymMatrix};
use crate::model::LoopedParams;
use crate::moments::{check_eig_approx, check_moment_bounds, moment, MomentOptions};
use crate::par::Exec;
use crate::report::{write_jsonl, BoundReport, Verdict};
use crate::tasks::{derive_seed, substream, TaskDistribution};
use crate::theory::{ood_check, ood_distribution, verify_global_minimizer, verify_proximity};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "LOOPED_ICL_OUT";

/// Population covariance of the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    Identity,
    Diagonal(Vec<f64>),
    /// Random SPD matrix with spectrum evenly spaced on `[0.5, 2]`.
    RandomSpd(u64),
}

impl SigmaSpec {
    /// `identity`, `diag:1,2,3` or `random:SEED`.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "identity" {
            return Ok(SigmaSpec::Identity);
        }
        if let Some(rest) = text.strip_prefix("diag:") {
            let values = rest
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| LabError::Config(format!("bad diagonal entry {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            return Ok(SigmaSpec::Diagonal(values));
        }
        if let Some(rest) = text.strip_prefix("random:") {
            let seed = rest.parse().map_err(|e| LabError::Config(format!("bad seed {rest:?}: {e}")))?;
            return Ok(SigmaSpec::RandomSpd(seed));
        }
        Err(LabError::Config(format!("unknown sigma spec {text:?}")))
    }

    pub fn build(&self, d: usize) -> Result<SymMatrix> {
        match self {
            SigmaSpec::Identity => Ok(SymMatrix::identity(d)),
            SigmaSpec::Diagonal(values) => {
                if values.len() != d {
                    return Err(LabError::Config(format!("diagonal has {} entries, d = {d}", values.len())));
                }
                SymMatrix::from_diagonal(values)
            }
            SigmaSpec::RandomSpd(seed) => {
                let spectrum: Vec<f64> =
                    (0..d).map(|i| if d == 1 { 1.0 } else { 0.5 + 1.5 * i as f64 / (d - 1) as f64 }).collect();
                Ok(random_with_spectrum(&spectrum, &mut substream(*seed, 0)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub d: usize,
    pub n: usize,
    #[serde(rename = "L")]
    pub loops: usize,
    pub sigma: SigmaSpec,
    pub m: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Loop counts swept by `train`; empty means `[L]`.
    pub sweep_loops: Vec<usize>,
    /// Context lengths swept by `train`; empty means `[n]`.
    pub sweep_n: Vec<usize>,
    /// Also train the per-layer baseline.
    pub multilayer: bool,
    pub train_loops: usize,
    pub eval_loops: usize,
    /// `loss` evaluates `A = a_scale Σ*^{-1}`.
    pub a_scale: f64,
    pub zeta: f64,
    pub xi: Vec<f64>,
    pub starts: usize,
    pub trials: usize,
    pub spectrum_hi: f64,
    pub k_max: usize,
    /// `verify` runs the full acceptance suite instead of the per-config checks.
    pub acceptance: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            d: 10,
            n: 20,
            loops: 5,
            sigma: SigmaSpec::Identity,
            m: 10_000,
            steps: 10_000,
            lr: 0.01,
            batch: 64,
            optimizer: Optimizer::Adam,
            seed: 0,
            out: None,
            sweep_loops: Vec::new(),
            sweep_n: Vec::new(),
            multilayer: false,
            train_loops: 5,
            eval_loops: 20,
            a_scale: 1.0,
            zeta: 0.5,
            xi: vec![0.1, 0.01],
            starts: 5,
            trials: 1000,
            spectrum_hi: 12.0,
            k_max: 4,
            acceptance: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if self.d == 0 || self.n == 0 || self.loops == 0 {
            return Err(LabError::Config("d, n and L must be at least 1".into()));
        }
        if self.m == 0 || self.steps == 0 || self.batch == 0 {
            return Err(LabError::Config("m, steps and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_loops < self.train_loops || self.train_loops == 0 {
            return Err(LabError::Config("need 1 <= train_loops <= eval_loops".into()));
        }
        if self.sweep_loops.contains(&0) || self.sweep_n.contains(&0) {
            return Err(LabError::Config("sweep entries must be at least 1".into()));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<TaskDistribution> {
        TaskDistribution::new(self.n, self.sigma.build(self.d)?, self.seed)
    }

    fn init_model(&self, d: usize, loops: usize, multilayer: bool) -> Result<Model> {
        let mut rng = substream(derive_seed(self.seed, "init"), 0);
        let u = DVector::from_fn(d, |_, _| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let p = LoopedParams::new(SymMatrix::identity(d).scale(0.1), u, loops)?;
        Ok(if multilayer { Model::Multilayer(p.expand()) } else { Model::Looped(p) })
    }

    fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.steps, self.lr, self.seed);
        t.batch = self.batch;
        t.optimizer = self.optimizer;
        t.record_every = (self.steps / 1000).max(1);
        t
    }
}

/// Reads a config file; a `manifest.json` is accepted too, yielding the
/// config it recorded.
pub fn load_config(path: &Path) -> Result<(Option<Command>, RunConfig)> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(manifest) = serde_json::from_str::<Manifest>(&text) {
        return Ok((Some(manifest.command), manifest.config));
    }
    serde_json::from_str::<RunConfig>(&text).map(|c| (None, c)).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Sample,
    Loss,
    Train,
    Flow,
    Dominance,
    Moments,
    Verify,
    Ood,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Loss => "loss",
            Command::Train => "train",
            Command::Flow => "flow",
            Command::Dominance => "dominance",
            Command::Moments => "moments",
            Command::Verify => "verify",
            Command::Ood => "ood",
        }
    }
}

/// Hex SHA-256 prefix of the command and config, ignoring the output root.
pub fn config_hash(command: Command, cfg: &RunConfig) -> String {
    let mut keyed = cfg.clone();
    keyed.out = None;
    let body = serde_json::to_vec(&(command, &keyed)).expect("config serializes");
    hex::encode(&Sha256::digest(&body)[..8])
}

pub fn run_dir(command: Command, cfg: &RunConfig) -> PathBuf {
    let root = cfg
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-{}", command.name(), config_hash(command, cfg)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: Command,
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    pub start_unix: f64,
    pub end_unix: f64,
    pub wall_time_secs: f64,
    pub artifacts: Vec<String>,
}

/// Result of one subcommand.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
    /// Asserted reports that failed with a strict verdict.
    pub failures: Vec<BoundReport>,
    pub summary: String,
}

struct Run {
    dir: PathBuf,
    artifacts: Vec<String>,
    reports: Vec<BoundReport>,
    summary: Vec<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(self.path(name), text + "\n")?;
        Ok(())
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Runs one subcommand with a validated config and writes its manifest.
pub fn run(command: Command, cfg: &RunConfig, exec: Exec) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = run_dir(command, cfg);
    std::fs::create_dir_all(&dir)?;
    let start_unix = unix_now();
    let clock = Instant::now();
    let mut r = Run { dir: dir.clone(), artifacts: Vec::new(), reports: Vec::new(), summary: Vec::new() };
    match command {
        Command::Sample => cmd_sample(cfg, &mut r)?,
        Command::Loss => cmd_loss(cfg, exec, &mut r)?,
        Command::Train => cmd_train(cfg, exec, &mut r)?,
        Command::Flow => cmd_flow(cfg, exec, &mut r)?,
        Command::Dominance => cmd_dominance(cfg, exec, &mut r)?,
        Command::Moments => cmd_moments(cfg, exec, &mut r)?,
        Command::Verify => cmd_verify(cfg, exec, &mut r)?,
        Command::Ood => cmd_ood(cfg, exec, &mut r)?,
    }
    if !r.reports.is_empty() {
        let path = r.path("reports.jsonl");
        write_jsonl(&path, &r.reports)?;
    }
    let failures: Vec<BoundReport> =
        r.reports.iter().filter(|rep| rep.verdict == Verdict::Fail && rep.strict).cloned().collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command,
        config: cfg.clone(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        start_unix,
        end_unix: unix_now(),
        wall_time_secs: clock.elapsed().as_secs_f64(),
        artifacts: r.artifacts.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunOutcome { dir, artifacts: r.artifacts, failures, summary: r.summary.join("\n") })
}

fn cmd_sample(cfg: &RunConfig, r: &mut Run) -> Result<()> {
    let dist = cfg.distribution()?;
    let path = r.path("instances.jsonl");
    let mut text = String::new();
    for i in 0..cfg.m {
        text.push_str(&serde_json::to_string(&dist.instance(i as u64).to_doc(cfg.seed))?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    r.summary.push(format!("{} instances (d = {}, n = {})", cfg.m, cfg.d, cfg.n));
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    estimator: &'static str,
    mean: f64,
    stderr: f64,
    m: usize,
}

fn cmd_loss(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    let dist = cfg.distribution()?;
    let a = dist.sigma_star_inv().scale(cfg.a_scale);
    let p = LoopedParams::preconditioner(a.clone(), cfg.loops)?;
    let mc = Mc::new(cfg.m).with_exec(exec);
    let mut rows = Vec::new();
    for (name, est) in [
        ("empirical", empirical_loss(&p, &dist, mc)),
        ("compact", compact_loss(&p, &dist, mc)),
        ("closedform", closedform_loss(&a, cfg.loops, &dist, mc)),
    ] {
        r.summary.push(format!("{name:<10} {:.6e} ± {:.2e}", est.mean, est.stderr));
        rows.push(LossRow { estimator: name, mean: est.mean, stderr: est.stderr, m: est.m });
    }
    r.csv("loss.csv", &rows)?;
    r.json("gradient.json", &grad_loss(&a, cfg.loops, &dist, mc))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct TrainSummaryRow {
    model: &'static str,
    n: usize,
    loops: usize,
    steps: usize,
    final_loss: f64,
    final_stderr: f64,
    spec_dist_to_identity: f64,
    u_norm: f64,
    aborted: bool,
}

fn cmd_train(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    let ns = if cfg.sweep_n.is_empty() { vec![cfg.n] } else { cfg.sweep_n.clone() };
    let ls = if cfg.sweep_loops.is_empty() { vec![cfg.loops] } else { cfg.sweep_loops.clone() };
    let mut kinds = vec![false];
    if cfg.multilayer {
        kinds.push(true);
    }
    let mut rows = Vec::new();
    for &n in &ns {
        let dist = TaskDistribution::new(n, cfg.sigma.build(cfg.d)?, cfg.seed)?;
        let eval_dist = dist.with_seed(derive_seed(cfg.seed, "eval"));
        for &loops in &ls {
            for &multi in &kinds {
                let label = if multi { "multilayer" } else { "looped" };
                let init = cfg.init_model(cfg.d, loops, multi)?;
                let mut tc = cfg.train_config();
                tc.exec = exec;
                let res = train_sgd(&dist, &init, &tc)?;
                let trace_path = r.path(&format!("trace_n{n}_L{loops}_{label}.csv"));
                res.trace.write_csv(&trace_path)?;
                let last = res.trace.last().expect("non-empty trace").clone();
                let (final_loss, final_stderr) = match &res.model {
                    Model::Looped(p) => {
                        r.json(&format!("params_n{n}_L{loops}.json"), p)?;
                        let est = compact_loss(p, &eval_dist, Mc::new(cfg.m).with_exec(exec));
                        (est.mean, est.stderr)
                    }
                    Model::Multilayer(_) => (last.loss_smoothed, f64::NAN),
                };
                r.summary.push(format!(
                    "{label:<10} n = {n:<4} L = {loops:<3} loss {final_loss:.4e}  |A - I| {:.4}  |u| {:.2e}{}",
                    last.spec_dist_to_identity,
                    last.u_norm,
                    if res.trace.aborted { "  (diverged)" } else { "" }
                ));
                rows.push(TrainSummaryRow {
                    model: label,
                    n,
                    loops,
                    steps: cfg.steps,
                    final_loss,
                    final_stderr,
                    spec_dist_to_identity: last.spec_dist_to_identity,
                    u_norm: last.u_norm,
                    aborted: res.trace.aborted,
                });
            }
        }
    }
    r.csv("summary.csv", &rows)
}

fn flow_reports(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<Vec<BoundReport>> {
    let dist = cfg.distribution()?;
    let seed = derive_seed(cfg.seed, "flow-starts");
    let mut out = Vec::new();
    for s in 0..cfg.starts {
        let a0 = random_log_spectrum(cfg.d, 0.05, 3.0, &mut substream(seed, s as u64));
        let (trace, mut reports) = certify_flow(&a0, &dist, cfg.loops, &cfg.xi, 2000, Mc::new(cfg.m).with_exec(exec))?;
        let path = r.path(&format!("flow_start{s}.csv"));
        trace.write_csv(&path)?;
        for rep in &mut reports {
            rep.set_param("start", s as f64);
        }
        out.extend(reports);
    }
    Ok(out)
}

fn cmd_flow(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    let reports = flow_reports(cfg, exec, r)?;
    r.summary.push(summary_table(&reports));
    r.csv("summary.csv", &summary_rows(&reports))?;
    r.reports.extend(reports);
    Ok(())
}

fn dominance_report(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<BoundReport> {
    let dist = cfg.distribution()?;
    let dc = DominanceConfig {
        trials: cfg.trials,
        m: cfg.m.min(5000),
        spectrum_hi: cfg.spectrum_hi,
        seed: cfg.seed,
        exec,
        ..Default::default()
    };
    let scan = scan_dominance(&dist, cfg.loops, &dc);
    r.csv("dominance.csv", &scan.samples)?;
    Ok(scan.to_bound_report())
}

fn cmd_dominance(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    let rep = dominance_report(cfg, exec, r)?;
    r.summary.push(summary_table(std::slice::from_ref(&rep)));
    r.reports.push(rep);
    Ok(())
}

#[derive(Serialize)]
struct MomentRow {
    k: usize,
    j: usize,
    lambda: f64,
    coeff: f64,
    coeff_stderr: f64,
    exact: bool,
}

fn moment_reports(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<Vec<BoundReport>> {
    let dist = cfg.distribution()?;
    let opts = MomentOptions { m: cfg.m.max(100), seed: cfg.seed, exec };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for k in 1..=cfg.k_max {
        let res = moment(dist.sigma_star(), cfg.n, k, opts)?;
        for (j, (&lambda, &coeff)) in res.lambdas.iter().zip(&res.coeffs).enumerate() {
            rows.push(MomentRow { k, j, lambda, coeff, coeff_stderr: res.coeff_stderr[j], exact: res.exact });
        }
        reports.push(check_moment_bounds(dist.sigma_star(), cfg.n, k, opts)?);
        reports.push(check_eig_approx(dist.sigma_star_inv(), dist.sigma_star(), cfg.n, k, opts)?);
    }
    r.csv("moments.csv", &rows)?;
    Ok(reports)
}

fn cmd_moments(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    let reports = moment_reports(cfg, exec, r)?;
    r.summary.push(summary_table(&reports));
    r.csv("summary.csv", &summary_rows(&reports))?;
    r.reports.extend(reports);
    Ok(())
}

fn ood_bound_reports(cfg: &RunConfig, a: &SymMatrix, loops: usize, count: usize) -> Result<Vec<BoundReport>> {
    let dist = cfg.distribution()?;
    let ood = ood_distribution(&dist, 0.6, 1.4, cfg.seed)?;
    let mut out = Vec::new();
    let mut i = 0u64;
    while out.len() < count && i < 10 * count as u64 {
        let rep = ood_check(&ood.instance(i), a, loops, &dist, cfg.zeta)?;
        i += 1;
        if rep.verdict != Verdict::PreconditionFailed {
            out.push(rep.param("instance", (i - 1) as f64));
        }
    }
    Ok(out)
}

fn cmd_verify(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    if cfg.acceptance {
        let scratch = r.dir.join("scratch");
        let results = acceptance::run_all(&scratch, exec);
        let _ = std::fs::remove_dir_all(&scratch);
        for c in &results {
            r.summary.push(c.line());
            let mut rep = BoundReport::new(format!("criterion_{}", c.id));
            rep.check(c.title, if c.passed { 0.0 } else { 1.0 }, 0.0);
            rep.note(c.detail.clone());
            r.reports.push(rep);
        }
        r.csv("acceptance.csv", &results)?;
        return Ok(());
    }
    let dist = cfg.distribution()?;
    let mc = Mc::new(cfg.m).with_exec(exec);
    let star_inv = dist.sigma_star_inv().clone();
    let mut reports = vec![
        verify_global_minimizer(&star_inv, &DVector::zeros(cfg.d), cfg.loops, &dist, mc, 1e-2)?,
        verify_proximity(&star_inv, cfg.loops, &dist, mc)?,
    ];
    reports.extend(moment_reports(cfg, exec, r)?);
    if cfg.loops >= 2 {
        reports.push(dominance_report(cfg, exec, r)?);
        reports.extend(flow_reports(cfg, exec, r)?);
    }
    let ood = ood_bound_reports(cfg, &star_inv, cfg.loops, 100)?;
    let ood_failed = ood.iter().filter(|rep| !rep.passed()).count();
    let mut agg = BoundReport::new("ood").param("instances", ood.len() as f64).param("zeta", cfg.zeta);
    agg.check("failing instances", ood_failed as f64, 0.0);
    if ood.is_empty() {
        agg.inconclusive("no instance satisfied the sandwich condition");
    }
    reports.push(agg);
    r.summary.push(summary_table(&reports));
    r.csv("summary.csv", &summary_rows(&reports))?;
    r.reports.extend(reports);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    set: &'static str,
    loops: usize,
    mean: f64,
    stderr: f64,
    diff_mean: f64,
    diff_stderr: f64,
}

pub type NamedSweep = (String, Vec<crate::loss::SweepPoint>);

/// Trains at `train_loops` and evaluates the shared layer at every depth up to
/// `eval_loops` on in-distribution and rotated-covariance tasks.
pub fn ood_sweep(cfg: &RunConfig, exec: Exec) -> Result<(LoopedParams, BoundReport, Vec<NamedSweep>)> {
    let dist = cfg.distribution()?;
    let init = cfg.init_model(cfg.d, cfg.train_loops, false)?;
    let mut tc = cfg.train_config();
    tc.exec = exec;
    let res = train_sgd(&dist, &init, &tc)?;
    let Model::Looped(p) = res.model else { unreachable!("looped init") };
    let mc = Mc::new(cfg.m).with_exec(exec);
    let id_set = dist.with_seed(derive_seed(cfg.seed, "eval"));
    let ood_set = ood_distribution(&dist, 0.6, 1.4, cfg.seed)?;
    let mut rep = BoundReport::new("loop_extrapolation")
        .param("train_loops", cfg.train_loops as f64)
        .param("eval_loops", cfg.eval_loops as f64);
    let mut sets = Vec::new();
    for (name, set) in [("id", &id_set), ("ood", &ood_set)] {
        let sweep = loop_sweep(&p, cfg.train_loops, cfg.eval_loops, set, mc);
        for pt in sweep.iter().skip(1) {
            rep.check(format!("{name}: loss({}) - loss({}) <= 4 stderr", pt.loops, pt.loops - 1), pt.diff_mean, 4.0 * pt.diff_stderr);
        }
        sets.push((name.to_string(), sweep));
    }
    Ok((p, rep, sets))
}

fn cmd_ood(cfg: &RunConfig, exec: Exec, r: &mut Run) -> Result<()> {
    let (p, rep, sets) = ood_sweep(cfg, exec)?;
    r.json("params.json", &p)?;
    let mut rows = Vec::new();
    for (name, sweep) in &sets {
        let set = if name == "id" { "id" } else { "ood" };
        for pt in sweep {
            rows.push(SweepRow { set, loops: pt.loops, mean: pt.mean, stderr: pt.stderr, diff_mean: pt.diff_mean, diff_stderr: pt.diff_stderr });
            r.summary.push(format!("{set:<4} L = {:<3} loss {:.4e} ± {:.1e}", pt.loops, pt.mean, pt.stderr));
        }
    }
    r.csv("ood_sweep.csv", &rows)?;
    let bounds = ood_bound_reports(cfg, cfg.distribution()?.sigma_star_inv(), cfg.train_loops, 100)?;
    r.csv("ood_bound.csv", &summary_rows(&bounds))?;
    r.summary.push(summary_table(std::slice::from_ref(&rep)));
    r.reports.push(rep);
    r.reports.extend(bounds);
    Ok(())
}

/// One row per report: the worst asserted line.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub theorem: String,
    pub params: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub verdict: Verdict,
    /// False when the check is advisory because a precondition is not met.
    pub strict: bool,
}

pub fn summary_rows(reports: &[BoundReport]) -> Vec<SummaryRow> {
    reports
        .iter()
        .map(|rep| {
            let params: BTreeMap<_, _> = rep.params.iter().collect();
            let params = params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
            let (lhs, rhs, slack) = rep.worst_line().map_or((f64::NAN, f64::NAN, f64::NAN), |l| (l.lhs, l.rhs, l.slack));
            SummaryRow { theorem: rep.id.clone(), params, lhs, rhs, slack, verdict: rep.verdict, strict: rep.strict }
        })
        .collect()
}

pub fn summary_table(reports: &[BoundReport]) -> String {
    let mut out = format!("{:<20} {:>12} {:>12} {:>12}  verdict", "check", "lhs", "rhs", "slack");
    for row in summary_rows(reports) {
        out.push_str(&format!(
            "\n{:<20} {:>12.4e} {:>12.4e} {:>12.4e}  {:?}{}",
            row.theorem,
            row.lhs,
            row.rhs,
            row.slack,
            row.verdict,
            if row.strict { "" } else { " (advisory)" }
        ));
    }
    out
}

/// Command-line options shared by all subcommands; flags override the file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// JSON config (or a previous run's manifest.json)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "L")]
    pub loops: Option<usize>,
    /// identity | diag:a,b,.. | random:SEED
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root (default: $LOOPED_ICL_OUT or ./runs)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_loops: Option<usize>,
    #[arg(long)]
    pub eval_loops: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_loops: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_n: Option<Vec<usize>>,
    #[arg(long)]
    pub multilayer: bool,
    #[arg(long, value_delimiter = ',')]
    pub xi: Option<Vec<f64>>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub a_scale: Option<f64>,
    #[arg(long)]
    pub acceptance: bool,
    /// Run on one thread
    #[arg(long)]
    pub sequential: bool,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?.1,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$target = v;
                }
            )*};
        }
        set!(d => d, n => n, loops => loops, m => m, steps => steps, lr => lr, batch => batch, seed => seed,
             train_loops => train_loops, eval_loops => eval_loops, sweep_loops => sweep_loops, sweep_n => sweep_n,
             xi => xi, zeta => zeta, starts => starts, trials => trials, a_scale => a_scale);
        if let Some(s) = &self.sigma {
            cfg.sigma = SigmaSpec::parse(s)?;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        cfg.multilayer |= self.multilayer;
        cfg.acceptance |= self.acceptance;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "looped-icl", version, about = "Looped linear attention for in-context regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Subcommand, Debug)]
pub enum CliCommand {
    /// Emit sampled regression instances as JSON lines
    Sample(Overrides),
    /// Estimate the loss and gradient at A = a_scale Σ*^{-1}
    Loss(Overrides),
    /// Train looped (and optionally per-layer) models over loop / context sweeps
    Train(Overrides),
    /// Certify gradient-flow rates from random starts
    Flow(Overrides),
    /// Scan gradient dominance on random preconditioners
    Dominance(Overrides),
    /// Wishart moment table and moment bound reports
    Moments(Overrides),
    /// All bound checks at one configuration (or --acceptance)
    Verify(Overrides),
    /// Loop extrapolation on in- and out-of-distribution tasks
    Ood(Overrides),
}

impl CliCommand {
    pub fn split(&self) -> (Command, &Overrides) {
        match self {
            CliCommand::Sample(o) => (Command::Sample, o),
            CliCommand::Loss(o) => (Command::Loss, o),
            CliCommand::Train(o) => (Command::Train, o),
            CliCommand::Flow(o) => (Command::Flow, o),
            CliCommand::Dominance(o) => (Command::Dominance, o),
            CliCommand::Moments(o) => (Command::Moments, o),
            CliCommand::Verify(o) => (Command::Verify, o),
            CliCommand::Ood(o) => (Command::Ood, o),
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit code
/// (0 success, 1 failed check, 2 invalid config).
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, overrides) = parsed.command.split();
    let cfg = match overrides.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let result = run(command, &cfg, overrides.exec());
    match &result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("run dir: {}", outcome.dir.display());
            for f in &outcome.failures {
                eprintln!("FAILED {}", serde_json::to_string(f).unwrap_or_default());
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    exit_code(&result)
}

/// 0 when every strict check passed, 1 for a failed check or a runtime
/// error, 2 for an invalid configuration.
pub fn exit_code(result: &Result<RunOutcome>) -> i32 {
    match result {
        Ok(outcome) if outcome.failures.is_empty() => 0,
        Ok(_) => 1,
        Err(LabError::Config(_) | LabError::InvalidParameter(_) | LabError::DimensionMismatch { .. }) => 2,
        Err(_) => 1,
    }
}
