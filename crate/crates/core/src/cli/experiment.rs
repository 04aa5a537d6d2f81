use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{CliError, ExperimentConfig};
use crate::admm::{Admm, Engine, RunConfig};
use crate::analysis::{
    fit_linear_rate_window, kkt_certificate, theorem_constants, CertifiedConstants, MetricsRow,
    RateFit,
};
use crate::markov::{compare_stationary, MarkovChain, StationaryComparison};

/// Extremes of the stationary distribution quoted for the reference
/// estimation experiment, and the agreement tolerance used when comparing.
pub const REPORTED_PI_MIN: f64 = 0.05;
pub const REPORTED_PI_MAX: f64 = 0.14;
pub const PI_TOLERANCE: f64 = 0.03;

/// Trial `t` uses chain seed `master_seed ^ (t * TRIAL_SEED_STEP)`.
pub const TRIAL_SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

/// Caps the number of worker threads used for trials.
pub const THREADS_ENV: &str = "MARKOV_ADMM_THREADS";

/// Rate fits stop where the series first falls below this fraction of its
/// initial value (the floating-point floor).
const FIT_FLOOR_RATIO: f64 = 1e-20;

pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    master_seed ^ (trial as u64).wrapping_mul(TRIAL_SEED_STEP)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Pointwise means and standard errors of every metric across trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub g_err: Trajectory,
    pub x_err: Trajectory,
    pub obj_gap: Trajectory,
    pub consensus_res: Trajectory,
}

/// Compensated (Neumaier) sum, accumulated in slice order.
fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = neumaier_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = neumaier_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Reduces per-trial metric series (all of equal length) in trial order.
pub fn aggregate(trials: &[Vec<MetricsRow>]) -> Aggregate {
    let len = trials.first().map_or(0, Vec::len);
    assert!(trials.iter().all(|t| t.len() == len), "trajectory lengths differ");
    let reduce = |pick: fn(&MetricsRow) -> f64| {
        let mut tr = Trajectory {
            mean: Vec::with_capacity(len),
            stderr: Vec::with_capacity(len),
        };
        let mut column = Vec::with_capacity(trials.len());
        for k in 0..len {
            column.clear();
            column.extend(trials.iter().map(|t| pick(&t[k])));
            let (m, s) = mean_stderr(&column);
            tr.mean.push(m);
            tr.stderr.push(s);
        }
        tr
    };
    Aggregate {
        g_err: reduce(|r| r.g_err),
        x_err: reduce(|r| r.x_err),
        obj_gap: reduce(|r| r.obj_gap),
        consensus_res: reduce(|r| r.consensus_res),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineResult {
    pub engine: Engine,
    /// Independent runs averaged. The synchronous engine does not depend on
    /// the seed, so it always runs once.
    pub trials: usize,
    pub seeds: Vec<u64>,
    /// Local minimizations per iteration.
    pub work_per_iteration: usize,
    #[serde(skip)]
    pub metrics: Aggregate,
    /// Fit of the mean G-norm error series.
    pub rate_fit: Option<RateFit>,
    pub rate_fit_note: Option<String>,
    pub wall_time_secs: f64,
}

impl EngineResult {
    /// Mean `x_err` indexed by cumulative local minimizations.
    pub fn x_err_by_work(&self) -> Vec<(usize, f64)> {
        self.metrics
            .x_err
            .mean
            .iter()
            .enumerate()
            .map(|(k, &v)| (k * self.work_per_iteration, v))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultBundle {
    pub config: ExperimentConfig,
    pub engines: Vec<EngineResult>,
    pub constants: Option<CertifiedConstants>,
    pub constants_error: Option<String>,
    pub stationary_comparison: Option<StationaryComparison>,
    pub chain_warnings: Vec<String>,
    pub kkt_residuals: [f64; 3],
    pub runtime_secs: f64,
}

impl ResultBundle {
    pub fn engine(&self, engine: Engine) -> Option<&EngineResult> {
        self.engines.iter().find(|e| e.engine == engine)
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::invalid(THREADS_ENV, format!("expected a count, got {v:?}")))?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder
        .build()
        .map_err(|e| CliError::ThreadPool(e.to_string()))
}

fn stationary_report(cfg: &ExperimentConfig, chain: &MarkovChain) -> Option<StationaryComparison> {
    let alpha = cfg.chain.as_ref()?.profile_alpha()?;
    compare_stationary(chain, alpha, REPORTED_PI_MIN, REPORTED_PI_MAX, PI_TOLERANCE).ok()
}

/// Fits the mean error from `burn_in` (one tenth of the usable window when
/// `None`) up to the point where the series reaches the floating-point floor.
fn fit_rate(series: &[f64], burn_in: Option<usize>) -> (Option<RateFit>, Option<String>) {
    let floor = series.first().copied().unwrap_or(0.0) * FIT_FLOOR_RATIO;
    let end = series
        .iter()
        .position(|&v| v < floor)
        .unwrap_or(series.len());
    let start = burn_in.unwrap_or(end / 10);
    match fit_linear_rate_window(series, start, end) {
        Ok(fit) => (Some(fit), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Runs every configured engine, averaging `trials` chain realizations for
/// the asynchronous one. Deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultBundle, CliError> {
    let start = Instant::now();
    let setup = cfg.build()?;
    let problem = &setup.problem;
    let cert = kkt_certificate(problem)?;
    let admm = Admm::new(problem, cfg.rho)?;

    let (constants, constants_error) = match (&setup.chain, cfg.emit_constants) {
        (Some(chain), true) => match theorem_constants(problem, cfg.rho, chain) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        },
        (None, true) => (None, Some("no chain configured".into())),
        (_, false) => (None, None),
    };
    let stationary_comparison = setup
        .chain
        .as_ref()
        .and_then(|chain| stationary_report(cfg, chain));

    let pool = thread_pool()?;
    let n = problem.num_nodes();
    let mut engines = Vec::with_capacity(cfg.engines.len());
    for &engine in &cfg.engines {
        let t0 = Instant::now();
        let trials = match engine {
            Engine::Sync => 1,
            Engine::Async => cfg.trials,
        };
        let seeds: Vec<u64> = (0..trials).map(|t| trial_seed(cfg.master_seed, t)).collect();
        let runs: Result<Vec<Vec<MetricsRow>>, _> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let rc = RunConfig {
                        engine,
                        rho: cfg.rho,
                        iterations: cfg.iterations,
                        initial_state: cfg.initial_state,
                        seed,
                    };
                    admm.run(&rc, setup.chain.as_ref(), &cert).map(|r| r.metrics)
                })
                .collect()
        });
        let metrics = aggregate(&runs?);
        if let Some(k) = metrics.g_err.mean.iter().position(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!(
                "{} engine produced a non-finite mean error at iteration {k}",
                engine.name()
            )));
        }
        let burn_in = match (engine, &constants) {
            (Engine::Async, Some(c)) if c.certifiable => c.k_prime.map(|k| k as usize),
            _ => None,
        };
        let (rate_fit, rate_fit_note) = fit_rate(&metrics.g_err.mean, burn_in);
        engines.push(EngineResult {
            engine,
            trials,
            seeds,
            work_per_iteration: engine.work_per_iteration(n),
            metrics,
            rate_fit,
            rate_fit_note,
            wall_time_secs: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(ResultBundle {
        config: cfg.clone(),
        engines,
        constants,
        constants_error,
        stationary_comparison,
        chain_warnings: setup
            .chain
            .as_ref()
            .map(|c| c.warnings().to_vec())
            .unwrap_or_default(),
        kkt_residuals: cert.kkt_residuals,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsReport {
    pub constants: CertifiedConstants,
    pub stationary_comparison: Option<StationaryComparison>,
}

pub fn constants_report(cfg: &ExperimentConfig) -> Result<ConstantsReport, CliError> {
    let setup = cfg.build()?;
    let chain = setup
        .chain
        .as_ref()
        .ok_or_else(|| CliError::invalid("chain", "constants need a chain"))?;
    Ok(ConstantsReport {
        constants: theorem_constants(&setup.problem, cfg.rho, chain)?,
        stationary_comparison: stationary_report(cfg, chain),
    })
}

fn csv(result: &EngineResult) -> String {
    let m = &result.metrics;
    let mut out =
        String::from("k,g_err_mean,g_err_stderr,x_err_mean,x_err_stderr,obj_gap_mean,consensus_res_mean\n");
    for k in 0..m.g_err.mean.len() {
        writeln!(
            out,
            "{k},{:?},{:?},{:?},{:?},{:?},{:?}",
            m.g_err.mean[k],
            m.g_err.stderr[k],
            m.x_err.mean[k],
            m.x_err.stderr[k],
            m.obj_gap.mean[k],
            m.consensus_res.mean[k]
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Serialize)]
struct EngineSummary<'a> {
    #[serde(flatten)]
    result: &'a EngineResult,
    iterations: usize,
    total_work: usize,
    final_g_err_mean: f64,
    final_x_err_mean: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    engines: Vec<EngineSummary<'a>>,
    certifiable: Option<bool>,
    certifiability_reason: Option<&'a str>,
    constants_error: Option<&'a str>,
    stationary_comparison: Option<&'a StationaryComparison>,
    chain_warnings: &'a [String],
    kkt_residuals: [f64; 3],
    runtime_secs: f64,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `metrics_<engine>.csv`, `constants.json` and `summary.json`.
pub fn emit(bundle: &ResultBundle, out_dir: impl AsRef<Path>) -> Result<(), CliError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| CliError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for e in &bundle.engines {
        write(&out_dir.join(format!("metrics_{}.csv", e.engine.name())), &csv(e))?;
    }

    let constants = match (&bundle.constants, &bundle.constants_error) {
        (Some(c), _) => serde_json::to_value(c),
        (None, Some(err)) => Ok(serde_json::json!({ "certifiable": false, "reason": err })),
        (None, None) => Ok(serde_json::Value::Null),
    }
    .and_then(|v| serde_json::to_string_pretty(&v))
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    write(&out_dir.join("constants.json"), &(constants + "\n"))?;

    let summary = Summary {
        config: &bundle.config,
        engines: bundle
            .engines
            .iter()
            .map(|e| EngineSummary {
                result: e,
                iterations: bundle.config.iterations,
                total_work: bundle.config.iterations * e.work_per_iteration,
                final_g_err_mean: e.metrics.g_err.mean.last().copied().unwrap_or(f64::NAN),
                final_x_err_mean: e.metrics.x_err.mean.last().copied().unwrap_or(f64::NAN),
            })
            .collect(),
        certifiable: bundle.constants.as_ref().map(|c| c.certifiable),
        certifiability_reason: bundle
            .constants
            .as_ref()
            .and_then(|c| c.reason.as_deref()),
        constants_error: bundle.constants_error.as_deref(),
        stationary_comparison: bundle.stationary_comparison.as_ref(),
        chain_warnings: &bundle.chain_warnings,
        kkt_residuals: bundle.kkt_residuals,
        runtime_secs: bundle.runtime_secs,
    };
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Numerical(e.to_string()))?;
    write(&out_dir.join("summary.json"), &(text + "\n"))
}
