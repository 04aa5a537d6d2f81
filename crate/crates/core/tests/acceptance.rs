//! Exit criteria for the library. Every criterion runs and prints one
//! PASS/FAIL line; the process fails if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use markov_admm::admm::{Admm, Engine};
use markov_admm::analysis::{
    burn_in_bound, check_edge_bracket, claim_contraction_test, complete_graph_burn_in_bound,
    kkt_certificate, metrics_row, theorem_constants,
};
use markov_admm::cli::{
    run_experiment, ChainKind, ChainSpec, ProblemKind, ExperimentConfig, Generator, GraphSpec, ProblemSpec, ResultBundle,
    PI_TOLERANCE, REPORTED_PI_MAX, REPORTED_PI_MIN,
};
use markov_admm::graph::Graph;
use markov_admm::markov::{compare_stationary, metropolis_hastings, random_walk_chain, MarkovChain};
use markov_admm::objective::ProblemInstance;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NODES: usize = 10;
const DIM: usize = 10;
const DATA_SEED: u64 = 2024;
const MASTER_SEED: u64 = 7;
const ITERATIONS: usize = 5000;
const TRIALS: usize = 200;

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn estimation_config(chain: ChainSpec, engines: Vec<Engine>) -> ExperimentConfig {
    ExperimentConfig {
        graph: GraphSpec::generator(Generator::Path, NODES),
        chain: Some(chain),
        problem: ProblemSpec::estimation(DIM, 1.0, DATA_SEED),
        rho: 1.0,
        engines,
        iterations: ITERATIONS,
        trials: TRIALS,
        master_seed: MASTER_SEED,
        initial_state: 0,
        out_dir: None,
        emit_constants: true,
        k_check: 500,
        defaults_applied: Vec::new(),
    }
}

fn estimation_problem() -> ProblemInstance {
    ProblemInstance::estimation(
        Graph::path(NODES).unwrap(),
        &DVector::zeros(DIM),
        1.0,
        DATA_SEED,
    )
    .unwrap()
}

/// Lazy Metropolis chain with uniform target; aperiodic on every graph.
fn lazy_uniform_chain(g: &Graph) -> MarkovChain {
    let mh = metropolis_hastings(g, None).unwrap();
    let n = g.num_nodes();
    let p = (mh.transition_matrix() + DMatrix::identity(n, n)) * 0.5;
    MarkovChain::from_matrix(p, Some(g)).unwrap()
}

fn kkt_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_res, mut worst_mean) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let g = Graph::random_connected(n, rng.random_range(0.0..0.6), &mut rng).unwrap();
        let targets: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-10.0..10.0)))
            .collect();
        // minimizer of Σ ||x - a_i||² is the average target
        let mean = targets.iter().fold(DVector::zeros(d), |acc, t| acc + t) / n as f64;
        let p = ProblemInstance::quadratic(g, targets).unwrap();
        let cert = kkt_certificate(&p).unwrap();
        worst_res = cert.kkt_residuals.iter().fold(worst_res, |m, &r| m.max(r));
        worst_mean = worst_mean.max((&cert.x_star - mean).amax());
    }
    (
        worst_res <= 1e-8 && worst_mean <= 1e-10,
        format!("max KKT residual {worst_res:.2e} (<= 1e-8), max |x* - mean| {worst_mean:.2e} (<= 1e-10)"),
    )
}

fn sync_convergence() -> (bool, String) {
    let p = estimation_problem();
    let cert = kkt_certificate(&p).unwrap();
    let admm = Admm::new(&p, 1.0).unwrap();
    let mut state = admm.init_state(None, None).unwrap();
    let mut g_err = vec![metrics_row(&admm, &cert, &state).g_err];
    let mut reached = None;
    for k in 1..=ITERATIONS {
        admm.sync_step_in_place(&mut state).unwrap();
        g_err.push(metrics_row(&admm, &cert, &state).g_err);
        let max_dev = (0..NODES)
            .map(|i| (state.x.row(i).transpose() - &cert.x_star).norm())
            .fold(0.0, f64::max);
        if reached.is_none() && max_dev <= 1e-6 {
            reached = Some(k);
        }
    }
    let increases: Vec<usize> = (2..g_err.len())
        .filter(|&k| g_err[k] > g_err[k - 1] + 1e-12)
        .collect();
    (
        reached.is_some() && increases.is_empty(),
        format!(
            "max_i ||x_i - x*|| <= 1e-6 first at iteration {reached:?}; G-error increases after iteration 1: {} (final {:.2e})",
            increases.len(),
            g_err[ITERATIONS]
        ),
    )
}

fn claim_contraction() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut checked, mut violations, mut worst) = (0usize, 0usize, f64::NEG_INFINITY);
    for _ in 0..12 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=3);
        let g = Graph::random_connected(n, rng.random_range(0.0..0.7), &mut rng).unwrap();
        let targets = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let p = ProblemInstance::quadratic(g.clone(), targets).unwrap();
        let rho = rng.random_range(0.3..3.0);
        let chain = lazy_uniform_chain(&g);
        let c = theorem_constants(&p, rho, &chain).unwrap().c;
        let cert = kkt_certificate(&p).unwrap();
        let admm = Admm::new(&p, rho).unwrap();
        let x_star = cert.replicated_x(n);
        for trial in 0..100 {
            // half the states are perturbations of the optimum
            let near = trial % 2 == 0;
            let scale = 10f64.powf(rng.random_range(-4.0..2.0));
            let mut x = DMatrix::from_fn(n, d, |_, _| scale * rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(n, d, |_, _| scale * rng.random_range(-1.0..1.0));
            let mut beta = admm.incidence().i_minus.transpose() * y;
            if near {
                x += &x_star;
                beta += &cert.beta_star;
            }
            let state = admm.init_state(Some(x), Some(beta)).unwrap();
            let chk = claim_contraction_test(&admm, &cert, c, &state).unwrap();
            checked += 1;
            if chk.rhs > 0.0 {
                worst = worst.max(chk.lhs / chk.rhs);
            }
            if !chk.holds {
                violations += 1;
            }
        }
    }
    (
        checked >= 1000 && violations == 0,
        format!("{checked} states on 12 instances, {violations} violations, worst lhs/rhs {worst:.4}"),
    )
}

fn probability_bracket() -> (bool, String) {
    let chain = random_walk_chain(NODES, 0.1).unwrap();
    let g = Graph::path(NODES).unwrap();
    let rep = check_edge_bracket(&chain, &g, 0, 200, 1e-12).unwrap();
    let long = check_edge_bracket(&chain, &g, 0, 1000, 1e-12).unwrap();
    (
        rep.holds(),
        format!(
            "k <= 200: upper violations {}, lower bound active at {} steps, lower violations {}; \
             to k = 1000: lower active from k = {:?} ({} steps), violations {}/{}",
            rep.upper_violations,
            rep.active_steps,
            rep.lower_violations,
            long.first_active,
            long.active_steps,
            long.lower_violations,
            long.upper_violations
        ),
    )
}

fn linear_rate(bundle: &ResultBundle) -> (bool, String) {
    let res = bundle.engine(Engine::Async).unwrap();
    let Some(fit) = res.rate_fit else {
        return (false, format!("no fit: {:?}", res.rate_fit_note));
    };
    let constants = bundle.constants.as_ref().unwrap();
    let mut pass = fit.rate < 1.0 && fit.r_squared >= 0.9;
    let bound = match constants.contraction_factor {
        Some(f) if constants.certifiable => {
            pass &= fit.rate <= f + 0.05;
            format!("certified factor {f:.6}")
        }
        _ => format!(
            "constants not certifiable ({})",
            constants.reason.as_deref().unwrap_or("")
        ),
    };
    (
        pass,
        format!(
            "fitted rate {:.6} on [{}, {}), r² {:.4}; {bound}",
            fit.rate, fit.start, fit.end, fit.r_squared
        ),
    )
}

fn final_x_err(bundle: &ResultBundle) -> f64 {
    *bundle
        .engine(Engine::Async)
        .unwrap()
        .metrics
        .x_err
        .mean
        .last()
        .unwrap()
}

fn slow_chain_ordering(fast: &ResultBundle) -> (bool, String) {
    let slow = run_experiment(&estimation_config(
        ChainSpec::metropolis(Some(0.8)),
        vec![Engine::Async],
    ))
    .unwrap();
    let profile_fast = run_experiment(&estimation_config(
        ChainSpec::metropolis(Some(0.1)),
        vec![Engine::Async],
    ))
    .unwrap();
    let (e_fast, e_slow, e_profile) = (final_x_err(fast), final_x_err(&slow), final_x_err(&profile_fast));
    (
        e_fast < e_slow && e_profile < e_slow,
        format!(
            "mean x_err at {ITERATIONS}: alpha 0.1 random walk {e_fast:.3e}, alpha 0.1 profile {e_profile:.3e}, alpha 0.8 profile {e_slow:.3e}"
        ),
    )
}

fn work_normalized_parity(bundle: &ResultBundle) -> (bool, String) {
    let sync = bundle.engine(Engine::Sync).unwrap();
    let asy = bundle.engine(Engine::Async).unwrap();
    let per = sync.work_per_iteration;
    let sync_err = &sync.metrics.x_err.mean;
    let async_err = &asy.metrics.x_err.mean;
    let mut worst = (0usize, 0.0f64);
    let mut first_break = None;
    for k in 0..=ITERATIONS / per {
        let gap = (async_err[k * per] / sync_err[k]).log10().abs();
        if gap > worst.1 {
            worst = (k * per, gap);
        }
        if gap > 1.0 && first_break.is_none() {
            first_break = Some(k * per);
        }
    }
    let rate = |fit: Option<markov_admm::analysis::RateFit>, per: usize| {
        fit.map(|f| -f.rate.ln() / per as f64).unwrap_or(f64::NAN)
    };
    (
        first_break.is_none(),
        format!(
            "largest |log10(async/sync)| at equal work {:.2} (work {}), first gap > 1 decade at work {:?}; \
             per-work log-decay sync {:.5}, async {:.5}",
            worst.1,
            worst.0,
            first_break,
            rate(sync.rate_fit, per),
            rate(asy.rate_fit, 1)
        ),
    )
}

fn stationary_cross_check(bundle: &ResultBundle) -> (bool, String) {
    let chain = random_walk_chain(NODES, 0.1).unwrap();
    let cmp = compare_stationary(&chain, 0.1, REPORTED_PI_MIN, REPORTED_PI_MAX, PI_TOLERANCE).unwrap();
    let numeric_used = (chain.pi_min() - cmp.numeric_min).abs() < 1e-15
        && (chain.pi_max() - cmp.numeric_max).abs() < 1e-15;
    let constants = bundle.constants.as_ref().unwrap();
    let constants_use_numeric = (constants.pi_min - cmp.numeric_min).abs() < 1e-15;
    let logged = bundle
        .stationary_comparison
        .as_ref()
        .is_some_and(|s| s.verdict == cmp.verdict);
    let flags_consistent = cmp.formula_matches_reported
        == ((cmp.formula_min - REPORTED_PI_MIN).abs() <= PI_TOLERANCE
            && (cmp.formula_max - REPORTED_PI_MAX).abs() <= PI_TOLERANCE)
        && cmp.numeric_matches_formula == (cmp.max_abs_diff <= PI_TOLERANCE);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    println!("    numeric pi:     {}", fmt(&cmp.numeric));
    println!("    closed form pi: {}", fmt(&cmp.formula));
    (
        numeric_used && constants_use_numeric && logged && flags_consistent,
        cmp.verdict.clone(),
    )
}

fn invariant_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut failures = Vec::new();
    let mut trees = 0;
    for case in 0..50 {
        let n = rng.random_range(2..=7);
        let d = rng.random_range(1..=3);
        let g = Graph::random_connected(n, rng.random_range(0.0..0.6), &mut rng).unwrap();
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let p = ProblemInstance::quadratic(
            g.clone(),
            targets.iter().map(|t| DVector::from_vec(t.clone())).collect(),
        )
        .unwrap();
        let rho = rng.random_range(0.2..4.0);
        let chain = lazy_uniform_chain(&g);
        let admm = Admm::new(&p, rho).unwrap();
        let is_tree = g.is_tree();
        trees += is_tree as usize;
        let antisym = |b: &DMatrix<f64>| {
            (0..g.num_arcs()).all(|q| {
                (b.row(q) + b.row(Graph::reverse_arc(q))).amax() <= 1e-12 * b.amax().max(1.0)
            })
        };

        let mut s = admm.init_state(None, None).unwrap();
        for _ in 0..60 {
            admm.sync_step_in_place(&mut s).unwrap();
            if !antisym(&s.beta) {
                failures.push(format!("case {case}: sync antisymmetry"));
            }
            if (&s.z - admm.midpoints(&s.x)).amax() > 1e-12 * s.x.amax().max(1.0) {
                failures.push(format!("case {case}: sync z-consistency"));
            }
            if !admm.in_column_space(&s.beta) {
                failures.push(format!("case {case}: sync column space"));
            }
        }

        let seed = rng.random();
        let path = chain.simulate(0, 80, seed).unwrap();
        let mut s = admm.init_state(None, None).unwrap();
        admm.activate_in_place(&mut s, path.states[0]).unwrap();
        for w in path.states.windows(2) {
            let (prev, curr) = (w[0], w[1]);
            let before = s.clone();
            admm.async_step_in_place(&mut s, &chain, prev, curr).unwrap();
            for i in (0..n).filter(|&i| i != curr) {
                if s.x.row(i) != before.x.row(i) {
                    failures.push(format!("case {case}: async touched node {i}"));
                }
            }
            for (q, &(a, b)) in g.arcs().iter().enumerate() {
                let on_edge = prev != curr && ((a, b) == (prev, curr) || (a, b) == (curr, prev));
                if !on_edge && (s.beta.row(q) != before.beta.row(q) || s.z.row(q) != before.z.row(q)) {
                    failures.push(format!("case {case}: async touched arc ({a},{b})"));
                }
            }
            if !antisym(&s.beta) {
                failures.push(format!("case {case}: async antisymmetry"));
            }
            if is_tree && !admm.in_column_space(&s.beta) {
                failures.push(format!("case {case}: async column space on a tree"));
            }
        }

        let cfg = ExperimentConfig {
            graph: GraphSpec {
                generator: None,
                num_nodes: Some(n),
                file: None,
                edges: Some(g.edges().iter().map(|&(a, b)| [a, b]).collect()),
            },
            chain: Some(ChainSpec {
                kind: ChainKind::Explicit,
                alpha: None,
                target: None,
                p: Some(
                    (0..n)
                        .map(|i| (0..n).map(|j| chain.prob(i, j)).collect())
                        .collect(),
                ),
            }),
            problem: ProblemSpec {
                kind: ProblemKind::Quadratic,
                dim: d,
                targets: Some(targets),
                x_true: None,
                noise_std: None,
                data_seed: None,
            },
            rho,
            engines: vec![Engine::Sync, Engine::Async],
            iterations: 40,
            trials: 3,
            master_seed: seed,
            initial_state: 0,
            out_dir: None,
            emit_constants: false,
            k_check: 500,
            defaults_applied: Vec::new(),
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let same = a.engines.iter().zip(&b.engines).all(|(x, y)| x.metrics == y.metrics && x.seeds == y.seeds);
        if !same {
            failures.push(format!("case {case}: runs differ"));
        }
    }
    failures.dedup();
    (
        failures.is_empty(),
        format!(
            "50 configs ({trees} trees): {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

fn complete_graph_specialization() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..10 {
        let c = rng.random_range(1e-3..1.0);
        let b = rng.random_range(0.1..2.0);
        let gamma = rng.random_range(0.01..0.99);
        let n = rng.random_range(2..=50usize);
        let u = 1.0 / n as f64;
        let general = burn_in_bound(c, b, gamma, u, u, u, u);
        let special = complete_graph_burn_in_bound(c, b, gamma, n);
        match general {
            Some(v) => worst = worst.max((v - special).abs() / special.abs().max(1.0)),
            None => ok = false,
        }
    }
    (
        ok && worst <= 1e-12,
        format!("max relative difference {worst:.2e} over 10 tuples"),
    )
}

fn timed(
    id: &'static str,
    name: &'static str,
    limit: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) -> Outcome {
    let t = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = t.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; runtime {elapsed:.1?} exceeds {limit:?}"));
        }
    }
    Outcome {
        id,
        name,
        pass,
        detail,
        elapsed,
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut outcomes = vec![
        timed("1", "KKT certificate", Some(secs(5)), kkt_oracle),
        timed("2", "synchronous convergence", Some(secs(10)), sync_convergence),
        timed("3", "one-step contraction", Some(secs(60)), claim_contraction),
        timed("4", "edge-update probability bracket", None, probability_bracket),
    ];

    let t = Instant::now();
    let main_run = run_experiment(&estimation_config(
        ChainSpec::random_walk(0.1),
        vec![Engine::Sync, Engine::Async],
    ))
    .unwrap();
    let shared = t.elapsed();
    let mut rate = timed("5", "linear rate of the mean error", Some(secs(300)), || linear_rate(&main_run));
    rate.elapsed += shared;
    if rate.elapsed > secs(300) {
        rate.pass = false;
    }
    outcomes.push(rate);
    outcomes.push(timed("6a", "slower chain degrades", None, || slow_chain_ordering(&main_run)));
    outcomes.push(timed("6b", "work-normalized parity with sync", None, || {
        work_normalized_parity(&main_run)
    }));
    outcomes.push(timed("7", "stationary distribution cross-check", None, || {
        stationary_cross_check(&main_run)
    }));
    outcomes.push(timed("8", "invariant suite", Some(secs(120)), invariant_suite));
    outcomes.push(timed("9", "complete-graph burn-in", None, complete_graph_specialization));

    let failed = outcomes.iter().filter(|o| !o.pass).count();
    for o in &outcomes {
        println!(
            "criterion {:<3} {} {} ({:.1?}): {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.elapsed,
            o.detail
        );
    }
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
