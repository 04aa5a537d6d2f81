//! Optimality certificates, error metrics and the constants of the linear
//! convergence guarantee for the asynchronous engine.
//!
//! The guarantee is stated in the weighted norm
//! `||w||²_G = rho ||z||² + (1/rho) ||beta||²` over `w = [z beta]`. Its
//! ingredients are
//!
//! * the one-step contraction margin `c` of the synchronous map, built from
//!   `nu`, `L`, `rho`, `σ_max(I₊)` and the smallest non-zero `σ(I₋)`;
//! * the chain's mixing constants `(b, gamma)`, its stationary extremes
//!   `pi_min`, `pi_max` and off-diagonal transition extremes `p_min`,
//!   `p_max`;
//! * a burn-in `k'` after which every edge is triggered often enough that
//!   the expected error contracts by `1 - alpha_{k'}` per iteration.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{Admm, AdmmError, AlgState};
use crate::graph::{Graph, GraphError};
use crate::markov::{MarkovChain, MarkovError};
use crate::objective::{ObjectiveError, ProblemInstance};

/// Bracket for the maximizing `kappa`.
pub const KAPPA_LOWER: f64 = 1.0 + 1e-9;
pub const KAPPA_UPPER: f64 = 1e6;
/// Slack on the contraction inequality.
pub const CLAIM_SLACK: f64 = 1e-9;
/// Minimum number of points for a rate fit.
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("KKT system is inconsistent: stationarity residual {0:e} exceeds 1e-6")]
    InconsistentKkt(f64),
    #[error("beta is not in the column space of the oriented incidence matrix (residual {0:e})")]
    DualOutsideColumnSpace(f64),
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// The optimal primal-dual point `(x*, z*, beta*)`.
#[derive(Debug, Clone)]
pub struct OptimalCertificate {
    pub x_star: DVector<f64>,
    /// One row per arc, each equal to `x_star`.
    pub z_star: DMatrix<f64>,
    /// Minimum-norm solution of `I₋ beta = -∇f(x*)`; lies in `range(I₋ᵀ)`.
    pub beta_star: DMatrix<f64>,
    /// Residual norms of `∇f(x*) + I₋β* = 0`, `I₋ᵀx* = 0`, `z* = ½I₊ᵀx*`.
    pub kkt_residuals: [f64; 3],
}

impl OptimalCertificate {
    /// `x*` replicated on every node (N x d).
    pub fn replicated_x(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, self.x_star.len(), |_, c| self.x_star[c])
    }
}

pub fn kkt_certificate(problem: &ProblemInstance) -> Result<OptimalCertificate, AnalysisError> {
    let x_star = problem.centralized_solve()?;
    let g = problem.graph();
    let inc = g.incidence()?;
    let n = g.num_nodes();
    let x_rep = DMatrix::from_fn(n, x_star.len(), |_, c| x_star[c]);
    let grads = problem.stacked_gradient(&x_rep)?;
    let beta_star = inc.min_norm_dual(&(-&grads));
    let z_star = DMatrix::from_fn(g.num_arcs(), x_star.len(), |_, c| x_star[c]);

    let r1 = (&grads + &inc.i_minus * &beta_star).norm();
    let r2 = (inc.i_minus.transpose() * &x_rep).norm();
    let r3 = (&z_star - inc.i_plus.transpose() * &x_rep * 0.5).norm();
    if r1 > 1e-6 {
        return Err(AnalysisError::InconsistentKkt(r1));
    }
    Ok(OptimalCertificate {
        x_star,
        z_star,
        beta_star,
        kkt_residuals: [r1, r2, r3],
    })
}

/// `rho ||z_dev||² + (1/rho) ||beta_dev||²`.
pub fn g_norm_sq(z_dev: &DMatrix<f64>, beta_dev: &DMatrix<f64>, rho: f64) -> f64 {
    rho * z_dev.norm_squared() + beta_dev.norm_squared() / rho
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    /// `||w(k) - w*||²_G` against the nearest optimal dual: the optimal duals
    /// form `beta* + ker(I₋)`, so `beta` enters through its projection onto
    /// `range(I₋ᵀ)`. On trees the projection is the identity.
    pub g_err: f64,
    /// `||x(k) - 1 x*ᵀ||²`.
    pub x_err: f64,
    /// `Σ f_i(x_i(k)) - Σ f_i(x*)`; may be negative away from consensus.
    pub obj_gap: f64,
    /// `||I₋ᵀ x(k)||`.
    pub consensus_res: f64,
}

pub fn metrics_row(admm: &Admm<'_>, cert: &OptimalCertificate, state: &AlgState) -> MetricsRow {
    let problem = admm.problem();
    let n = problem.num_nodes();
    let x_rep = cert.replicated_x(n);
    let g_err = g_norm_sq(
        &(&state.z - &cert.z_star),
        &(admm.project_dual(&state.beta) - &cert.beta_star),
        admm.rho(),
    );
    MetricsRow {
        k: state.k,
        g_err,
        x_err: (&state.x - &x_rep).norm_squared(),
        obj_gap: problem.total_value(&state.x) - problem.total_value(&x_rep),
        consensus_res: (admm.incidence().i_minus.transpose() * &state.x).norm(),
    }
}

/// `c(kappa)`: the smaller of the two contraction branches.
#[derive(Debug, Clone, Copy)]
pub struct MarginInputs {
    pub rho: f64,
    pub nu: f64,
    pub lipschitz: f64,
    pub sigma_max_plus: f64,
    pub sigma_min_minus: f64,
}

impl MarginInputs {
    /// Increasing in `kappa`, zero at `kappa = 1`.
    pub fn dual_branch(&self, kappa: f64) -> f64 {
        (kappa - 1.0) * self.sigma_min_minus.powi(2) / (kappa * self.sigma_max_plus.powi(2))
    }

    /// Decreasing in `kappa`.
    pub fn primal_branch(&self, kappa: f64) -> f64 {
        self.nu
            / (kappa * self.lipschitz.powi(2) / (self.rho * self.sigma_min_minus.powi(2))
                + self.rho * self.sigma_max_plus.powi(2) / 4.0)
    }

    pub fn margin(&self, kappa: f64) -> f64 {
        self.dual_branch(kappa).min(self.primal_branch(kappa))
    }

    /// `(kappa*, c(kappa*))` by golden-section search over `ln(kappa - 1)`.
    pub fn maximize(&self) -> (f64, f64) {
        let to_kappa = |t: f64| 1.0 + t.exp();
        let h = |t: f64| self.margin(to_kappa(t));
        let (mut lo, mut hi) = ((KAPPA_LOWER - 1.0).ln(), (KAPPA_UPPER - 1.0).ln());
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - inv_phi * (hi - lo);
        let mut b = lo + inv_phi * (hi - lo);
        let (mut fa, mut fb) = (h(a), h(b));
        for _ in 0..200 {
            if fa < fb {
                lo = a;
                a = b;
                fa = fb;
                b = lo + inv_phi * (hi - lo);
                fb = h(b);
            } else {
                hi = b;
                b = a;
                fb = fa;
                a = hi - inv_phi * (hi - lo);
                fa = h(a);
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        let mut best = (to_kappa(0.5 * (lo + hi)), h(0.5 * (lo + hi)));
        for t in [a, b, (KAPPA_LOWER - 1.0).ln(), (KAPPA_UPPER - 1.0).ln()] {
            let v = h(t);
            if v > best.1 {
                best = (to_kappa(t), v);
            }
        }
        best
    }
}

/// Right-hand side of the burn-in condition
/// `k' > 1 + ln(arg) / ln(gamma)` with
/// `arg = ((1+c) p_min pi_min - p_max pi_max) / (b (p_max + (1+c) p_min))`.
/// `None` when `arg <= 0`.
pub fn burn_in_bound(
    c: f64,
    b: f64,
    gamma: f64,
    p_min: f64,
    p_max: f64,
    pi_min: f64,
    pi_max: f64,
) -> Option<f64> {
    let num = (1.0 + c) * p_min * pi_min - p_max * pi_max;
    let den = b * (p_max + (1.0 + c) * p_min);
    let arg = num / den;
    (arg > 0.0 && arg.is_finite()).then(|| 1.0 + arg.ln() / gamma.ln())
}

/// Burn-in bound when every transition probability is `1/n`:
/// `1 + ln(c / (b n (2 + c))) / ln(gamma)`.
pub fn complete_graph_burn_in_bound(c: f64, b: f64, gamma: f64, n: usize) -> f64 {
    1.0 + (c / (b * n as f64 * (2.0 + c))).ln() / gamma.ln()
}

/// `alpha_{k'} = 2 p_min (pi_min - b γ^{k'-1}) - 2/(1+c) p_max (pi_max + b γ^{k'-1})`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_at(
    k_prime: u64,
    c: f64,
    b: f64,
    gamma: f64,
    p_min: f64,
    p_max: f64,
    pi_min: f64,
    pi_max: f64,
) -> f64 {
    let mix = b * gamma.powf(k_prime as f64 - 1.0);
    2.0 * p_min * (pi_min - mix) - 2.0 / (1.0 + c) * p_max * (pi_max + mix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedConstants {
    pub rho: f64,
    pub nu: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub sigma_max_plus: f64,
    pub sigma_min_minus: f64,
    pub kappa_star: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub pi_min: f64,
    pub pi_max: f64,
    pub b: f64,
    pub gamma: f64,
    pub k_check: usize,
    /// `1 + ln(arg)/ln(gamma)` when the log argument is positive.
    pub burn_in_bound: Option<f64>,
    pub k_prime: Option<u64>,
    pub alpha_kprime: Option<f64>,
    /// `1 - alpha_kprime`.
    pub contraction_factor: Option<f64>,
    pub certifiable: bool,
    pub reason: Option<String>,
}

impl fmt::Display for CertifiedConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "c = {:.6e} at kappa* = {:.6}; sigma_max(I+) = {:.6}, sigma_min(I-) = {:.6}",
            self.c, self.kappa_star, self.sigma_max_plus, self.sigma_min_minus
        )?;
        writeln!(
            f,
            "p in [{:.4}, {:.4}], pi in [{:.4}, {:.4}], b = {:.4}, gamma = {:.6}",
            self.p_min, self.p_max, self.pi_min, self.pi_max, self.b, self.gamma
        )?;
        match (self.k_prime, self.alpha_kprime) {
            (Some(k), Some(a)) if self.certifiable => {
                write!(f, "certifiable: k' = {k}, alpha_k' = {a:.6e}")
            }
            _ => write!(
                f,
                "not certifiable: {}",
                self.reason.as_deref().unwrap_or("unknown")
            ),
        }
    }
}

pub fn margin_inputs(problem: &ProblemInstance, rho: f64) -> Result<MarginInputs, AnalysisError> {
    let inc = problem.graph().incidence()?;
    Ok(MarginInputs {
        rho,
        nu: problem.nu(),
        lipschitz: problem.lipschitz(),
        sigma_max_plus: inc.sigma_max_plus,
        sigma_min_minus: inc.sigma_min_minus,
    })
}

/// Best contraction margin `c` over `kappa`.
pub fn contraction_margin(problem: &ProblemInstance, rho: f64) -> Result<(f64, f64), AnalysisError> {
    let (kappa, c) = margin_inputs(problem, rho)?.maximize();
    Ok((c, kappa))
}

pub fn theorem_constants(
    problem: &ProblemInstance,
    rho: f64,
    chain: &MarkovChain,
) -> Result<CertifiedConstants, AnalysisError> {
    if chain.num_states() != problem.num_nodes() {
        return Err(AnalysisError::InvalidArgument(format!(
            "chain has {} states, problem has {} nodes",
            chain.num_states(),
            problem.num_nodes()
        )));
    }
    let inputs = margin_inputs(problem, rho)?;
    let (kappa_star, c) = inputs.maximize();
    let mixing = chain.mixing()?;
    let (b, gamma) = (mixing.b, mixing.gamma);
    let (p_min, p_max) = (chain.p_min(), chain.p_max());
    let (pi_min, pi_max) = (chain.pi_min(), chain.pi_max());

    let bound = burn_in_bound(c, b, gamma, p_min, p_max, pi_min, pi_max);
    let mut out = CertifiedConstants {
        rho,
        nu: inputs.nu,
        lipschitz: inputs.lipschitz,
        sigma_max_plus: inputs.sigma_max_plus,
        sigma_min_minus: inputs.sigma_min_minus,
        kappa_star,
        c,
        p_min,
        p_max,
        pi_min,
        pi_max,
        b,
        gamma,
        k_check: mixing.k_check,
        burn_in_bound: bound,
        k_prime: None,
        alpha_kprime: None,
        contraction_factor: None,
        certifiable: false,
        reason: None,
    };
    let Some(bound) = bound else {
        out.reason = Some(format!(
            "(1+c) p_min pi_min = {:.4e} <= p_max pi_max = {:.4e}: the burn-in condition can never hold",
            (1.0 + c) * p_min * pi_min,
            p_max * pi_max
        ));
        return Ok(out);
    };
    if !bound.is_finite() || bound > u64::MAX as f64 / 2.0 {
        out.reason = Some(format!("burn-in bound {bound} is not representable"));
        return Ok(out);
    }
    let k_prime = (bound.floor() as i64 + 1).max(1) as u64;
    let alpha = alpha_at(k_prime, c, b, gamma, p_min, p_max, pi_min, pi_max);
    if alpha > 0.0 && alpha < 1.0 {
        out.k_prime = Some(k_prime);
        out.alpha_kprime = Some(alpha);
        out.contraction_factor = Some(1.0 - alpha);
        out.certifiable = true;
    } else {
        out.reason = Some(format!("alpha_k' = {alpha:e} at k' = {k_prime} is outside (0, 1)"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimCheck {
    /// `||ŵ - w*||²_G`.
    pub lhs: f64,
    /// `||w(k) - w*||²_G / (1 + c)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Checks the one-step contraction of the synchronous map at `state`.
pub fn claim_contraction_test(
    admm: &Admm<'_>,
    cert: &OptimalCertificate,
    c: f64,
    state: &AlgState,
) -> Result<ClaimCheck, AnalysisError> {
    if !admm.in_column_space(&state.beta) {
        return Err(AnalysisError::DualOutsideColumnSpace(
            admm.column_space_residual(&state.beta),
        ));
    }
    let hat = admm.hypothetical_full_update(state)?;
    let rho = admm.rho();
    let lhs = g_norm_sq(&(&hat.z - &cert.z_star), &(&hat.beta - &cert.beta_star), rho);
    let current = g_norm_sq(
        &(&state.z - &cert.z_star),
        &(&state.beta - &cert.beta_star),
        rho,
    );
    let rhs = current / (1.0 + c);
    Ok(ClaimCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + CLAIM_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub r_squared: f64,
    pub start: usize,
    pub end: usize,
    pub contractive: bool,
}

/// Least-squares fit of `ln(series[k])` against `k` for `k >= burn_in`.
pub fn fit_linear_rate(series: &[f64], burn_in: usize) -> Result<RateFit, AnalysisError> {
    fit_linear_rate_window(series, burn_in, series.len())
}

/// Same as [`fit_linear_rate`] over `start <= k < end`.
pub fn fit_linear_rate_window(
    series: &[f64],
    start: usize,
    end: usize,
) -> Result<RateFit, AnalysisError> {
    let end = end.min(series.len());
    if end < start || end - start < MIN_FIT_POINTS {
        return Err(AnalysisError::DegenerateSeries(format!(
            "{} points in [{start}, {end}), need at least {MIN_FIT_POINTS}",
            end.saturating_sub(start)
        )));
    }
    let pts: Vec<(f64, f64)> = (start..end)
        .map(|k| (k as f64, series[k].max(1e-300).ln()))
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let sse: f64 = pts
        .iter()
        .map(|p| (p.1 - (my + slope * (p.0 - mx))).powi(2))
        .sum();
    let r_squared = if syy <= f64::EPSILON * f64::EPSILON * m {
        1.0
    } else {
        1.0 - sse / syy
    };
    let rate = slope.exp();
    Ok(RateFit {
        rate,
        r_squared,
        start,
        end,
        contractive: rate < 1.0 - 1e-12,
    })
}

/// Memoized powers `P^k` of a transition matrix.
#[derive(Debug, Clone)]
pub struct TransitionPowers {
    p: DMatrix<f64>,
    powers: Vec<DMatrix<f64>>,
}

impl TransitionPowers {
    pub fn new(chain: &MarkovChain) -> Self {
        let n = chain.num_states();
        TransitionPowers {
            p: chain.transition_matrix().clone(),
            powers: vec![DMatrix::identity(n, n)],
        }
    }

    pub fn power(&mut self, k: usize) -> &DMatrix<f64> {
        while self.powers.len() <= k {
            let next = self.powers.last().expect("P^0") * &self.p;
            self.powers.push(next);
        }
        &self.powers[k]
    }

    /// `P(edge {i,j} is triggered at time k) = p_ij P^{k-1}[i0][i] + p_ji P^{k-1}[i0][j]`.
    pub fn edge_update_probability(&mut self, i0: usize, k: usize, i: usize, j: usize) -> f64 {
        assert!(k >= 1, "edge update probability is defined for k >= 1");
        let (pij, pji) = (self.p[(i, j)], self.p[(j, i)]);
        let pk = self.power(k - 1);
        pij * pk[(i0, i)] + pji * pk[(i0, j)]
    }
}

pub fn edge_update_probability(chain: &MarkovChain, i0: usize, k: usize, i: usize, j: usize) -> f64 {
    TransitionPowers::new(chain).edge_update_probability(i0, k, i, j)
}

/// `(δ̲(k), δ̄(k)) = (2 p_min (pi_min - b γ^{k-1}), 2 p_max (pi_max + b γ^{k-1}))`.
pub fn delta_bounds(chain: &MarkovChain, k: usize) -> Result<(f64, f64), AnalysisError> {
    let m = chain.mixing()?;
    let mix = m.b * m.gamma.powf(k as f64 - 1.0);
    Ok((
        2.0 * chain.p_min() * (chain.pi_min() - mix),
        2.0 * chain.p_max() * (chain.pi_max() + mix),
    ))
}

/// Outcome of checking the edge-update bracket over a horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketReport {
    pub horizon: usize,
    pub active_steps: usize,
    pub first_active: Option<usize>,
    pub lower_violations: usize,
    pub upper_violations: usize,
    pub min_margin_lower: f64,
    pub min_margin_upper: f64,
}

impl BracketReport {
    pub fn holds(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }
}

/// For every `1 <= k <= horizon` and every edge, checks the exact trigger
/// probability against `δ̄(k)`, and against `δ̲(k)` whenever `δ̲(k) > 0`.
pub fn check_edge_bracket(
    chain: &MarkovChain,
    graph: &Graph,
    i0: usize,
    horizon: usize,
    tol: f64,
) -> Result<BracketReport, AnalysisError> {
    let mut powers = TransitionPowers::new(chain);
    let mut report = BracketReport {
        horizon,
        active_steps: 0,
        first_active: None,
        lower_violations: 0,
        upper_violations: 0,
        min_margin_lower: f64::INFINITY,
        min_margin_upper: f64::INFINITY,
    };
    for k in 1..=horizon {
        let (lo, hi) = delta_bounds(chain, k)?;
        let active = lo > 0.0;
        if active {
            report.active_steps += 1;
            report.first_active.get_or_insert(k);
        }
        for &(i, j) in graph.edges() {
            let p = powers.edge_update_probability(i0, k, i, j);
            report.min_margin_upper = report.min_margin_upper.min(hi - p);
            if p > hi + tol {
                report.upper_violations += 1;
            }
            if active {
                report.min_margin_lower = report.min_margin_lower.min(p - lo);
                if p < lo - tol {
                    report.lower_violations += 1;
                }
            }
        }
    }
    Ok(report)
}
