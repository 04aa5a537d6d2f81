//! Consensus ADMM over arcs: the synchronous engine and the asynchronous
//! engine driven by a Markov chain over nodes.
//!
//! Both engines work with the simplified recursions in which the per-arc
//! multipliers are antisymmetric (`beta[(j,i)] = -beta[(i,j)]`) and the
//! auxiliaries are edge midpoints (`z[(i,j)] = z[(j,i)] = (x_i + x_j) / 2`).
//! Node `i` solves
//!
//! ```text
//! argmin_x  f_i(x) + 2 Σ_p beta_ip·x + rho Σ_p ||x - (x_i + x_p)/2||²
//! ```
//!
//! and an activated edge moves its dual by `rho/2 (x_i - x_j)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, MetricsRow, OptimalCertificate};
use crate::graph::{Graph, GraphError, IncidenceMatrices};
use crate::markov::{ChainPath, MarkovChain, MarkovError};
use crate::objective::{ObjectiveError, ProblemInstance};

/// Absolute tolerance (scaled by `max(1, ||beta||)`) on the distance of a
/// dual from `range(I₋ᵀ)`.
pub const COLUMN_SPACE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("invalid dual initialization: {0}")]
    InvalidDual(String),
    #[error("invalid primal initialization: {0}")]
    InvalidPrimal(String),
    #[error("transition {from} -> {to} has zero probability or is not an edge")]
    InvalidTransition { from: usize, to: usize },
    #[error("rho must be positive and finite, got {0}")]
    InvalidRho(f64),
    #[error("asynchronous engine requires a Markov chain")]
    MissingChain,
    #[error("chain has {chain} states but the graph has {graph} nodes")]
    ChainSize { chain: usize, graph: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Sync,
    Async,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Sync => "sync",
            Engine::Async => "async",
        }
    }

    /// Local minimizations performed per iteration on an `n`-node graph.
    pub fn work_per_iteration(self, n: usize) -> usize {
        match self {
            Engine::Sync => n,
            Engine::Async => 1,
        }
    }
}

/// Iterate `(x, z, beta)`; `z` and `beta` have one row per arc.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgState {
    pub k: usize,
    pub x: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub last_mc_state: Option<usize>,
}

/// Uncommitted synchronous image of a state.
#[derive(Debug, Clone, PartialEq)]
pub struct FullUpdate {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Admm<'a> {
    problem: &'a ProblemInstance,
    rho: f64,
    incidence: IncidenceMatrices,
    projector: DMatrix<f64>,
}

impl<'a> Admm<'a> {
    pub fn new(problem: &'a ProblemInstance, rho: f64) -> Result<Self, AdmmError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(AdmmError::InvalidRho(rho));
        }
        let incidence = problem.graph().incidence()?;
        let projector = incidence.dual_range_projector();
        Ok(Admm {
            problem,
            rho,
            incidence,
            projector,
        })
    }

    pub fn problem(&self) -> &'a ProblemInstance {
        self.problem
    }

    pub fn graph(&self) -> &'a Graph {
        self.problem.graph()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn incidence(&self) -> &IncidenceMatrices {
        &self.incidence
    }

    /// Distance of `beta` (column by column) from `range(I₋ᵀ)`.
    pub fn column_space_residual(&self, beta: &DMatrix<f64>) -> f64 {
        (beta - &self.projector * beta).norm()
    }

    /// Orthogonal projection of `beta` onto `range(I₋ᵀ)`. Components outside
    /// it lie in the kernel of `I₋` and never reach the primal updates.
    pub fn project_dual(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        &self.projector * beta
    }

    pub fn in_column_space(&self, beta: &DMatrix<f64>) -> bool {
        self.column_space_residual(beta) <= COLUMN_SPACE_TOL * beta.norm().max(1.0)
    }

    /// Builds the initial state. `x0 = None` means zeros, `beta0 = None`
    /// means zeros; `z` starts at the edge midpoints of `x0`.
    pub fn init_state(
        &self,
        x0: Option<DMatrix<f64>>,
        beta0: Option<DMatrix<f64>>,
    ) -> Result<AlgState, AdmmError> {
        let n = self.problem.num_nodes();
        let d = self.problem.dim();
        let m = self.graph().num_arcs();
        let x = match x0 {
            Some(x) if x.shape() != (n, d) => {
                return Err(AdmmError::InvalidPrimal(format!(
                    "expected {n}x{d}, got {}x{}",
                    x.nrows(),
                    x.ncols()
                )))
            }
            Some(x) if x.iter().any(|v| !v.is_finite()) => {
                return Err(AdmmError::InvalidPrimal("non-finite entry".into()))
            }
            Some(x) => x,
            None => DMatrix::zeros(n, d),
        };
        let beta = match beta0 {
            Some(b) => {
                if b.shape() != (m, d) {
                    return Err(AdmmError::InvalidDual(format!(
                        "expected {m}x{d}, got {}x{}",
                        b.nrows(),
                        b.ncols()
                    )));
                }
                for q in (0..m).step_by(2) {
                    let skew = (b.row(q) + b.row(q + 1)).amax();
                    if skew > 1e-12 * (1.0 + b.row(q).amax()) {
                        let (i, j) = self.graph().arcs()[q];
                        return Err(AdmmError::InvalidDual(format!(
                            "beta({i},{j}) and beta({j},{i}) are not antisymmetric"
                        )));
                    }
                }
                if !self.in_column_space(&b) {
                    return Err(AdmmError::InvalidDual(format!(
                        "beta is not in the column space of the oriented incidence matrix (residual {:e})",
                        self.column_space_residual(&b)
                    )));
                }
                b
            }
            None => DMatrix::zeros(m, d),
        };
        let z = self.midpoints(&x);
        Ok(AlgState {
            k: 0,
            x,
            beta,
            z,
            last_mc_state: None,
        })
    }

    /// `½ I₊ᵀ x`: row `q` is the midpoint of the endpoints of arc `q`.
    pub fn midpoints(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let arcs = self.graph().arcs();
        let mut z = DMatrix::zeros(arcs.len(), x.ncols());
        for (q, &(i, j)) in arcs.iter().enumerate() {
            z.set_row(q, &((x.row(i) + x.row(j)) * 0.5));
        }
        z
    }

    fn dual_sum(&self, beta: &DMatrix<f64>, i: usize) -> DVector<f64> {
        let g = self.graph();
        let mut s = DVector::zeros(beta.ncols());
        for &p in g.neighbors(i) {
            let q = g.arc_index(i, p).expect("neighbour arc");
            s += beta.row(q).transpose();
        }
        s
    }

    /// Local subproblem at node `i` with neighbour means `(x_i + x_p)/2`.
    fn solve_node(
        &self,
        i: usize,
        x: &DMatrix<f64>,
        beta: &DMatrix<f64>,
    ) -> Result<DVector<f64>, AdmmError> {
        let xi = x.row(i);
        let means: Vec<DVector<f64>> = self
            .graph()
            .neighbors(i)
            .iter()
            .map(|&p| ((xi + x.row(p)) * 0.5).transpose())
            .collect();
        let lam = self.dual_sum(beta, i);
        Ok(self
            .problem
            .objective(i)
            .local_x_update(&lam, &means, self.rho)?)
    }

    fn update_edge(&self, state: &mut AlgState, i: usize, j: usize) {
        let g = self.graph();
        let q = g.arc_index(i, j).expect("edge arc");
        let r = Graph::reverse_arc(q);
        let delta = (state.x.row(i) - state.x.row(j)) * (0.5 * self.rho);
        let new_beta = state.beta.row(q) + delta;
        state.beta.set_row(q, &new_beta);
        state.beta.set_row(r, &(-new_beta));
        let mid = (state.x.row(i) + state.x.row(j)) * 0.5;
        state.z.set_row(q, &mid);
        state.z.set_row(r, &mid);
    }

    /// One synchronous iteration: every node solves its subproblem from
    /// `x(k)`, then every edge updates its dual and midpoint.
    pub fn sync_step(&self, state: &AlgState) -> Result<AlgState, AdmmError> {
        let mut next = state.clone();
        self.sync_step_in_place(&mut next)?;
        Ok(next)
    }

    pub fn sync_step_in_place(&self, state: &mut AlgState) -> Result<(), AdmmError> {
        let n = self.problem.num_nodes();
        let mut x_new = DMatrix::zeros(n, self.problem.dim());
        for i in 0..n {
            let xi = self.solve_node(i, &state.x, &state.beta)?;
            x_new.set_row(i, &xi.transpose());
        }
        state.x = x_new;
        for &(i, j) in self.graph().edges() {
            self.update_edge(state, i, j);
        }
        state.k += 1;
        Ok(())
    }

    /// One asynchronous iteration for the chain transition
    /// `xi_prev -> xi_curr`: only `x[xi_curr]` moves, and the dual and
    /// midpoint of edge `{xi_curr, xi_prev}` are refreshed when the two
    /// states differ.
    pub fn async_step(
        &self,
        state: &AlgState,
        chain: &MarkovChain,
        xi_prev: usize,
        xi_curr: usize,
    ) -> Result<AlgState, AdmmError> {
        let mut next = state.clone();
        self.async_step_in_place(&mut next, chain, xi_prev, xi_curr)?;
        Ok(next)
    }

    pub fn async_step_in_place(
        &self,
        state: &mut AlgState,
        chain: &MarkovChain,
        xi_prev: usize,
        xi_curr: usize,
    ) -> Result<(), AdmmError> {
        let n = self.problem.num_nodes();
        if xi_prev >= n || xi_curr >= n || chain.prob(xi_prev, xi_curr) <= 0.0 {
            return Err(AdmmError::InvalidTransition {
                from: xi_prev,
                to: xi_curr,
            });
        }
        if xi_prev != xi_curr && !self.graph().has_edge(xi_curr, xi_prev) {
            return Err(AdmmError::InvalidTransition {
                from: xi_prev,
                to: xi_curr,
            });
        }
        self.activate_in_place(state, xi_curr)?;
        if xi_prev != xi_curr {
            self.update_edge(state, xi_curr, xi_prev);
        }
        Ok(())
    }

    /// Primal-only update of node `i`; the first asynchronous iteration,
    /// which has no incoming transition.
    pub fn activate_in_place(&self, state: &mut AlgState, i: usize) -> Result<(), AdmmError> {
        if i >= self.problem.num_nodes() {
            return Err(AdmmError::InvalidTransition { from: i, to: i });
        }
        let xi = self.solve_node(i, &state.x, &state.beta)?;
        state.x.set_row(i, &xi.transpose());
        state.k += 1;
        state.last_mc_state = Some(i);
        Ok(())
    }

    /// Synchronous image `(x̂, ẑ, β̂)` of `state` without committing it. The
    /// subproblems use the stored auxiliaries `z(k)` as neighbour means.
    pub fn hypothetical_full_update(&self, state: &AlgState) -> Result<FullUpdate, AdmmError> {
        let g = self.graph();
        let n = self.problem.num_nodes();
        let mut x = DMatrix::zeros(n, self.problem.dim());
        for i in 0..n {
            let means: Vec<DVector<f64>> = g
                .neighbors(i)
                .iter()
                .map(|&p| {
                    let q = g.arc_index(i, p).expect("neighbour arc");
                    state.z.row(q).transpose()
                })
                .collect();
            let lam = self.dual_sum(&state.beta, i);
            let xi = self
                .problem
                .objective(i)
                .local_x_update(&lam, &means, self.rho)?;
            x.set_row(i, &xi.transpose());
        }
        let mut beta = state.beta.clone();
        for (q, &(i, j)) in g.arcs().iter().enumerate() {
            let b = state.beta.row(q) + (x.row(i) - x.row(j)) * (0.5 * self.rho);
            beta.set_row(q, &b);
        }
        let z = self.midpoints(&x);
        Ok(FullUpdate { x, z, beta })
    }

    /// Runs `cfg.iterations` steps, recording metrics before the first step
    /// and after each one.
    ///
    /// The asynchronous engine draws `ξ_1, ξ_2, ...` lazily from `chain`
    /// starting at `ξ_0 = cfg.initial_state`; iteration `k` uses the
    /// transition `ξ_{k-1} -> ξ_k` with `ξ_{-1} := ξ_0`, so iteration 0 is a
    /// primal-only update of the initial node.
    pub fn run(
        &self,
        cfg: &RunConfig,
        chain: Option<&MarkovChain>,
        cert: &OptimalCertificate,
    ) -> Result<RunRecord, AdmmError> {
        let start = Instant::now();
        let mut state = self.init_state(None, None)?;
        let mut metrics = Vec::with_capacity(cfg.iterations + 1);
        metrics.push(analysis::metrics_row(self, cert, &state));

        let path = match cfg.engine {
            Engine::Sync => {
                for _ in 0..cfg.iterations {
                    self.sync_step_in_place(&mut state)?;
                    metrics.push(analysis::metrics_row(self, cert, &state));
                }
                None
            }
            Engine::Async => {
                let chain = chain.ok_or(AdmmError::MissingChain)?;
                if chain.num_states() != self.problem.num_nodes() {
                    return Err(AdmmError::ChainSize {
                        chain: chain.num_states(),
                        graph: self.problem.num_nodes(),
                    });
                }
                let mut sampler = chain.sampler(cfg.initial_state, cfg.seed)?;
                let mut states = Vec::with_capacity(cfg.iterations);
                let mut prev = cfg.initial_state;
                for k in 0..cfg.iterations {
                    let curr = if k == 0 {
                        cfg.initial_state
                    } else {
                        sampler.next_state()
                    };
                    states.push(curr);
                    if k == 0 {
                        self.activate_in_place(&mut state, curr)?;
                    } else {
                        self.async_step_in_place(&mut state, chain, prev, curr)?;
                    }
                    metrics.push(analysis::metrics_row(self, cert, &state));
                    prev = curr;
                }
                Some(ChainPath {
                    seed: cfg.seed,
                    initial_state: cfg.initial_state,
                    states,
                })
            }
        };
        Ok(RunRecord {
            config: cfg.clone(),
            metrics,
            path,
            final_state: state,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub engine: Engine,
    pub rho: f64,
    pub iterations: usize,
    pub initial_state: usize,
    /// Chain seed (ignored by the synchronous engine).
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    /// `iterations + 1` rows, starting with the initial state.
    pub metrics: Vec<MetricsRow>,
    /// States `ξ_0, ..., ξ_{T-1}` activated by the asynchronous engine.
    pub path: Option<ChainPath>,
    pub final_state: AlgState,
    pub wall_time_secs: f64,
}
