//! Node-activation Markov chains: construction, stationary distribution,
//! geometric mixing constants and path simulation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;

/// Row sums must be within this of one.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Horizon used to calibrate the mixing prefactor when none is given.
pub const DEFAULT_K_CHECK: usize = 500;
/// Floor applied to both mixing constants.
pub const MIXING_FLOOR: f64 = 1e-12;
/// `|P^k - 1πᵀ|` entries below this are treated as roundoff.
pub const ROUNDOFF_FLOOR: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("invalid target distribution: {0}")]
    InvalidDistribution(String),
    #[error("alpha must lie in {range}, got {alpha}")]
    InvalidAlpha { alpha: f64, range: &'static str },
    #[error("transition matrix is not row-stochastic: {0}")]
    NotStochastic(String),
    #[error("transition P[{from}][{to}] > 0 but {{{from}, {to}}} is not an edge of the graph")]
    SupportViolation { from: usize, to: usize },
    #[error("chain is reducible: node {0} cannot reach every other node")]
    Reducible(usize),
    #[error("chain is periodic (second eigenvalue modulus {gamma} is within 1e-10 of one)")]
    PeriodicChain { gamma: f64 },
    #[error("initial state {0} out of range")]
    InvalidState(usize),
    #[error("numerical error: {0}")]
    Numerical(String),
}

/// Constants `(gamma, b)` with `|P^k[i][j] - pi[j]| <= b gamma^k` for all
/// `k <= k_check`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingConstants {
    pub gamma: f64,
    pub b: f64,
    pub k_check: usize,
}

#[derive(Debug, Clone)]
pub struct MarkovChain {
    p: DMatrix<f64>,
    pi: DVector<f64>,
    p_min: f64,
    p_max: f64,
    period: usize,
    mixing: Option<MixingConstants>,
    warnings: Vec<String>,
}

impl MarkovChain {
    /// Validates an explicit transition matrix. When a graph is given, every
    /// positive off-diagonal entry must sit on one of its edges; self-loops
    /// are always allowed.
    pub fn from_matrix(p: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self, MarkovError> {
        Self::with_k_check(p, graph, DEFAULT_K_CHECK)
    }

    pub fn with_k_check(
        p: DMatrix<f64>,
        graph: Option<&Graph>,
        k_check: usize,
    ) -> Result<Self, MarkovError> {
        let n = p.nrows();
        if n == 0 || p.ncols() != n {
            return Err(MarkovError::NotStochastic(format!(
                "expected a non-empty square matrix, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if let Some(g) = graph {
            if g.num_nodes() != n {
                return Err(MarkovError::NotStochastic(format!(
                    "matrix has {n} states but the graph has {} nodes",
                    g.num_nodes()
                )));
            }
        }
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = p[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(MarkovError::NotStochastic(format!(
                        "entry P[{i}][{j}] = {v} is negative or non-finite"
                    )));
                }
                if v > 0.0 && i != j {
                    if let Some(g) = graph {
                        if !g.has_edge(i, j) {
                            return Err(MarkovError::SupportViolation { from: i, to: j });
                        }
                    }
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::NotStochastic(format!(
                    "row {i} sums to {sum}"
                )));
            }
        }
        check_irreducible(&p)?;
        let period = period(&p);
        let pi = stationary_distribution(&p)?;

        let off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|ij| p[ij])
            .filter(|&v| v > 0.0)
            .collect();
        let p_min = off.iter().copied().fold(f64::INFINITY, f64::min);
        let p_max = off.iter().copied().fold(0.0, f64::max);

        let mut warnings = Vec::new();
        let mixing = if period == 1 {
            Some(mixing_constants(&p, &pi, k_check)?)
        } else {
            warnings.push(format!(
                "AperiodicityWarning: chain has period {period}; mixing constants are undefined"
            ));
            None
        };
        Ok(MarkovChain {
            p,
            pi,
            p_min: if off.is_empty() { 0.0 } else { p_min },
            p_max,
            period,
            mixing,
            warnings,
        })
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn num_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.p[(i, j)]
    }

    pub fn stationary(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn pi_min(&self) -> f64 {
        self.pi.min()
    }

    pub fn pi_max(&self) -> f64 {
        self.pi.max()
    }

    /// Smallest strictly positive off-diagonal transition probability.
    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    /// Largest off-diagonal transition probability.
    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn is_aperiodic(&self) -> bool {
        self.period == 1
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Mixing constants calibrated at construction (horizon
    /// [`DEFAULT_K_CHECK`] unless built with [`MarkovChain::with_k_check`]).
    pub fn mixing(&self) -> Result<MixingConstants, MarkovError> {
        self.mixing.ok_or(MarkovError::PeriodicChain { gamma: 1.0 })
    }

    /// Recalibrates `(gamma, b)` over a different horizon.
    pub fn mixing_constants(&self, k_check: usize) -> Result<MixingConstants, MarkovError> {
        mixing_constants(&self.p, &self.pi, k_check)
    }

    pub fn gamma(&self) -> Option<f64> {
        self.mixing.map(|m| m.gamma)
    }

    pub fn b(&self) -> Option<f64> {
        self.mixing.map(|m| m.b)
    }

    /// Inverse-CDF sampler over the rows of `P`.
    pub fn sampler(&self, i0: usize, seed: u64) -> Result<ChainSampler, MarkovError> {
        ChainSampler::new(self, i0, seed)
    }

    /// Path `ξ_0 = i0, ξ_1, ..., ξ_steps`.
    pub fn simulate(&self, i0: usize, steps: usize, seed: u64) -> Result<ChainPath, MarkovError> {
        let mut sampler = self.sampler(i0, seed)?;
        let mut states = Vec::with_capacity(steps + 1);
        states.push(i0);
        for _ in 0..steps {
            states.push(sampler.next_state());
        }
        Ok(ChainPath {
            seed,
            initial_state: i0,
            states,
        })
    }
}

/// Metropolis–Hastings chain on `g` with stationary distribution `target`
/// (uniform when `None`): `P[i][j] = min(1, π_j d_i / (π_i d_j)) / d_i` for
/// neighbours, residual mass on the diagonal.
pub fn metropolis_hastings(g: &Graph, target: Option<&[f64]>) -> Result<MarkovChain, MarkovError> {
    let n = g.num_nodes();
    let uniform = vec![1.0 / n as f64; n];
    let pi = match target {
        Some(t) => {
            if t.len() != n {
                return Err(MarkovError::InvalidDistribution(format!(
                    "target has {} entries, graph has {n} nodes",
                    t.len()
                )));
            }
            if let Some(v) = t.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(MarkovError::InvalidDistribution(format!(
                    "entries must be strictly positive, found {v}"
                )));
            }
            let s: f64 = t.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(MarkovError::InvalidDistribution(format!(
                    "entries sum to {s}, expected 1"
                )));
            }
            t
        }
        None => &uniform[..],
    };
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let di = g.degree(i) as f64;
        let mut off = 0.0;
        for &j in g.neighbors(i) {
            let dj = g.degree(j) as f64;
            let v = (pi[j] * di / (pi[i] * dj)).min(1.0) / di;
            p[(i, j)] = v;
            off += v;
        }
        p[(i, i)] = (1.0 - off).max(0.0);
    }
    MarkovChain::from_matrix(p, Some(g))
}

/// Lazy random walk on the path `0 - 1 - ... - (N-1)`: interior nodes move
/// to each neighbour with probability `alpha`; the end rows are
/// `P[0][0] = 1 - alpha, P[0][1] = alpha` and
/// `P[N-1][N-1] = alpha, P[N-1][N-2] = 1 - alpha`.
pub fn random_walk_chain(n: usize, alpha: f64) -> Result<MarkovChain, MarkovError> {
    if n < 2 {
        return Err(MarkovError::NotStochastic(
            "random walk needs at least two states".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(MarkovError::InvalidAlpha {
            alpha,
            range: "(0, 1/2)",
        });
    }
    let g = Graph::path(n).map_err(|e| MarkovError::Numerical(e.to_string()))?;
    MarkovChain::from_matrix(random_walk_matrix(n, alpha), Some(&g))
}

fn random_walk_matrix(n: usize, alpha: f64) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for i in 1..n - 1 {
        p[(i, i - 1)] = alpha;
        p[(i, i + 1)] = alpha;
        p[(i, i)] = 1.0 - 2.0 * alpha;
    }
    p[(0, 1)] = alpha;
    p[(0, 0)] = 1.0 - alpha;
    p[(n - 1, n - 1)] = alpha;
    p[(n - 1, n - 2)] = 1.0 - alpha;
    p
}

/// Closed-form profile `π_i = β^i (1 - β) / (1 - β^N)`, `β = 1 / (1 - α)`,
/// for `i = 1..N`, renormalized. Comparison only; chains always use their
/// numerically computed stationary distribution.
pub fn stationary_formula(n: usize, alpha: f64) -> Result<Vec<f64>, MarkovError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MarkovError::InvalidAlpha {
            alpha,
            range: "(0, 1)",
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let beta = 1.0 / (1.0 - alpha);
    let denom = 1.0 - beta.powi(n as i32);
    let raw: Vec<f64> = (1..=n)
        .map(|i| {
            if n == 1 {
                1.0
            } else {
                beta.powi(i as i32) * (1.0 - beta) / denom
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Metropolis–Hastings chain on the path graph targeting
/// [`stationary_formula`]. Valid for every `alpha` in `(0, 1)`.
pub fn geometric_profile_chain(n: usize, alpha: f64) -> Result<MarkovChain, MarkovError> {
    let g = Graph::path(n).map_err(|e| MarkovError::Numerical(e.to_string()))?;
    let target = stationary_formula(n, alpha)?;
    metropolis_hastings(&g, Some(&target))
}

/// Side-by-side report of a chain's numerically computed stationary
/// distribution against the closed-form profile and a pair of externally
/// reported extremes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryComparison {
    pub alpha: f64,
    pub numeric: Vec<f64>,
    pub formula: Vec<f64>,
    pub numeric_min: f64,
    pub numeric_max: f64,
    pub formula_min: f64,
    pub formula_max: f64,
    pub reported_min: f64,
    pub reported_max: f64,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub formula_matches_reported: bool,
    pub numeric_matches_reported: bool,
    pub numeric_matches_formula: bool,
    pub verdict: String,
}

pub fn compare_stationary(
    chain: &MarkovChain,
    alpha: f64,
    reported_min: f64,
    reported_max: f64,
    tolerance: f64,
) -> Result<StationaryComparison, MarkovError> {
    let n = chain.num_states();
    let numeric: Vec<f64> = chain.stationary().iter().copied().collect();
    let formula = stationary_formula(n, alpha)?;
    let (numeric_min, numeric_max) = min_max(&numeric);
    let (formula_min, formula_max) = min_max(&formula);
    let max_abs_diff = numeric
        .iter()
        .zip(&formula)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let within = |lo: f64, hi: f64| {
        (lo - reported_min).abs() <= tolerance && (hi - reported_max).abs() <= tolerance
    };
    let formula_matches_reported = within(formula_min, formula_max);
    let numeric_matches_reported = within(numeric_min, numeric_max);
    let numeric_matches_formula = max_abs_diff <= tolerance;
    let verdict = format!(
        "closed form {} reported extremes ({formula_min:.4}, {formula_max:.4}) vs ({reported_min}, {reported_max}); \
         chain's numeric pi {} them ({numeric_min:.4}, {numeric_max:.4}); \
         numeric vs closed form max |diff| = {max_abs_diff:.4} ({})",
        if formula_matches_reported { "AGREES with" } else { "DISAGREES with" },
        if numeric_matches_reported { "agrees with" } else { "DISAGREES with" },
        if numeric_matches_formula { "agree" } else { "DISAGREE" },
    );
    Ok(StationaryComparison {
        alpha,
        numeric,
        formula,
        numeric_min,
        numeric_max,
        formula_min,
        formula_max,
        reported_min,
        reported_max,
        tolerance,
        max_abs_diff,
        formula_matches_reported,
        numeric_matches_reported,
        numeric_matches_formula,
        verdict,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Left principal eigenvector of `P`, normalized to a probability vector.
/// Solves `(Pᵀ - I) π = 0` with the last equation replaced by `Σ π = 1`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>, MarkovError> {
    let n = p.nrows();
    let mut sys = p.transpose() - DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for j in 0..n {
        sys[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let pi = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MarkovError::Numerical("stationary system is singular".into()))?;
    // clip roundoff negatives, then renormalize
    let pi = pi.map(|v| v.max(0.0));
    let s = pi.sum();
    Ok(pi / s)
}

/// Second-largest eigenvalue modulus of `P` and the smallest prefactor `b`
/// making `|P^k - 1πᵀ| <= b γ^k` hold entrywise for `0 <= k <= k_check`.
pub fn mixing_constants(
    p: &DMatrix<f64>,
    pi: &DVector<f64>,
    k_check: usize,
) -> Result<MixingConstants, MarkovError> {
    let n = p.nrows();
    let gamma = slem(p, pi).max(MIXING_FLOOR);
    if gamma >= 1.0 - 1e-10 {
        return Err(MarkovError::PeriodicChain { gamma });
    }
    let mut b: f64 = MIXING_FLOOR;
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut gk = 1.0f64;
    for k in 0..=k_check {
        if k > 0 {
            power = &power * p;
            gk *= gamma;
        }
        if gk < 1e-300 {
            break;
        }
        for i in 0..n {
            for j in 0..n {
                let dev = (power[(i, j)] - pi[j]).abs();
                if dev > ROUNDOFF_FLOOR {
                    b = b.max(dev / gk);
                }
            }
        }
    }
    Ok(MixingConstants { gamma, b, k_check })
}

/// Second-largest eigenvalue modulus of `P`.
///
/// Reversible chains (`pi_i P_ij = pi_j P_ji`) have a real spectrum, read
/// off the symmetric matrix `D^{1/2} P D^{-1/2}`, `D = diag(pi)`. Other
/// chains go through a capped real Schur decomposition, dropping the
/// eigenvalue closest to one; if that does not converge the modulus is
/// estimated as `||(P - 1 piᵀ)^m||^(1/m)` with `m = 2^12`.
pub fn slem(p: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    let n = p.nrows();
    if n < 2 {
        return 0.0;
    }
    let reversible = (0..n).all(|i| {
        (0..n).all(|j| (pi[i] * p[(i, j)] - pi[j] * p[(j, i)]).abs() <= 1e-13)
    });
    let eig: Vec<nalgebra::Complex<f64>> = if reversible {
        let s = DMatrix::from_fn(n, n, |i, j| p[(i, j)] * (pi[i] / pi[j]).sqrt());
        let s = (&s + s.transpose()) * 0.5;
        s.symmetric_eigenvalues()
            .iter()
            .map(|&v| nalgebra::Complex::new(v, 0.0))
            .collect()
    } else {
        match nalgebra::Schur::try_new(p.clone(), f64::EPSILON, 10_000) {
            Some(schur) => schur.complex_eigenvalues().iter().copied().collect(),
            None => return deflated_spectral_radius(p, pi),
        }
    };
    let one = nalgebra::Complex::new(1.0, 0.0);
    let perron = (0..n)
        .min_by(|&a, &b| (eig[a] - one).norm().total_cmp(&(eig[b] - one).norm()))
        .unwrap_or(0);
    (0..n)
        .filter(|&k| k != perron)
        .map(|k| eig[k].norm())
        .fold(0.0, f64::max)
}

fn deflated_spectral_radius(p: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    let n = p.nrows();
    let mut m = p - DVector::from_element(n, 1.0) * pi.transpose();
    let mut log_scale = 0.0;
    for _ in 0..12 {
        m = &m * &m;
        let norm = m.norm();
        if norm == 0.0 {
            return 0.0;
        }
        // keep the iterate normalized; track the scale in log space
        log_scale = 2.0 * log_scale + norm.ln();
        m /= norm;
    }
    (log_scale / 4096.0).exp()
}

fn check_irreducible(p: &DMatrix<f64>) -> Result<(), MarkovError> {
    let n = p.nrows();
    for transpose in [false, true] {
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let w = if transpose { p[(v, u)] } else { p[(u, v)] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(v) = seen.iter().position(|&s| !s) {
            return Err(MarkovError::Reducible(if transpose { v } else { 0 }));
        }
    }
    Ok(())
}

/// Period of an irreducible chain: gcd over support arcs `(u, v)` of
/// `level(u) + 1 - level(v)` where `level` is BFS depth from state 0.
pub fn period(p: &DMatrix<f64>) -> usize {
    let n = p.nrows();
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if p[(u, v)] > 0.0 && level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g = 0usize;
    for u in 0..n {
        for v in 0..n {
            if p[(u, v)] > 0.0 && level[u] != usize::MAX && level[v] != usize::MAX {
                let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
                g = gcd(g, diff);
            }
        }
    }
    g.max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Realized chain trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPath {
    pub seed: u64,
    pub initial_state: usize,
    pub states: Vec<usize>,
}

/// Draws successive states by inverse CDF over the current row, scanning
/// columns in ascending node order.
#[derive(Debug, Clone)]
pub struct ChainSampler {
    cumulative: Vec<Vec<f64>>,
    current: usize,
    rng: ChaCha8Rng,
}

impl ChainSampler {
    fn new(chain: &MarkovChain, i0: usize, seed: u64) -> Result<Self, MarkovError> {
        let n = chain.num_states();
        if i0 >= n {
            return Err(MarkovError::InvalidState(i0));
        }
        let cumulative = (0..n)
            .map(|i| {
                let mut acc = 0.0;
                (0..n)
                    .map(|j| {
                        acc += chain.prob(i, j);
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(ChainSampler {
            cumulative,
            current: i0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn next_state(&mut self) -> usize {
        let u: f64 = self.rng.random();
        let row = &self.cumulative[self.current];
        let next = match row.iter().position(|&c| u < c) {
            Some(j) => j,
            // u landed in the roundoff gap above the last partial sum
            None => row
                .iter()
                .enumerate()
                .rev()
                .find(|&(j, &c)| j == 0 || c > row[j - 1])
                .map(|(j, _)| j)
                .unwrap_or(0),
        };
        self.current = next;
        next
    }
}
