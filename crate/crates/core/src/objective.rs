//! Local objectives `f_i`, the per-node ADMM subproblem and the centralized
//! reference solver.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::graph::Graph;

/// Gradient-norm tolerance of the per-node subproblem solver.
pub const SUBPROBLEM_TOL: f64 = 1e-10;
/// Gradient-norm tolerance of the centralized solver.
pub const CENTRALIZED_TOL: f64 = 1e-12;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;
const MAX_NEWTON_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid objective: {0}")]
    Invalid(String),
    #[error("Newton solver diverged: {0}")]
    SolverDivergence(String),
}

/// A user-supplied strongly convex, L-smooth function.
pub trait SmoothObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn strong_convexity(&self) -> f64;
    fn lipschitz(&self) -> f64;
}

#[derive(Clone)]
pub enum ObjectiveKind {
    /// `f(x) = ||x - target||²`.
    Quadratic { target: DVector<f64> },
    /// `f(x) = Σ_k log(1 + exp(-y_k a_kᵀx)) + (μ/2)||x||²` with rows `a_k`
    /// of `features` and labels `y_k ∈ {-1, +1}`.
    Logistic {
        features: DMatrix<f64>,
        labels: DVector<f64>,
        mu: f64,
    },
    Custom(Arc<dyn SmoothObjective>),
}

impl fmt::Debug for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::Quadratic { target } => f
                .debug_struct("Quadratic")
                .field("target", &target.as_slice())
                .finish(),
            ObjectiveKind::Logistic { features, mu, .. } => f
                .debug_struct("Logistic")
                .field("samples", &features.nrows())
                .field("mu", mu)
                .finish(),
            ObjectiveKind::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalObjective {
    kind: ObjectiveKind,
    dim: usize,
    nu: f64,
    lipschitz: f64,
}

impl LocalObjective {
    pub fn quadratic(target: DVector<f64>) -> Result<Self, ObjectiveError> {
        if target.is_empty() {
            return Err(ObjectiveError::Invalid("dimension must be at least 1".into()));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite("quadratic target"));
        }
        Ok(LocalObjective {
            dim: target.len(),
            kind: ObjectiveKind::Quadratic { target },
            nu: 2.0,
            lipschitz: 2.0,
        })
    }

    pub fn logistic(
        features: DMatrix<f64>,
        labels: DVector<f64>,
        mu: f64,
    ) -> Result<Self, ObjectiveError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ObjectiveError::Invalid(format!(
                "ridge weight must be positive, got {mu}"
            )));
        }
        if features.nrows() != labels.len() {
            return Err(ObjectiveError::Dimension {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if features.ncols() == 0 {
            return Err(ObjectiveError::Invalid("dimension must be at least 1".into()));
        }
        if features.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite("logistic data"));
        }
        let gram = features.transpose() * &features;
        let top = SymmetricEigen::new(gram).eigenvalues.max().max(0.0);
        Ok(LocalObjective {
            dim: features.ncols(),
            kind: ObjectiveKind::Logistic {
                features,
                labels,
                mu,
            },
            nu: mu,
            lipschitz: mu + top / 4.0,
        })
    }

    pub fn custom(f: Arc<dyn SmoothObjective>) -> Result<Self, ObjectiveError> {
        let (nu, l) = (f.strong_convexity(), f.lipschitz());
        if !(nu > 0.0 && l >= nu) {
            return Err(ObjectiveError::Invalid(format!(
                "need 0 < nu <= L, got nu = {nu}, L = {l}"
            )));
        }
        Ok(LocalObjective {
            dim: f.dim(),
            kind: ObjectiveKind::Custom(f),
            nu,
            lipschitz: l,
        })
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn strong_convexity(&self) -> f64 {
        self.nu
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            ObjectiveKind::Quadratic { target } => (x - target).norm_squared(),
            ObjectiveKind::Logistic {
                features,
                labels,
                mu,
            } => {
                let margins = features * x;
                let loss: f64 = margins
                    .iter()
                    .zip(labels.iter())
                    .map(|(m, y)| softplus(-y * m))
                    .sum();
                loss + 0.5 * mu * x.norm_squared()
            }
            ObjectiveKind::Custom(f) => f.value(x),
        }
    }

    fn gradient_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ObjectiveKind::Quadratic { target } => (x - target) * 2.0,
            ObjectiveKind::Logistic {
                features,
                labels,
                mu,
            } => {
                let margins = features * x;
                // d/dm log(1 + e^{-y m}) = -y σ(-y m)
                let w = DVector::from_iterator(
                    labels.len(),
                    margins
                        .iter()
                        .zip(labels.iter())
                        .map(|(m, y)| -y * sigmoid(-y * m)),
                );
                features.transpose() * w + x * *mu
            }
            ObjectiveKind::Custom(f) => f.gradient(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        if x.len() != self.dim {
            return Err(ObjectiveError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite("gradient argument"));
        }
        let g = self.gradient_unchecked(x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite("gradient"));
        }
        Ok(g)
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            ObjectiveKind::Quadratic { .. } => DMatrix::identity(self.dim, self.dim) * 2.0,
            ObjectiveKind::Logistic {
                features,
                labels,
                mu,
            } => {
                let margins = features * x;
                let s = DVector::from_iterator(
                    labels.len(),
                    margins.iter().zip(labels.iter()).map(|(m, y)| {
                        let p = sigmoid(-y * m);
                        p * (1.0 - p)
                    }),
                );
                let weighted = DMatrix::from_fn(features.nrows(), features.ncols(), |r, c| {
                    features[(r, c)] * s[r]
                });
                features.transpose() * weighted + DMatrix::identity(self.dim, self.dim) * *mu
            }
            ObjectiveKind::Custom(f) => f.hessian(x),
        }
    }

    /// Unique minimizer of
    /// `f(x) + 2 lambda_sumᵀx + rho Σ_p ||x - m_p||²`.
    ///
    /// Closed form for quadratics; damped Newton otherwise.
    pub fn local_x_update(
        &self,
        lambda_sum: &DVector<f64>,
        neighbor_means: &[DVector<f64>],
        rho: f64,
    ) -> Result<DVector<f64>, ObjectiveError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(ObjectiveError::Invalid(format!("rho must be positive, got {rho}")));
        }
        let degree = neighbor_means.len() as f64;
        let mean_sum = neighbor_means
            .iter()
            .fold(DVector::zeros(self.dim), |acc, m| acc + m);

        if let ObjectiveKind::Quadratic { target } = &self.kind {
            let x = (target * 2.0 - lambda_sum * 2.0 + &mean_sum * (2.0 * rho))
                / (2.0 + 2.0 * rho * degree);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ObjectiveError::NonFinite("x-update"));
            }
            return Ok(x);
        }

        let curvature = 2.0 * rho * degree;
        let value = |x: &DVector<f64>| {
            self.value(x)
                + 2.0 * lambda_sum.dot(x)
                + rho
                    * neighbor_means
                        .iter()
                        .map(|m| (x - m).norm_squared())
                        .sum::<f64>()
        };
        let grad = |x: &DVector<f64>| -> Result<DVector<f64>, ObjectiveError> {
            Ok(self.gradient(x)? + lambda_sum * 2.0 + (x * degree - &mean_sum) * (2.0 * rho))
        };
        let hess = |x: &DVector<f64>| {
            self.hessian(x) + DMatrix::identity(self.dim, self.dim) * curvature
        };
        let start = if degree > 0.0 {
            &mean_sum / degree
        } else {
            DVector::zeros(self.dim)
        };
        newton(start, value, grad, hess, SUBPROBLEM_TOL)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Damped Newton with Armijo backtracking (halving). Near the optimum the
/// objective values stop resolving the decrease, so a step that reduces the
/// gradient norm is accepted as well.
pub fn newton<V, G, H>(
    mut x: DVector<f64>,
    value: V,
    grad: G,
    hess: H,
    tol: f64,
) -> Result<DVector<f64>, ObjectiveError>
where
    V: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>, ObjectiveError>,
    H: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut g = grad(&x)?;
    for _ in 0..MAX_NEWTON_ITERS {
        let gnorm = g.norm();
        if gnorm <= tol {
            return Ok(x);
        }
        let step = hess(&x)
            .cholesky()
            .ok_or_else(|| {
                ObjectiveError::SolverDivergence("Hessian is not positive definite".into())
            })?
            .solve(&(-&g));
        let slope = g.dot(&step);
        let f0 = value(&x);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &step * t;
            let f1 = value(&trial);
            if f1.is_finite() && f1 <= f0 + ARMIJO_C * t * slope {
                accepted = Some(trial);
                break;
            }
            if let Ok(g1) = grad(&trial) {
                if g1.norm() < gnorm {
                    accepted = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            if step.norm() <= 1e-14 * (1.0 + x.norm()) {
                // stalled at roundoff
                return Ok(x);
            }
            return Err(ObjectiveError::SolverDivergence(format!(
                "line search failed {MAX_BACKTRACKS} times (gradient norm {gnorm:e})"
            )));
        };
        let moved = (&next - &x).norm();
        x = next;
        g = grad(&x)?;
        if moved <= 1e-15 * (1.0 + x.norm()) && g.norm() <= tol.sqrt() {
            return Ok(x);
        }
    }
    if g.norm() <= tol.sqrt() {
        return Ok(x);
    }
    Err(ObjectiveError::SolverDivergence(format!(
        "no convergence after {MAX_NEWTON_ITERS} iterations (gradient norm {:e})",
        g.norm()
    )))
}

/// The consensus problem: a connected graph with one local objective per
/// node.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    graph: Graph,
    objectives: Vec<LocalObjective>,
    dim: usize,
    nu: f64,
    lipschitz: f64,
}

impl ProblemInstance {
    pub fn new(graph: Graph, objectives: Vec<LocalObjective>) -> Result<Self, ObjectiveError> {
        if objectives.len() != graph.num_nodes() {
            return Err(ObjectiveError::Dimension {
                expected: graph.num_nodes(),
                got: objectives.len(),
            });
        }
        let dim = objectives[0].dim();
        if let Some(o) = objectives.iter().find(|o| o.dim() != dim) {
            return Err(ObjectiveError::Dimension {
                expected: dim,
                got: o.dim(),
            });
        }
        let nu = objectives
            .iter()
            .map(LocalObjective::strong_convexity)
            .fold(f64::INFINITY, f64::min);
        let lipschitz = objectives
            .iter()
            .map(LocalObjective::lipschitz)
            .fold(0.0, f64::max);
        if !(nu > 0.0) {
            return Err(ObjectiveError::Invalid("strong convexity modulus must be positive".into()));
        }
        Ok(ProblemInstance {
            graph,
            objectives,
            dim,
            nu,
            lipschitz,
        })
    }

    /// `f_i(x) = ||x - targets[i]||²`.
    pub fn quadratic(graph: Graph, targets: Vec<DVector<f64>>) -> Result<Self, ObjectiveError> {
        let objectives = targets
            .into_iter()
            .map(LocalObjective::quadratic)
            .collect::<Result<Vec<_>, _>>()?;
        ProblemInstance::new(graph, objectives)
    }

    /// Quadratics centred at noisy measurements `a_i = x_true + noise_std·N(0, I)`,
    /// drawn node by node from a ChaCha8 stream seeded with `data_seed`.
    pub fn estimation(
        graph: Graph,
        x_true: &DVector<f64>,
        noise_std: f64,
        data_seed: u64,
    ) -> Result<Self, ObjectiveError> {
        let targets = estimation_targets(graph.num_nodes(), x_true, noise_std, data_seed);
        ProblemInstance::quadratic(graph, targets)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn objectives(&self) -> &[LocalObjective] {
        &self.objectives
    }

    pub fn objective(&self, i: usize) -> &LocalObjective {
        &self.objectives[i]
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `Σ_i f_i(x_i)` with `x_i` the rows of `x`.
    pub fn total_value(&self, x: &DMatrix<f64>) -> f64 {
        self.objectives
            .iter()
            .enumerate()
            .map(|(i, f)| f.value(&x.row(i).transpose()))
            .sum()
    }

    /// Stacked gradients, row `i` = `∇f_i(x_i)`.
    pub fn stacked_gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, ObjectiveError> {
        let mut out = DMatrix::zeros(self.num_nodes(), self.dim);
        for (i, f) in self.objectives.iter().enumerate() {
            let g = f.gradient(&x.row(i).transpose())?;
            out.set_row(i, &g.transpose());
        }
        Ok(out)
    }

    /// Minimizer of `Σ_i f_i(x)` over a single shared `x`.
    pub fn centralized_solve(&self) -> Result<DVector<f64>, ObjectiveError> {
        centralized_solve(&self.objectives)
    }
}

pub fn estimation_targets(
    n: usize,
    x_true: &DVector<f64>,
    noise_std: f64,
    data_seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    (0..n)
        .map(|_| {
            DVector::from_iterator(
                x_true.len(),
                x_true.iter().map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + noise_std * z
                }),
            )
        })
        .collect()
}

pub fn centralized_solve(objectives: &[LocalObjective]) -> Result<DVector<f64>, ObjectiveError> {
    let dim = objectives
        .first()
        .ok_or_else(|| ObjectiveError::Invalid("no objectives".into()))?
        .dim();
    let value = |x: &DVector<f64>| objectives.iter().map(|f| f.value(x)).sum::<f64>();
    let grad = |x: &DVector<f64>| -> Result<DVector<f64>, ObjectiveError> {
        let mut g = DVector::zeros(dim);
        for f in objectives {
            g += f.gradient(x)?;
        }
        Ok(g)
    };
    let hess = |x: &DVector<f64>| {
        objectives
            .iter()
            .fold(DMatrix::zeros(dim, dim), |acc, f| acc + f.hessian(x))
    };
    newton(DVector::zeros(dim), value, grad, hess, CENTRALIZED_TOL)
}
