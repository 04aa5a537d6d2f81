//! Undirected graphs with a fixed arc ordering and their incidence matrices.
//!
//! Every undirected edge `{i, j}` (stored with `i < j`) produces two arcs,
//! `(i, j)` followed immediately by `(j, i)`. Edges are sorted
//! lexicographically, so arc `2e` is the forward arc of edge `e` and arc
//! `2e + 1` its reverse. All per-arc quantities in the crate (duals,
//! auxiliaries, incidence columns) use this ordering.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold separating zero from non-zero singular values.
pub const NULLSPACE_REL_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to parse graph file: {0}")]
    Parse(String),
    #[error("invalid graph: {0}")]
    Validation(String),
    #[error("graph is disconnected: node {0} is unreachable from node 0")]
    Disconnected(usize),
    #[error("numerical error: {0}")]
    Numerical(String),
}

/// On-disk edge list, `{"num_nodes": N, "edges": [[i, j], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeList {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    arcs: Vec<(usize, usize)>,
    arc_index: HashMap<(usize, usize), usize>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a validated, connected graph. Edge endpoints may be given in
    /// either order; they are normalized to `i < j` and sorted.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::Validation("num_nodes must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(GraphError::Validation(format!(
                    "edge ({a}, {b}) references a node id >= {num_nodes}"
                )));
            }
            if a == b {
                return Err(GraphError::Validation(format!("self-loop at node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GraphError::Validation(format!(
                    "duplicate edge ({}, {})",
                    e.0, e.1
                )));
            }
            normalized.push(e);
        }
        normalized.sort_unstable();

        let mut arcs = Vec::with_capacity(2 * normalized.len());
        let mut arc_index = HashMap::with_capacity(2 * normalized.len());
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(i, j) in &normalized {
            arc_index.insert((i, j), arcs.len());
            arcs.push((i, j));
            arc_index.insert((j, i), arcs.len());
            arcs.push((j, i));
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }

        let graph = Graph {
            num_nodes,
            edges: normalized,
            arcs,
            arc_index,
            neighbors,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    pub fn from_edge_list(list: &EdgeList) -> Result<Self, GraphError> {
        let edges: Vec<_> = list.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::new(list.num_nodes, &edges)
    }

    /// Reads a JSON edge list from disk. Non-integer node ids are rejected
    /// by the parser.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| GraphError::Parse(format!("{}: {e}", path.display())))?;
        Graph::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let list: EdgeList =
            serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        Graph::from_edge_list(&list)
    }

    pub fn to_edge_list(&self) -> EdgeList {
        EdgeList {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
        }
    }

    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::new(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Graph::new(n, &edges)
    }

    /// Star with node 0 at the center.
    pub fn star(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (0, i)).collect();
        Graph::new(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Graph::path(n);
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((0, n - 1));
        Graph::new(n, &edges)
    }

    /// Random connected graph: a uniformly random spanning tree (random
    /// attachment order) plus each remaining pair independently with
    /// probability `extra_edge_prob`.
    pub fn random_connected<R: Rng + ?Sized>(
        n: usize,
        extra_edge_prob: f64,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut present = HashSet::new();
        for k in 1..n {
            let parent = order[rng.random_range(0..k)];
            let child = order[k];
            present.insert((parent.min(child), parent.max(child)));
        }
        for i in 0..n {
            for j in i + 1..n {
                if !present.contains(&(i, j)) && rng.random::<f64>() < extra_edge_prob {
                    present.insert((i, j));
                }
            }
        }
        let edges: Vec<_> = present.into_iter().collect();
        Graph::new(n, &edges)
    }

    fn check_connected(&self) -> Result<(), GraphError> {
        let mut visited = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match visited.iter().position(|&v| !v) {
            Some(node) => Err(GraphError::Disconnected(node)),
            None => Ok(()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Edges as `(i, j)` with `i < j`, lexicographically sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    pub fn arc_index(&self, i: usize, j: usize) -> Option<usize> {
        self.arc_index.get(&(i, j)).copied()
    }

    /// Index of the arc pointing the other way.
    pub fn reverse_arc(q: usize) -> usize {
        q ^ 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.arc_index.contains_key(&(i, j))
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.num_nodes
    }

    /// `A = [A1; A2]` (4|E| x N) and `B = [-I; -I]` (4|E| x 2|E|), so that
    /// `A x + B z = 0` encodes `x_i = z_ij = x_j` on every arc.
    pub fn consensus_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.num_arcs();
        let n = self.num_nodes;
        let mut a = DMatrix::zeros(2 * m, n);
        let mut b = DMatrix::zeros(2 * m, m);
        for (q, &(i, j)) in self.arcs.iter().enumerate() {
            a[(q, i)] = 1.0;
            a[(m + q, j)] = 1.0;
            b[(q, q)] = -1.0;
            b[(m + q, q)] = -1.0;
        }
        (a, b)
    }

    pub fn incidence(&self) -> Result<IncidenceMatrices, GraphError> {
        IncidenceMatrices::new(self)
    }
}

#[derive(Debug, Clone)]
pub struct IncidenceMatrices {
    /// Row `q` has a one in the column of the tail of arc `q`.
    pub a1: DMatrix<f64>,
    /// Row `q` has a one in the column of the head of arc `q`.
    pub a2: DMatrix<f64>,
    /// Unoriented incidence, `A1ᵀ + A2ᵀ` (N x 2|E|).
    pub i_plus: DMatrix<f64>,
    /// Oriented incidence, `A1ᵀ - A2ᵀ` (N x 2|E|).
    pub i_minus: DMatrix<f64>,
    pub sigma_max_plus: f64,
    pub sigma_min_minus: f64,
    /// `(I₋ I₋ᵀ + 1 1ᵀ)^{-1}`; `I₋ I₋ᵀ` is twice the Laplacian, so the sum
    /// is positive definite on a connected graph.
    grounded_inverse: DMatrix<f64>,
}

impl IncidenceMatrices {
    pub fn new(g: &Graph) -> Result<Self, GraphError> {
        let m = g.num_arcs();
        let n = g.num_nodes();
        let mut a1 = DMatrix::zeros(m, n);
        let mut a2 = DMatrix::zeros(m, n);
        for (q, &(i, j)) in g.arcs().iter().enumerate() {
            a1[(q, i)] = 1.0;
            a2[(q, j)] = 1.0;
        }
        let i_plus = a1.transpose() + a2.transpose();
        let i_minus = a1.transpose() - a2.transpose();

        let (sigma_max_plus, _) = extreme_singular_values(&i_plus)?;
        let (_, sigma_min_minus) = extreme_singular_values(&i_minus)?;
        let grounded = &i_minus * i_minus.transpose() + DMatrix::from_element(n, n, 1.0);
        let grounded_inverse = grounded
            .cholesky()
            .ok_or_else(|| GraphError::Numerical("grounded Laplacian is not positive definite".into()))?
            .inverse();
        Ok(IncidenceMatrices {
            a1,
            a2,
            i_plus,
            i_minus,
            sigma_max_plus,
            sigma_min_minus,
            grounded_inverse,
        })
    }

    /// Minimum-norm solution of `I₋ beta = rhs` for `rhs` with zero column
    /// sums; the result lies in `range(I₋ᵀ)`.
    pub fn min_norm_dual(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.i_minus.transpose() * (&self.grounded_inverse * rhs)
    }

    /// Orthogonal projector onto `range(I₋ᵀ)` (2|E| x 2|E|).
    pub fn dual_range_projector(&self) -> DMatrix<f64> {
        self.i_minus.transpose() * &self.grounded_inverse * &self.i_minus
    }
}

/// Largest and smallest non-zero singular values, from the eigenvalues of
/// the smaller Gram matrix.
pub fn extreme_singular_values(m: &DMatrix<f64>) -> Result<(f64, f64), GraphError> {
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    if gram.nrows() == 0 {
        return Err(GraphError::Numerical("empty matrix has no singular values".into()));
    }
    let eig = SymmetricEigen::try_new(gram, 1e-15, 10_000)
        .ok_or_else(|| GraphError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let max = sv[0];
    if max <= 0.0 {
        return Err(GraphError::Numerical("matrix is zero".into()));
    }
    let min_nonzero = sv
        .iter()
        .rev()
        .copied()
        .find(|&s| s > NULLSPACE_REL_TOL * max)
        .unwrap_or(max);
    Ok((max, min_nonzero))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_node_graph_has_two_arcs() {
        let g = Graph::from_json(r#"{"num_nodes":2,"edges":[[0,1]]}"#).unwrap();
        assert_eq!(g.arcs(), &[(0, 1), (1, 0)]);
        assert_eq!(g.arc_index(1, 0), Some(1));
    }

    #[test]
    fn path_graph_arc_count() {
        let g = Graph::path(10).unwrap();
        assert_eq!(g.num_arcs(), 18);
    }

    #[test]
    fn isolated_node_is_disconnected() {
        let err = Graph::from_json(r#"{"num_nodes":3,"edges":[[0,1]]}"#).unwrap_err();
        assert!(matches!(err, GraphError::Disconnected(2)));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            Graph::new(3, &[(0, 0), (0, 1), (1, 2)]),
            Err(GraphError::Validation(_))
        ));
        assert!(matches!(
            Graph::new(3, &[(0, 1), (1, 0), (1, 2)]),
            Err(GraphError::Validation(_))
        ));
        assert!(matches!(
            Graph::new(2, &[(0, 2)]),
            Err(GraphError::Validation(_))
        ));
    }

    #[test]
    fn malformed_json_and_floats_rejected() {
        assert!(matches!(
            Graph::from_json(r#"{"num_nodes":2,"edges":[[0,1.5]]}"#),
            Err(GraphError::Parse(_))
        ));
        assert!(matches!(
            Graph::from_json(r#"{"num_nodes":2}"#),
            Err(GraphError::Parse(_))
        ));
        assert!(matches!(Graph::from_json("not json"), Err(GraphError::Parse(_))));
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        std::fs::write(&path, r#"{"num_nodes":3,"edges":[[2,1],[0,1]]}"#).unwrap();
        let g = Graph::load(&path).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.arcs(), &[(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert!(matches!(
            Graph::load(dir.path().join("missing.json")),
            Err(GraphError::Parse(_))
        ));
    }

    #[test]
    fn two_node_incidence() {
        let g = Graph::path(2).unwrap();
        let inc = g.incidence().unwrap();
        // I_minus columns are e0 - e1 and e1 - e0; its only non-zero
        // singular value is sqrt(1 + 1 + 1 + 1) = 2 by hand.
        assert_eq!(inc.i_minus.column(0).as_slice(), &[1.0, -1.0]);
        assert_eq!(inc.i_minus.column(1).as_slice(), &[-1.0, 1.0]);
        assert_relative_eq!(inc.sigma_min_minus, 2.0, max_relative = 1e-10);
        assert_relative_eq!(inc.sigma_max_plus, 2.0, max_relative = 1e-10);
    }

    #[test]
    fn complete_graph_sigma_matches_dense_svd() {
        let g = Graph::complete(3).unwrap();
        let inc = g.incidence().unwrap();
        let mut explicit = DMatrix::zeros(3, 6);
        for (q, &(i, j)) in g.arcs().iter().enumerate() {
            explicit[(i, q)] = 1.0;
            explicit[(j, q)] = 1.0;
        }
        assert_eq!(explicit, inc.i_plus);
        let svd = explicit.svd(false, false);
        let max = svd.singular_values.max();
        assert_relative_eq!(inc.sigma_max_plus, max, max_relative = 1e-10);
        // signless Laplacian of K3 has top eigenvalue 4, Gram = 2 * that
        assert_relative_eq!(inc.sigma_max_plus, 8f64.sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn i_minus_annihilates_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..9 {
            let g = Graph::random_connected(n, 0.4, &mut rng).unwrap();
            let inc = g.incidence().unwrap();
            let ones = DVector::from_element(n, 1.0);
            assert_eq!((inc.i_minus.transpose() * ones).norm(), 0.0);
        }
    }

    #[test]
    fn consensus_matrices_two_node() {
        let g = Graph::path(2).unwrap();
        let (a, b) = g.consensus_matrices();
        let x = DVector::from_vec(vec![5.0, 5.0]);
        let z = DVector::from_vec(vec![5.0, 5.0]);
        assert_eq!((&a * &x + &b * &z).norm(), 0.0);

        let x = DVector::from_vec(vec![1.0, 0.0]);
        let z = DVector::from_vec(vec![0.5, 0.5]);
        let r = &a * &x + &b * &z;
        // rows: A1 x - z = (1, 0) - (.5, .5); A2 x - z = (0, 1) - (.5, .5)
        assert_eq!(r.as_slice(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn consensus_matrices_k3_rational_grid() {
        let g = Graph::complete(3).unwrap();
        let inc = g.incidence().unwrap();
        let (a, b) = g.consensus_matrices();
        let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for &x0 in &grid {
            for &x1 in &grid {
                for &x2 in &grid {
                    let x = DVector::from_vec(vec![x0, x1, x2]);
                    let z = inc.i_plus.transpose() * &x * 0.5;
                    let res = (&a * &x + &b * &z).norm();
                    let consensus = x0 == x1 && x1 == x2;
                    assert_eq!(res == 0.0, consensus, "x = {x:?}");
                }
            }
        }
    }

    #[test]
    fn incidence_is_deterministic() {
        let e = [(3, 1), (0, 1), (2, 3), (0, 2)];
        let g1 = Graph::new(4, &e).unwrap();
        let mut rev = e;
        rev.reverse();
        let g2 = Graph::new(4, &rev).unwrap();
        assert_eq!(g1.arcs(), g2.arcs());
        let (i1, i2) = (g1.incidence().unwrap(), g2.incidence().unwrap());
        assert_eq!(i1.i_plus, i2.i_plus);
        assert_eq!(i1.i_minus, i2.i_minus);
        assert_eq!(i1.sigma_min_minus.to_bits(), i2.sigma_min_minus.to_bits());
    }

    #[test]
    fn min_norm_dual_and_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(2..=8);
            let g = Graph::random_connected(n, 0.5, &mut rng).unwrap();
            let inc = g.incidence().unwrap();
            let mut rhs = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
            for c in 0..2 {
                let mean = rhs.column(c).mean();
                rhs.column_mut(c).add_scalar_mut(-mean);
            }
            let beta = inc.min_norm_dual(&rhs);
            assert!((&inc.i_minus * &beta - &rhs).amax() < 1e-10);
            let proj = inc.dual_range_projector();
            assert!((&proj * &beta - &beta).amax() < 1e-10);
            assert!((&proj * &proj - &proj).amax() < 1e-10);
            assert!((&proj - proj.transpose()).amax() < 1e-12);
            // projector fixes range(I₋ᵀ) and has rank N - 1
            assert!((&proj * inc.i_minus.transpose() - inc.i_minus.transpose()).amax() < 1e-10);
            assert_relative_eq!(proj.trace(), (n - 1) as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn rank_of_i_minus_is_n_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 2..9 {
            let g = Graph::random_connected(n, 0.5, &mut rng).unwrap();
            let inc = g.incidence().unwrap();
            let svd = inc.i_minus.clone().svd(false, false);
            let max = svd.singular_values.max();
            let rank = svd
                .singular_values
                .iter()
                .filter(|&&s| s > NULLSPACE_REL_TOL * max)
                .count();
            assert_eq!(rank, n - 1);
            for (q, &(i, j)) in g.arcs().iter().enumerate() {
                assert_eq!(g.arc_index(j, i), Some(Graph::reverse_arc(q)));
                assert_eq!(g.arc_index(i, j), Some(q));
            }
        }
    }
}
