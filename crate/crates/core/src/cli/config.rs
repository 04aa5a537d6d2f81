use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::admm::Engine;
use crate::graph::{EdgeList, Graph};
use crate::markov::{
    geometric_profile_chain, metropolis_hastings, random_walk_chain, MarkovChain, DEFAULT_K_CHECK,
};
use crate::objective::{estimation_targets, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Path,
    Complete,
    Star,
    Ring,
}

/// Exactly one of `generator` (with `num_nodes`), `file`, or inline
/// `num_nodes` + `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

impl GraphSpec {
    pub fn generator(generator: Generator, num_nodes: usize) -> Self {
        GraphSpec {
            generator: Some(generator),
            num_nodes: Some(num_nodes),
            file: None,
            edges: None,
        }
    }

    pub fn build(&self) -> Result<Graph, CliError> {
        let bad = |m: &str| CliError::invalid("graph", m);
        match (self.generator, &self.file, &self.edges) {
            (Some(gen), None, None) => {
                let n = self.num_nodes.ok_or_else(|| bad("generator requires num_nodes"))?;
                let g = match gen {
                    Generator::Path => Graph::path(n),
                    Generator::Complete => Graph::complete(n),
                    Generator::Star => Graph::star(n),
                    Generator::Ring => Graph::ring(n),
                };
                g.map_err(|e| CliError::invalid("graph.num_nodes", e))
            }
            (None, Some(path), None) => {
                if self.num_nodes.is_some() {
                    return Err(bad("num_nodes is read from the file"));
                }
                Graph::load(path).map_err(|e| CliError::invalid("graph.file", e))
            }
            (None, None, Some(edges)) => {
                let n = self.num_nodes.ok_or_else(|| bad("edges require num_nodes"))?;
                Graph::from_edge_list(&EdgeList {
                    num_nodes: n,
                    edges: edges.clone(),
                })
                .map_err(|e| CliError::invalid("graph.edges", e))
            }
            _ => Err(bad("give exactly one of generator, file or edges")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    RandomWalk,
    Metropolis,
    Explicit,
}

/// `random_walk` needs `alpha`; `explicit` needs `P`. Metropolis chains
/// target the uniform distribution unless `alpha` (the geometric profile)
/// or an explicit `target` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    #[serde(rename = "type")]
    pub kind: ChainKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, rename = "P", skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
}

fn forbid<T>(v: &Option<T>, field: &str, kind: &str) -> Result<(), CliError> {
    match v {
        Some(_) => Err(CliError::invalid(field, format!("not used by {kind}"))),
        None => Ok(()),
    }
}

fn require<'a, T>(v: &'a Option<T>, field: &str, kind: &str) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::invalid(field, format!("required by {kind}")))
}

impl ChainSpec {
    pub fn random_walk(alpha: f64) -> Self {
        ChainSpec {
            kind: ChainKind::RandomWalk,
            alpha: Some(alpha),
            target: None,
            p: None,
        }
    }

    pub fn metropolis(alpha: Option<f64>) -> Self {
        ChainSpec {
            kind: ChainKind::Metropolis,
            alpha,
            target: None,
            p: None,
        }
    }

    /// Parameter of the geometric stationary profile this chain is meant to
    /// be compared against, if any.
    pub fn profile_alpha(&self) -> Option<f64> {
        match self.kind {
            ChainKind::Explicit => None,
            _ => self.alpha,
        }
    }

    pub fn build(&self, graph: &Graph, k_check: usize) -> Result<MarkovChain, CliError> {
        let n = graph.num_nodes();
        let chain = match self.kind {
            ChainKind::RandomWalk => {
                forbid(&self.target, "chain.target", "random_walk")?;
                forbid(&self.p, "chain.P", "random_walk")?;
                let alpha = *require(&self.alpha, "chain.alpha", "random_walk")?;
                if !is_path(graph) {
                    return Err(CliError::invalid(
                        "chain.type",
                        "random_walk is defined on the path graph only",
                    ));
                }
                random_walk_chain(n, alpha).map_err(|e| CliError::invalid("chain.alpha", e))?
            }
            ChainKind::Metropolis => {
                forbid(&self.p, "chain.P", "metropolis")?;
                match (self.alpha, &self.target) {
                    (Some(_), Some(_)) => {
                        return Err(CliError::invalid("chain", "give alpha or target, not both"))
                    }
                    (Some(a), None) => {
                        if !is_path(graph) {
                            return Err(CliError::invalid(
                                "chain.alpha",
                                "the geometric profile is defined on the path graph only",
                            ));
                        }
                        geometric_profile_chain(n, a)
                            .map_err(|e| CliError::invalid("chain.alpha", e))?
                    }
                    (None, Some(t)) => metropolis_hastings(graph, Some(t))
                        .map_err(|e| CliError::invalid("chain.target", e))?,
                    (None, None) => metropolis_hastings(graph, None)
                        .map_err(|e| CliError::invalid("chain", e))?,
                }
            }
            ChainKind::Explicit => {
                forbid(&self.alpha, "chain.alpha", "explicit")?;
                forbid(&self.target, "chain.target", "explicit")?;
                let p = require(&self.p, "chain.P", "explicit")?;
                if p.len() != n || p.iter().any(|r| r.len() != n) {
                    return Err(CliError::invalid(
                        "chain.P",
                        format!("expected a {n}x{n} matrix"),
                    ));
                }
                let m = DMatrix::from_fn(n, n, |i, j| p[i][j]);
                return MarkovChain::with_k_check(m, Some(graph), k_check)
                    .map_err(|e| CliError::invalid("chain.P", e));
            }
        };
        if k_check == DEFAULT_K_CHECK {
            Ok(chain)
        } else {
            MarkovChain::with_k_check(chain.transition_matrix().clone(), Some(graph), k_check)
                .map_err(|e| CliError::invalid("k_check", e))
        }
    }
}

/// True for the path `0 - 1 - ... - (N-1)` in its natural labelling.
fn is_path(g: &Graph) -> bool {
    g.num_edges() + 1 == g.num_nodes()
        && g.edges().iter().enumerate().all(|(i, &e)| e == (i, i + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    /// Quadratics centred at `x_true` plus Gaussian noise.
    Estimation,
}

/// `quadratic` needs one target per node; `estimation` takes `x_true`
/// (default zeros), `noise_std` (default 1) and `data_seed` (default 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_true: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl ProblemSpec {
    pub fn estimation(dim: usize, noise_std: f64, data_seed: u64) -> Self {
        ProblemSpec {
            kind: ProblemKind::Estimation,
            dim,
            targets: None,
            x_true: Some(vec![0.0; dim]),
            noise_std: Some(noise_std),
            data_seed: Some(data_seed),
        }
    }

    fn fill_defaults(&mut self, defaults: &mut Vec<String>) {
        if self.kind != ProblemKind::Estimation {
            return;
        }
        if self.x_true.is_none() {
            self.x_true = Some(vec![0.0; self.dim]);
            defaults.push("problem.x_true".into());
        }
        if self.noise_std.is_none() {
            self.noise_std = Some(1.0);
            defaults.push("problem.noise_std".into());
        }
        if self.data_seed.is_none() {
            self.data_seed = Some(0);
            defaults.push("problem.data_seed".into());
        }
    }

    pub fn build(&self, graph: Graph) -> Result<ProblemInstance, CliError> {
        let n = graph.num_nodes();
        let dim = self.dim;
        if dim == 0 {
            return Err(CliError::invalid("problem.dim", "must be at least 1"));
        }
        let targets = match self.kind {
            ProblemKind::Quadratic => {
                forbid(&self.x_true, "problem.x_true", "quadratic")?;
                forbid(&self.noise_std, "problem.noise_std", "quadratic")?;
                forbid(&self.data_seed, "problem.data_seed", "quadratic")?;
                let targets = require(&self.targets, "problem.targets", "quadratic")?;
                if targets.len() != n {
                    return Err(CliError::invalid(
                        "problem.targets",
                        format!("expected {n} targets, got {}", targets.len()),
                    ));
                }
                if let Some(i) = targets.iter().position(|t| t.len() != dim) {
                    return Err(CliError::invalid(
                        format!("problem.targets[{i}]"),
                        format!("expected {dim} entries"),
                    ));
                }
                targets.iter().map(|t| DVector::from_vec(t.clone())).collect()
            }
            ProblemKind::Estimation => {
                forbid(&self.targets, "problem.targets", "estimation")?;
                let x_true = self.x_true.clone().unwrap_or_else(|| vec![0.0; dim]);
                if x_true.len() != dim {
                    return Err(CliError::invalid(
                        "problem.x_true",
                        format!("expected {dim} entries, got {}", x_true.len()),
                    ));
                }
                let noise = self.noise_std.unwrap_or(1.0);
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(CliError::invalid(
                        "problem.noise_std",
                        "must be finite and non-negative",
                    ));
                }
                estimation_targets(n, &DVector::from_vec(x_true), noise, self.data_seed.unwrap_or(0))
            }
        };
        ProblemInstance::quadratic(graph, targets).map_err(|e| CliError::invalid("problem", e))
    }
}

/// A single engine or a list of engines.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum EngineSelection {
    One(Engine),
    Many(Vec<Engine>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    graph: GraphSpec,
    #[serde(default)]
    chain: Option<ChainSpec>,
    problem: ProblemSpec,
    #[serde(default)]
    rho: Option<f64>,
    #[serde(default, alias = "engine")]
    engines: Option<EngineSelection>,
    iterations: usize,
    #[serde(default)]
    trials: Option<usize>,
    #[serde(default)]
    master_seed: Option<u64>,
    #[serde(default)]
    initial_state: Option<usize>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    emit_constants: Option<bool>,
    #[serde(default)]
    k_check: Option<usize>,
}

fn or_default<T>(v: Option<T>, default: T, name: &str, applied: &mut Vec<String>) -> T {
    v.unwrap_or_else(|| {
        applied.push(name.to_string());
        default
    })
}

/// Fully resolved experiment description. Serializes as the config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub graph: GraphSpec,
    pub chain: Option<ChainSpec>,
    pub problem: ProblemSpec,
    pub rho: f64,
    pub engines: Vec<Engine>,
    pub iterations: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub initial_state: usize,
    pub out_dir: Option<PathBuf>,
    pub emit_constants: bool,
    pub k_check: usize,
    /// Fields that were absent and filled with their default.
    pub defaults_applied: Vec<String>,
}

/// Objects built from a validated config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: ProblemInstance,
    pub chain: Option<MarkovChain>,
}

/// Reads, parses and cross-validates a config file. Relative graph files
/// resolve against the config's directory.
pub fn validate_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, CliError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json(&text, path.parent())
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        let mut defaults = Vec::new();
        let rho = or_default(raw.rho, 1.0, "rho", &mut defaults);
        let trials = or_default(raw.trials, 1, "trials", &mut defaults);
        let master_seed = or_default(raw.master_seed, 0, "master_seed", &mut defaults);
        let initial_state = or_default(raw.initial_state, 0, "initial_state", &mut defaults);
        let k_check = or_default(raw.k_check, DEFAULT_K_CHECK, "k_check", &mut defaults);
        let emit_constants = or_default(raw.emit_constants, true, "emit_constants", &mut defaults);
        let engines = match raw.engines {
            Some(EngineSelection::One(e)) => vec![e],
            Some(EngineSelection::Many(v)) => v,
            None => {
                defaults.push("engines".into());
                vec![Engine::Async]
            }
        };
        let mut problem = raw.problem;
        problem.fill_defaults(&mut defaults);
        let mut graph = raw.graph;
        if let (Some(file), Some(base)) = (&graph.file, base_dir) {
            if file.is_relative() {
                graph.file = Some(base.join(file));
            }
        }
        let cfg = ExperimentConfig {
            graph,
            chain: raw.chain,
            problem,
            rho,
            engines,
            iterations: raw.iterations,
            trials,
            master_seed,
            initial_state,
            out_dir: raw.out_dir,
            emit_constants,
            k_check,
            defaults_applied: defaults,
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Scalar checks plus a full build of graph, problem and chain.
    pub fn check(&self) -> Result<(), CliError> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(CliError::invalid("rho", "must be positive and finite"));
        }
        if self.trials == 0 {
            return Err(CliError::invalid("trials", "must be at least 1"));
        }
        if self.engines.is_empty() {
            return Err(CliError::invalid("engines", "select at least one engine"));
        }
        if self.k_check == 0 {
            return Err(CliError::invalid("k_check", "must be at least 1"));
        }
        if let Some(f) = &self.graph.file {
            if !f.is_file() {
                return Err(CliError::invalid(
                    "graph.file",
                    format!("{} does not exist", f.display()),
                ));
            }
        }
        self.build().map(|_| ())
    }

    pub fn build(&self) -> Result<Setup, CliError> {
        let graph = self.graph.build()?;
        if self.initial_state >= graph.num_nodes() {
            return Err(CliError::invalid(
                "initial_state",
                format!("must be below the node count {}", graph.num_nodes()),
            ));
        }
        let chain = match &self.chain {
            Some(spec) => Some(spec.build(&graph, self.k_check)?),
            None if self.engines.contains(&Engine::Async) => {
                return Err(CliError::invalid(
                    "chain",
                    "the async engine needs a chain",
                ))
            }
            None => None,
        };
        let problem = self.problem.build(graph)?;
        Ok(Setup { problem, chain })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "graph": {"generator": "path", "num_nodes": 10},
        "chain": {"type": "random_walk", "alpha": 0.1},
        "problem": {"kind": "estimation", "dim": 10},
        "iterations": 5000
    }"#;

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL, None).unwrap();
        assert_eq!(cfg.rho, 1.0);
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.engines, vec![Engine::Async]);
        assert_eq!(cfg.initial_state, 0);
        assert_eq!(cfg.iterations, 5000);
        for f in ["rho", "trials", "engines", "problem.noise_std", "problem.x_true"] {
            assert!(cfg.defaults_applied.iter().any(|d| d == f), "{f}");
        }
        let setup = cfg.build().unwrap();
        assert_eq!(setup.problem.num_nodes(), 10);
        assert_eq!(setup.problem.dim(), 10);
        assert_eq!(setup.problem.graph().num_edges(), 9);
        // echo round-trips
        let echo = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&echo).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_alpha_reports_field() {
        let text = MINIMAL.replace("0.1", "0.6");
        match ExperimentConfig::from_json(&text, None) {
            Err(CliError::Invalid { field, .. }) => assert_eq!(field, "chain.alpha"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn explicit_chain_off_edge_rejected() {
        let text = r#"{
            "graph": {"generator": "path", "num_nodes": 3},
            "chain": {"type": "explicit", "P": [[0.5, 0, 0.5], [0.5, 0, 0.5], [0, 0.5, 0.5]]},
            "problem": {"kind": "quadratic", "dim": 1, "targets": [[0], [1], [2]]},
            "iterations": 10
        }"#;
        match ExperimentConfig::from_json(text, None) {
            Err(e @ CliError::Invalid { .. }) => {
                assert!(e.to_string().contains("chain.P"));
                assert_eq!(e.exit_code(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_paths() {
        let text = MINIMAL.replace("\"dim\": 10", "\"dim\": \"ten\"");
        match ExperimentConfig::from_json(&text, None) {
            Err(CliError::Schema { path, .. }) => assert_eq!(path, "problem.dim"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"iterations\"", "\"iters\"");
        assert!(matches!(
            ExperimentConfig::from_json(&text, None),
            Err(CliError::Schema { .. })
        ));
    }

    #[test]
    fn engine_accepts_one_or_many() {
        let one = MINIMAL.replace("\"iterations\"", "\"engine\": \"sync\", \"iterations\"");
        let cfg = ExperimentConfig::from_json(&one, None).unwrap();
        assert_eq!(cfg.engines, vec![Engine::Sync]);
        let many = MINIMAL.replace("\"iterations\"", "\"engines\": [\"sync\", \"async\"], \"iterations\"");
        let cfg = ExperimentConfig::from_json(&many, None).unwrap();
        assert_eq!(cfg.engines, vec![Engine::Sync, Engine::Async]);
    }

    #[test]
    fn missing_graph_file_rejected() {
        let text = r#"{
            "graph": {"file": "nope.json"},
            "problem": {"kind": "estimation", "dim": 1},
            "engines": ["sync"],
            "iterations": 1
        }"#;
        match ExperimentConfig::from_json(text, Some(Path::new("/nonexistent"))) {
            Err(CliError::Invalid { field, .. }) => assert_eq!(field, "graph.file"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn async_without_chain_rejected() {
        let text = r#"{
            "graph": {"generator": "complete", "num_nodes": 3},
            "problem": {"kind": "estimation", "dim": 1},
            "iterations": 1
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json(text, None),
            Err(CliError::Invalid { .. })
        ));
    }

    #[test]
    fn metropolis_variants() {
        let base = |chain: &str| {
            format!(
                r#"{{"graph": {{"generator": "path", "num_nodes": 4}}, "chain": {chain},
                    "problem": {{"kind": "estimation", "dim": 1}}, "iterations": 1}}"#
            )
        };
        for chain in [
            r#"{"type": "metropolis"}"#,
            r#"{"type": "metropolis", "alpha": 0.8}"#,
            r#"{"type": "metropolis", "target": [0.1, 0.2, 0.3, 0.4]}"#,
        ] {
            ExperimentConfig::from_json(&base(chain), None).unwrap();
        }
        assert!(ExperimentConfig::from_json(
            &base(r#"{"type": "metropolis", "alpha": 0.8, "target": [0.25, 0.25, 0.25, 0.25]}"#),
            None
        )
        .is_err());
    }
}
