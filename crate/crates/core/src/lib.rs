//! Consensus ADMM over a network, run either synchronously or
//! asynchronously along the path of a Markov chain, together with the tools
//! needed to certify and measure its linear convergence.

pub mod admm;
pub mod analysis;
pub mod cli;
pub mod graph;
pub mod markov;
pub mod objective;

pub use admm::{Admm, AdmmError, AlgState, Engine, RunConfig, RunRecord};
pub use analysis::{
    kkt_certificate, theorem_constants, AnalysisError, CertifiedConstants, MetricsRow,
    OptimalCertificate, RateFit,
};
pub use graph::{Graph, GraphError};
pub use markov::{ChainPath, MarkovChain, MarkovError};
pub use objective::{LocalObjective, ObjectiveError, ProblemInstance};
