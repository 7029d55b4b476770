//! Simulation library for federated representation learning with a shared
//! low-rank representation and personalized heads.
//!
//! The crate covers:
//! - deterministic seeded sampling and dense linear algebra ([`rng`], [`linalg`]),
//! - synthetic ground-truth and per-client data generation ([`synth`]),
//! - the FLUTE linear algorithm with its server-side balancing penalty ([`flute`]),
//! - the FedRep baseline with spectral or random initialization ([`fedrep`]),
//! - the symmetric-iterate diagnostics used to track convergence ([`theory`]),
//! - a toy nonlinear variant with a neural-collapse head penalty ([`general`]),
//! - error metrics against the ground truth and the rank-k optimum ([`metrics`]).
//!
//! Every operation is deterministic given its seeds: per-client randomness
//! comes from independent counter-based streams, and all cross-client
//! reductions run in a fixed order, so traces are byte-stable regardless of
//! how many worker threads evaluate the clients.

pub mod error;
pub mod fedrep;
pub mod flute;
pub mod general;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod theory;

pub use error::CoreError;
pub use flute::{FactoredModel, FluteConfig, GradientMode};
pub use linalg::SvdResult;
pub use metrics::RoundRecord;
pub use rng::RngStream;
pub use synth::{ClassShard, ClientShard, GroundTruth};
pub use theory::{LambdaTilde, ThetaState};

/// Convenience alias used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Convenience alias used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
