//! Memoryless Bayesian social learning on directed networks.
//!
//! Agents hold beliefs over a finite set of states, observe private signals
//! and the current beliefs of their neighbors, and update without recalling
//! any history. The crate provides the network spectral toolkit, the update
//! rules, a deterministic simulator and the asymptotic rate predictions the
//! simulations are checked against.

pub mod analysis;
pub mod beliefs;
pub mod cli;
pub mod engine;
pub mod graph;
pub mod model;
pub mod rng;
pub mod rules;

pub use analysis::{theoretical_rate, RateOutcome, RatePrediction};
pub use beliefs::BeliefState;
pub use engine::{monte_carlo, simulate, RecordOptions, RunConfig, Trajectory};
pub use graph::{Network, SpectralData};
pub use model::{InitialPriors, SignalModel, StateSpace};
pub use rules::{Schedule, UpdateRule};
