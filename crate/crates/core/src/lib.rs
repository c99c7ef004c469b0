//! Gradient estimation through stochastic binary neurons and semi-hard
//! (noisy rectifier) units.
//!
//! The crate is organised around a single forward record, [`ForwardTrace`],
//! from which every estimator is computed:
//!
//! - [`noise`]: seeded, replayable per-unit random streams.
//! - [`network`]: layered networks of affine units and the forward pass.
//! - [`estimators`]: the score-function correlator `(h - σ(a))·L`, its
//!   baseline-centered variant, straight-through, a learned corrector and
//!   the perturbation baselines (SPSA, finite differences).
//! - [`oracle`]: exact expectations by enumerating every binary
//!   configuration of a small network.
//! - [`semihard`]: exact backward pass for noisy rectifiers and the
//!   firing-rate bias controller.
//! - [`boltzmann`]: small Boltzmann machines, Gibbs sampling and the
//!   reward-correlator view of the log-likelihood gradient.
//! - [`experiments`]: configuration, variance benchmarks, training runs
//!   and CSV output used by the `stochgrad` binary.

pub mod boltzmann;
mod error;
pub mod estimators;
pub mod experiments;
pub mod network;
pub mod noise;
pub mod oracle;
pub mod semihard;
pub mod stats;

mod backprop;

pub use error::{Error, Result};
pub use estimators::{EstimatorKind, GradientEstimate};
pub use network::{ForwardTrace, LayeredNetwork, LossSpec, UnitKind};
pub use noise::{NoiseStream, UnitStreams};
