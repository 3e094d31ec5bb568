//! Recurrent sequence models viewed as variational Bayesian models.
//!
//! The crate trains tanh RNNs by maximum likelihood and evaluates the same
//! models through the variational lens: a bound whose inference model is
//! the generative conditional, a Monte-Carlo bound for location-scale
//! hidden noise, and multi-particle objectives with learned initial states.
//! Tiny instances can be checked against brute-force enumeration
//! ([`oracle`]) and every gradient against central finite differences
//! ([`grad`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod grad;
pub mod model;
pub mod numkit;
pub mod objectives;
pub mod oracle;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelConfig, Parameters, VisibleKind, VisibleTrajectory};
pub use objectives::{ObjectiveId, ObjectiveReport};
