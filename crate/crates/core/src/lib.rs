//! Infinite mixtures of multi-output Gaussian processes.
//!
//! A Dirichlet-process mixture whose components pair a Gaussian input density with a
//! multi-output GP over the outputs. Inference is a Gibbs sampler (auxiliary-component
//! indicator updates, conjugate input parameters, Hamiltonian Monte Carlo for the GP
//! scale, prior-proposal Metropolis–Hastings for the remaining output parameters and
//! the concentration), and predictions average over retained samples.

pub mod datagen;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gibbs;
pub mod io;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod structured;

pub mod cli;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{Component, ComponentId, Dataset, Hyperparams, MixtureState};
