//! Causal discovery of cyclic models with latent confounding, using implicit
//! normalizing flows over interventional data.

pub mod covariance_est;
pub mod equivalence;
pub mod error;
pub mod graphs;
pub mod implicit_flow;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nnet;
pub mod sem_sim;
pub mod structure_learn;

pub use error::{Error, Result};
