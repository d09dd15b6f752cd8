//! Quantile hedging of Bermudan claims through a stochastic target
//! formulation with controlled loss.

pub mod boundary;
pub mod cli;
pub mod config;
pub mod csv;
pub mod error;
pub mod facelift;
pub mod hamiltonian;
pub mod model;
pub mod oracle;
pub mod scheme;
pub mod solver;
pub mod verification;

pub use error::{Error, Result};
