pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod plot;
pub mod scorenet;
pub mod scoring;
pub mod solver;
pub mod sde;

pub use error::{Error, Result};
