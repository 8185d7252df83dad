pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod conv;
pub mod criticality;
pub mod distill;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod optim;
pub mod ssnet;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CcsdError, Result};
