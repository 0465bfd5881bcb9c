//! Pipeline behind the `gdpo` command: data generation, SFT and alignment
//! training, sampling, evaluation, temperature sweeps, the exact-flow oracle
//! check and gradient checks.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{DriverError, Result};
