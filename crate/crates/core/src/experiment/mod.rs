//! Configuration, orchestration of complete exchanges, sweeps, the source
//! parameter optimizer and report rendering.

pub mod config;
pub mod exchange;
pub mod optimize;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, FreeParam, Scale};
pub use exchange::{run_exchange, run_role, Endpoint, Role, RunReport};
pub use optimize::{optimize, predict};
pub use sweep::{sweep, SweepPoint, SweepReport};
