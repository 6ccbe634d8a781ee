//! Command-line front end for streaming set encoders: model and session
//! files, batch ingestion, consistency checks and training.

pub mod batch;
pub mod commands;
pub mod error;
pub mod model;
pub mod session;
pub mod text;

pub use error::{CliError, Result};
pub use model::{ModelFile, TrainSection};
pub use session::{SessionFile, SessionLock};
