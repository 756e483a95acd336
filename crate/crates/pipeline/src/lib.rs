//! Task streams, sequential adaptation, continual evaluation and file formats
//! around `ucad-core`.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod pnm;
pub mod run;
pub mod synthetic;

pub use config::{DataMode, RunConfig};
pub use error::{PipelineError, Result};
pub use run::{run_sequence, run_tasks, SequenceResult};
