//! File formats, parallel execution, experiment runners and the command-line
//! front end for `covgof-core`.

pub mod cli;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod presets;
pub mod report;
pub mod svg;

pub use error::{Error, Result};
pub use exec::Parallel;
