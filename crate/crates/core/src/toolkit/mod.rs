//! Synthetic ground truth, file formats, run configuration and the CLI.

pub mod corpus;
pub mod io;
pub mod run;
pub mod synth;
