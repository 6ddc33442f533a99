//! Gradients, finite-difference verification, Adam and sequence fitting.

pub mod adam;
pub mod fit;
pub mod gradcheck;
pub mod pipeline;

pub use adam::{cosine_scale, Adam, AdamConfig};
pub use fit::{fit_from, fit_sequence, params_from_hhm, recenter, DisentanglementStats, FitReport, FitState, Schedule};
pub use gradcheck::{gradcheck, Block, GradcheckConfig, GradcheckReport};
pub use pipeline::{evaluate, forward_frame, Evaluation, FitProblem, Gradients, Params};
