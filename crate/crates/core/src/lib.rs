//! Personalized head representation: a blendshape head model upsampled to a
//! dense mesh, static and per-frame offset fields fitted through a
//! differentiable normal/depth renderer, and an identity-adaptive expression
//! transfer network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deform;
pub mod engine;
pub mod error;
pub mod geom;
pub mod hhm;
pub mod mesh;
pub mod model;
pub mod objective;
pub mod raster;
pub mod rig;
pub mod toolkit;
pub mod transfer;

pub use error::{Error, Result};
