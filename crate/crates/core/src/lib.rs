//! Depth completion from sparse measurements by clustering image
//! features around learnable depth centers.
//!
//! The crate is organized as a pipeline: [`tensor`]/[`tape`] provide a
//! small deterministic f64 autodiff engine, [`guidance`] handles depth
//! discretization and Laplace-style soft encoding, [`encoder`] and
//! [`cluster`] produce per-pixel score volumes, [`translate`] adapts
//! guidance across scales and prunes unreliable sparse points, and
//! [`objective`]/[`evalkit`] cover training and evaluation. [`synth`]
//! generates the piecewise-constant scenes used by the test protocols.

pub mod ckpt;
pub mod cluster;
pub mod dataset;
pub mod depth;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod guidance;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod pngio;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod translate;

pub use error::{Error, Result};
