//! Algorithmic core for VFM-assisted source-free object detection.
//!
//! - [`geometry`]: boxes, IoU and greedy IoU clustering.
//! - [`fusion`]: entropy-aware dual-source pseudo-label fusion plus NMS,
//!   weighted box fusion and remove-individual baselines.
//! - [`pgfa`]: patch-weighted global feature alignment loss.
//! - [`pifa`]: RoIAlign pooling, momentum class prototypes and the
//!   prototype InfoNCE loss.
//! - [`ema`]: mean-teacher parameter EMA with an update interval.
//! - [`selftrain`]: a small synthetic end-to-end adaptation loop.
//! - [`io`]: detection and tensor file formats.
//! - [`synthetic`]: seeded toy scenes with hidden ground truth.
//! - [`gradcheck`]: finite-difference checks of the alignment losses.
//! - [`cli`]: the `sfodkit` command line.

pub mod cli;
pub mod ema;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod io;
mod linalg;
pub mod pgfa;
pub mod pifa;
pub mod selftrain;
pub mod synthetic;

pub use linalg::NORM_EPSILON;

pub use error::{Error, Result};
