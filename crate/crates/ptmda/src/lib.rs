//! Multi-source unsupervised domain adaptation laboratory.
//!
//! The crate trains a shared feature extractor against several labeled source
//! domains and one unlabeled target domain. Training runs in two stages:
//! first each source is aligned with the target through a conditional
//! adversarial objective regularized by a metric constraint, then confidently
//! pseudo-labeled target points are merged into each source to form pseudo
//! target domains and the remaining sources are aligned against those.
//! Normalization inside the extractor can run as a dual-branch matching
//! normalization that standardizes source and target activations with their
//! own batch statistics while sharing one learned affine map driven only by
//! the target branch.
//!
//! Everything runs on a small tape-based reverse-mode autodiff core over flat
//! row-major buffers, generic over `f32`/`f64`.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pseudo_target;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
