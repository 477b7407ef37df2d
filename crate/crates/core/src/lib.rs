//! Adversarial translation of procedurally rendered parametric face images
//! into a hidden "realistic" target domain, at a scale where every training
//! signal can be verified against a ground-truth oracle.
//!
//! The target domain is defined by a deterministic transform applied to the
//! renderer's output on a disjoint identity pool, so the quality of the
//! learned mapping is a measurable number rather than a judgement call.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod nets;
pub mod toymm;
pub mod trainer;

pub use error::{Error, Result};
