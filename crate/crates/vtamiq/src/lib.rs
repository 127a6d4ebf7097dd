//! VTAMIQ: full-reference image quality assessment.
//!
//! The pipeline samples spatially aligned patch sequences from a reference
//! and a distorted image (context-aware probability sampling), encodes each
//! sequence into a single vector with a uv-indexed patch transformer,
//! modulates the encoded difference with stacked residual channel attention,
//! and regresses a scalar quality score. Training (MAE + pairwise ranking
//! loss, AdamW) and evaluation (PLCC/SROCC/KROCC with logistic pre-fitting)
//! follow the same protocol end to end.
//!
//! Model math runs on a minimal reverse-mode tensor tape
//! ([`tensor`]) with a finite-difference oracle as the correctness anchor.
//! Data-parallel inner loops use rayon; build with
//! `--no-default-features` for the sequential fallback.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod diffnet;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
