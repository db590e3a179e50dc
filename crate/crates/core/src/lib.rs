//! Unpaired image-to-image translation with dual-domain denoising
//! diffusion models, self-contained at desk scale.
//!
//! The crate trains a pair of conditional noise-prediction U-Nets (one per
//! image domain) together with a pair of residual translator networks
//! under denoising score matching and cycle-consistency objectives, then
//! translates images by a release-time-conditioned reverse Markov chain.
//! Everything runs on a from-scratch `f64` autodiff core so results are
//! deterministic and oracle-checkable.

mod error;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fid;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
