//! Domain-adaptive video semantic segmentation on synthetic clips.
//!
//! The crate renders paired source/target video benchmarks, trains a small
//! two-frame segmentation network with spatial and spatial-temporal
//! adversarial alignment plus entropy-gated flow consistency, and evaluates
//! mIoU, temporal consistency and feature variance. See the guide in
//! `book/` for a walkthrough.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminators;
pub mod error;
pub mod evalkit;
pub mod flowwarp;
pub mod losses;
pub mod nn;
pub mod params;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

/// Doc-tests compiled from the guide in `book/`.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-clips.md")]
    pub mod synthetic_clips {}
    #[doc = include_str!("../../../book/src/warping.md")]
    pub mod warping {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
