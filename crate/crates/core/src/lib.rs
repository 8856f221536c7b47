//! Joint lesion localization and classification for ultrasound-like images.
//!
//! The network is a residual feature extractor feeding two branches: a
//! lesion-aware branch that refines every pyramid level with channel and
//! spatial attention and fuses them into a lesion-probability mask, and a
//! classifier that re-weights the top feature map with that mask before
//! global pooling. Training runs in two stages: the localization branch is
//! pre-trained on samples with location labels, then all three networks are
//! trained on the full set with a hybrid loss that pseudo-labels samples
//! lacking location annotations.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod fex;
pub mod geometry;
pub mod lanet;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod saliency;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
