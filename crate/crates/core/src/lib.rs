//! Similarity-prompted medical segmentation with diagnosis, at desk scale.
//!
//! Image tokens and a segmentation-token embedding are compared, the
//! similarities are pooled into a coarse region prompt, and a toy decoder
//! turns the prompt into a pixel mask. Around that core sit the training
//! losses, the evaluation metrics, test-time scaling over reasoning paths
//! and perturbed prompts, a multi-role chain-of-thought data pipeline, a
//! synthetic benchmark generator, and the experiment harness.

pub mod cotgen;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod rvls2m;
pub mod seed;
pub mod synthdata;
pub mod toy;
pub mod tts;

pub use error::{Error, Result};
