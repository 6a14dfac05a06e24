//! Image captioning trained against a self-trained discriminator reward.
//!
//! The pipeline: a captioner is trained with cross-entropy, fine-tuned with
//! self-critical sequence training (SCST) against a raw image-text score
//! (which it learns to exploit), its degenerate outputs are mined as hard
//! negatives, a dual encoder is LoRA-fine-tuned on those negatives into a
//! discriminator, and the discriminator becomes the SCST reward.

pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod dual_encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod negatives;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
