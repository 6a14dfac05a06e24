//! Captioner training: cross-entropy pretraining and self-critical
//! sequence training against pluggable rewards.

mod corpus;
mod reward;
mod schedule;
mod scst;
mod xe;

pub use corpus::{epoch_batch, CaptionCorpus};
pub use reward::{RewardFunction, RewardKind};
pub use schedule::LrSchedule;
pub use scst::{
    compute_baseline, load_scst, scst_surrogate, CandidateMode, ScstConfig, ScstLogEntry,
    ScstStepStats, ScstTrainer,
};
pub use xe::{load_captioner, XeConfig, XeLogEntry, XeTrainer};
