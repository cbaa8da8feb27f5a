//! Class-incremental semantic segmentation trained entirely from image-level
//! labels.
//!
//! The crate builds pseudo-labels by fusing masks from a pluggable
//! foundation-model oracle with a localizer head, weighted per pixel by the
//! localizer's normalized entropy; trains a small encoder/decoder/localizer
//! network with the full loss suite (pixel CE, pixel BCE, dense contrastive,
//! image-level BCE, feature distillation, localizer transfer); and runs the
//! class-incremental protocol with exemplar-guided replay augmentation.
//! Foundation models and image editors are abstracted behind deterministic
//! interfaces, so every stage is testable on a desk.
//!
//! See the `examples/` directory for a runnable walkthrough of each
//! capability, and the `increseg` binary for the config-driven pipeline
//! (`gen-synthetic`, `split`, `train`, `eval`, `ablate`).

pub mod error;
pub mod types;
pub mod loss;
pub mod layers;
pub mod net;
pub mod oracle;
pub mod pseudo;
pub mod dataset;
pub mod synthetic;
pub mod exemplar;
pub mod eval;
pub mod train;
pub mod checkpoint;
pub mod protocol;
pub mod config;
pub mod ablation;
pub mod cli;
mod seeding;

pub use error::{Error, Result};
