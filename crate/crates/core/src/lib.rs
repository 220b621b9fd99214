//! Off-diagonal contrastive learning for radiology image-text models.
//!
//! * [`losses`]: InfoNCE, off-diagonal BCE and abnormal-only InfoNCE with
//!   analytic gradients and a finite-difference checker.
//! * [`report`]: sentence labelling, report pseudo-labels, normal-sentence
//!   filtering, prompt templating and per-epoch sentence selection.
//! * [`trainer`]: synthetic paired data, linear cosine encoders and a
//!   deterministic Adam training loop.
//! * [`eval`]: AUC, FP/FN balance, pointing game and the ablation grid.

pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
