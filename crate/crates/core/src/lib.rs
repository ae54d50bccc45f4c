//! Label refinement for weakly-supervised detection.
//!
//! The crate turns offline model outputs (activation maps, scored boxes and
//! per-sample losses) into point prompts, pseudo ground truth and loss drop
//! masks, and scores the results against ground truth.
//!
//! - [`activation`] / [`tensor`]: load and resize activation stacks.
//! - [`peaks`]: tiled max pooling with threshold and radius suppression.
//! - [`prompts`]: dense grid, clustered instance peaks and prompt assembly.
//! - [`pgt`]: per-class normalised scoring and containment filtering.
//! - [`dropreg`]: RoI and query drop masks and masked losses.
//! - [`evaluation`]: recall, CorLoc, pseudo-label error rate, feature similarity.

pub mod activation;
pub mod dropreg;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod peaks;
pub mod pgt;
pub mod prompts;
pub mod tensor;

pub use activation::{ActivationStack, SourceKind};
pub use dropreg::{DropMask, DropParams, DropScope, QueryLossRecord, RoiLossRecord};
pub use error::{Error, Result};
pub use evaluation::{ByImage, GtBox, RecallReport};
pub use geometry::{BBox, ScoredBox};
pub use peaks::{PeakParams, PeakPoint};
pub use pgt::{PgtBox, PgtParams};
pub use prompts::{GridParams, PromptKind, PromptPoint};
pub use tensor::Tensor;
