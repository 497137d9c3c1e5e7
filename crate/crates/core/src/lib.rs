//! Uncertainty-aware deep co-training for semi-supervised 2D segmentation.
//!
//! Two small encoder–decoder networks are trained jointly: each on its own
//! half of the labeled images, both on a shared unlabeled pool. Monte Carlo
//! dropout entropy re-weights the supervised cross-entropy and the
//! Jensen–Shannon agreement term, and adversarial examples (FGSM / VAT) keep
//! the two networks from collapsing onto one decision boundary.

pub mod adversarial;
pub mod cli;
pub mod data;
pub(crate) mod codec;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
