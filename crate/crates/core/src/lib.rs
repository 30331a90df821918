//! Latent-domain discovery and double-space domain-difference elimination
//! for recognition on unseen ⟨class, domain⟩ combinations.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: a small dense reverse-mode engine with a
//!   finite-difference checker and first-order optimizers.
//! * [`model`]: the network collection (mapping network, two feature
//!   extractors, global/local heads, domain discriminators) and checkpoints.
//! * [`ldd`]: posteriors over latent domains, discovery/elimination losses
//!   and the EM `Q` function used to verify them.
//! * [`trainer`]: the alternating two-phase optimisation loop.
//! * [`meta`]: the episodic meta-learning replacement for the extractor phase.
//! * [`data`]: synthetic task generation and CSV persistence.
//! * [`eval`]: metrics and the ablation variants.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod ldd;
pub mod meta;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{GcldrError, Result};
pub use tensor::Tensor;

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
