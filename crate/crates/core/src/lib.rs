//! Decoding engine for mask-based diffusion language models.
//!
//! A decode starts from a prompt followed by a block of mask tokens and
//! repeatedly asks a [`ModelBackend`] for per-position token distributions,
//! committing some masked positions each step. Which positions get committed,
//! and how many alternative partial decodes are kept alive, is decided by the
//! [`Strategy`] in a [`DecodeConfig`].

pub mod backend;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod scheduler;
pub mod state;
pub mod subset;

pub use backend::ModelBackend;
pub use error::{Error, Result};
pub use metrics::ConfidenceMetric;
pub use scheduler::{decode, DecodeConfig, Strategy};
pub use state::{
    DecodeState, DecodeTrace, Mode, PredictionMatrix, TokenDistribution, TokenId, Vocabulary,
};
