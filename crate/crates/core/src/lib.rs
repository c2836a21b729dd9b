//! Learned saliency masks for token-sequence classifiers.
//!
//! An [`explainer::Explainer`] produces a per-token, per-class soft mask stack
//! for each input. Masks scale the embedding rows of a frozen
//! [`explanandum::Explanandum`] classifier, so a row's direction is kept and
//! only its magnitude shrinks. Training pushes the kept tokens to preserve the
//! classification and the removed ones to carry no class signal.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod explanandum;
pub mod losses;
pub mod masking;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
