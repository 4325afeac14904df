//! Multi-modal co-learning with shared, specific and unused feature spaces.
//!
//! Two modalities are each encoded into a shared space (aligned across
//! modalities by a contrastive loss), a specific space and an unused space
//! (both identifiable by a modality classifier). Each modality predicts the
//! target from its shared and specific features, so either modality alone
//! suffices at inference time.

pub mod baselines;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
