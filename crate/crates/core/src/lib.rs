//! Membership-inference auditing for speech-recognition-style sequence models.
//!
//! The crate trains small encoder-decoder recognisers with CTC and attention
//! heads, extracts error-, loss- and perturbation-based membership features
//! from them, and scores membership with a random forest.
//!
//! ```text
//! synth corpus -> splits -> train ASR (shadow, target) -> extract features
//!              -> train forest on shadow features -> score target features -> report
//! ```

pub mod error;
pub mod classifier;
pub mod error_features;
pub mod external;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
