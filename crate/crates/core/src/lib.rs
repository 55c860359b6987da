//! Text-to-heatmap cue mapping and convolutional heatmap guidance for
//! vision-language tracking, plus a synthetic planted-target harness and
//! one-pass-evaluation metrics.

pub mod bundle;
mod codec;
pub mod cue_mapping;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod harness;
pub mod heatmap;
pub mod metrics;
pub mod numerics;

pub use bundle::{FeatureBundle, ScaleLayout, TokenGrid};
pub use codec::quantize_f32;
pub use error::{Error, FormatError, Result};
pub use heatmap::Heatmap;
pub use numerics::{FeatureMap3D, Matrix};
