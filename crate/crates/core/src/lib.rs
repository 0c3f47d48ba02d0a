//! One-stage sequential link framework for joint scene segmentation and
//! classification of shot sequences.

pub mod autodiff;
pub mod baselines;
pub mod crf;
pub mod diffcorr;
pub mod error;
pub mod feature_io;
pub mod fusion_head;
pub mod gradcheck;
pub mod label_scheme;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
