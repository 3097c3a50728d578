//! Adversarial caption-set generation.
//!
//! A conditional LSTM caption generator is trained against a discriminator that
//! judges whole sets of captions for one image, with straight-through
//! Gumbel-Softmax sampling carrying gradients through the discrete words. The
//! crate also carries the diversity toolkit used to compare trained models:
//! Div-n, mBleu, corpus vocabulary and novelty, and n-gram count ratios.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
