//! Flow-matching diffusion transformer for talking-portrait video at desk
//! scale, conditioned on audio (clip- or frame-scoped cross-attention),
//! identity tokens and motion-intensity coefficients.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod motion;
pub mod synthdata;
pub mod training;
pub mod numerics;
pub mod sampling;

pub use error::{Error, Result};
