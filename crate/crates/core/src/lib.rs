//! Desk-scale GAN enhancement and single-shot detection.
//!
//! A DCGAN learns from small synthetic images; its discriminator features are
//! checked with a linear probe, a conditional variant restores degraded frames, and
//! an SSD-style detector runs on the restored frames.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod gan;
pub mod image;
pub mod nn;
pub mod probe;

pub use error::{Error, Result};
pub use image::ImageTensor;
