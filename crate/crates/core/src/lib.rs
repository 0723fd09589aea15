//! Desk-scale diffusion engine with an asymmetric reverse process.
//!
//! Trains a small denoiser on synthetic glyph images, inverts images
//! deterministically, and edits semantic attributes through additive
//! shifts in the denoiser's bottleneck activation space, with the
//! editing and quality-boosting intervals chosen from perceptual
//! distance curves.

pub mod asyrp;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod glyphdata;
pub mod guidance;
pub mod numerics;
pub mod parallel;
pub mod params;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use rng::Rng;
