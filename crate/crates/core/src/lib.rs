//! Adversarial counterfactual regression for continuous treatments.
//!
//! The crate covers the whole pipeline: semi-synthetic data with controllable
//! treatment-selection bias ([`datagen`]), the encoder / treatment predictor /
//! cross-attention outcome networks ([`model`]) built on a small autodiff
//! engine ([`diffmath`]), the alternating adversarial training loop
//! ([`trainer`]), and counterfactual metrics plus a brute-force checker for
//! the KL-based generalization bounds ([`theory`]).

pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod model;
pub mod spline;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
