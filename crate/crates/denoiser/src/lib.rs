//! Conditional noise-prediction networks on candle, their training loop and checkpoints.
//!
//! [`Denoiser`] implements [`cfdiff::EpsModel`], so a trained network plugs directly into
//! the counterfactual pipeline of the core crate.

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod model;
pub mod net;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use model::Denoiser;
pub use net::{Architecture, ConditioningMode, MlpConfig, UNetConfig};
pub use params::{ParamStore, Weights};
pub use train::{train, TrainConfig, TrainReport};
