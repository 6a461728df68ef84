//! Counterfactual diffusion toolkit.
//!
//! An image is encoded to a diffusion latent with the unconditional model, decoded again
//! with the condition intervened to [`Condition::Healthy`] under implicit guidance, and the
//! channel-averaged absolute difference between input and counterfactual is used as a
//! lesion heatmap. This crate holds everything that does not depend on a particular network
//! implementation: the noise schedule, DDIM stepping, the counterfactual pipeline, the
//! synthetic corpus, metrics and the on-disk formats. Networks plug in through [`EpsModel`].

pub mod condition;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensor;

pub use condition::Condition;
pub use error::{Error, Result};
pub use model::EpsModel;
pub use sampler::{Normalization, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleKind, TimeStep};
pub use tensor::ImageTensor;
