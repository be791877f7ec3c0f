//! Sparse mixture-of-experts routing for multimodal sequence models.
//!
//! Three dispatch strategies are implemented on a small reverse-mode tensor
//! kernel: flat top-k routing, modality-hard routing over an audio and a
//! visual expert group, and hierarchical gating in which an inter-modal
//! router weights the groups and intra-modal routers pick experts inside
//! them. The auxiliary objectives (load balancing, router z-loss, group-level
//! load biasing) are differentiable on the same tape.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the working
//! precision to `f64` (and `f32` where useful).

pub mod config;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod routing;
pub mod scalar;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numkernel::Tensor<f64>;
pub type Tensor32 = numkernel::Tensor<f32>;
pub type Param = numkernel::Param<f64>;
pub type Tape = numkernel::Tape<f64>;
pub type ExpertSelection = routing::ExpertSelection<f64>;
pub type LossBreakdown = losses::LossBreakdown<f64>;
pub type Model = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type SampleBatch = synthdata::SampleBatch<f64>;
