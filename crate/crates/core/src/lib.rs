//! Re-MeanFlow at desk scale: rectified-flow training, reflow couplings with
//! distance truncation, and mean-flow training for one-step sampling on 2-D
//! toy problems.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dist;
pub mod error;
pub mod meanflow;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rectflow;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
pub use dist::{gaussian_velocity_oracle, GaussianMixture, ToyTask};
pub use error::{Error, Result};
pub use meanflow::{MeanFlowModel, MeanFlowTrainConfig, TimeSamplerConfig};
pub use model::{Classes, NetSpec, NfeCounter, VelocityField};
pub use nn::{Activation, AdamConfig, AdamState, DualTensor, MlpModel};
pub use rectflow::{Coupling, CouplingSet, FlowModel, FlowTrainConfig, Solver};
pub use tensor::Tensor;
pub use trace::{LossTrace, Snapshots};
