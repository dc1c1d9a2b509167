//! Core of a knowledge-driven diffusion policy: a DDPM action-sequence
//! generator whose noise predictor ends in a sparse top-K mixture of experts.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases below fix the width for callers that do not care.

pub mod action;
pub mod denoiser;
pub mod moe;
pub mod numerics;
pub mod scalar;
pub mod schedule;

pub use action::{ActionSequence, ACTION_DIM};
pub use denoiser::{count_params, Backbone, DenoiserError, Dropout, KdpModel, ModelConfig, NoisePrediction, Preset, TrunkOutput, OBS_DIM};
pub use moe::{estimate_joint, load_balance_loss, mutual_info, route_scores, ExpertBank, MoeError, RoutingDecision};
pub use numerics::{no_grad, Adam, AdamConfig, NumericsError, Tensor};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, ScheduleError, ScheduleKind};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Schedule64 = NoiseSchedule<f64>;
pub type Schedule32 = NoiseSchedule<f32>;
pub type Model64 = KdpModel<f64>;
pub type Model32 = KdpModel<f32>;
pub type Decision64 = RoutingDecision<f64>;
pub type Actions64 = ActionSequence<f64>;
