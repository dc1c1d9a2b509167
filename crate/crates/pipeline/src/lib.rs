//! Demonstrations, training and closed-loop evaluation for the diffusion
//! policy.

pub mod demos;
pub mod error;
pub mod expert;
pub mod parallel;
pub mod rollout;
pub mod train;

pub use demos::{generate_dataset, DemoDataset, Episode, GenerationSummary, Minibatch, ObsStats};
pub use error::{PipelineError, Result};
pub use expert::{scripted_expert, ExpertParams};
