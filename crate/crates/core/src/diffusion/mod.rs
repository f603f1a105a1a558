//! Forward diffusion, timestep sampling, the denoiser contract, and the
//! score-distillation update.

mod oracle;
pub mod remote;
mod schedule;
mod sds;
mod tensor;

use thiserror::Error;

pub use oracle::{
    adapt_oracle, AdaptSample, AffineAdapter, Capabilities, Conditioning, GuidanceOracle,
    OracleError, TargetFn, TargetImageOracle,
};
pub use remote::RemoteOracle;
pub use schedule::{
    build_schedule, build_schedule_named, NoiseSchedule, ScheduleProfile, Weighting,
    LINEAR_BETA_END, LINEAR_BETA_START, TIMESTEP_RANGE,
};
pub use sds::{forward_diffuse, predicted_clean, sds_grad, sds_grad_via_decode};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown schedule profile {0:?}")]
    UnknownProfile(String),
    #[error("schedule needs at least 2 steps, got {0}")]
    InvalidSteps(usize),
}
