//! Noise schedules, denoising losses, samplers, in-painting and a
//! likelihood proxy.

mod elbo;
mod io;
pub mod model;
pub mod sample;
pub mod schedule;
mod train;

pub use io::DIFFUSION_TAG;
pub use model::{Denoiser, DiffusionModel, FnDenoiser, LossDraw, Parameterization};
pub use sample::{strided_steps, ConditionMask, CountingDenoiser, Sampler};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use train::{FitConfig, MaskedDraw};

use crate::error::Result;
use crate::numcore::Scalar;

/// Builds a schedule of `kind` with `steps` steps.
pub fn make_schedule<S: Scalar>(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule<S>> {
    NoiseSchedule::new(kind, steps)
}
