//! Diffusion-based next-item recommendation with quantized sequence
//! guidance and contrastive dispersion of denoised items.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod svq;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tensor::Matrix;
pub use training::{TrainConfig, TrainOutcome};
