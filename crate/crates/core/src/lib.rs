//! Three generative paradigms on one tiny U-Net: DDPM with DDIM sampling,
//! rectified-flow matching with classifier-free guidance, and one-step
//! MeanFlow, plus mask-guided inpainting with inpainting-aware fine-tuning.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inpaint;
pub mod metrics;
pub mod model;
pub mod processes;
pub mod samplers;
pub mod training;

pub use error::{Error, Result};
