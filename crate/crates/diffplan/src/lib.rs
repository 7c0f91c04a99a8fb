//! Diffusion-based motion planning for 2D crowd navigation.
//!
//! The crate trains a small denoising diffusion model to propose ego
//! trajectories conditioned on observed history, neighbor forecasts, and a
//! goal, then fine-tunes it with policy-gradient updates that maximize
//! non-differentiable navigation rewards (collision avoidance, goal success,
//! comfort). Binary reward thresholds are adapted automatically so the
//! scored population stays informative. Everything is deterministic given a
//! seed: scene generation, training, sampling, and evaluation.

pub mod checkpoint;
pub mod ddpo;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod forecast;
pub mod geom;
pub mod guidance;
pub mod metrics;
pub mod pipeline;
pub mod rewards;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
pub use geom::Vec2;
pub use rng::StreamRng;
