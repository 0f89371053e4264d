//! Feature-denoising fusion engine.
//!
//! The pipeline in one breath: freeze a small affine-chain backbone, train a
//! per-layer linear denoiser on its intermediate features, then fold each
//! denoiser step into the adjacent affine layer so inference pays nothing
//! for the cleanup. `verify` replays both paths and reports the gap.
//!
//! Modules:
//! - [`numerics`]: dense row-major matrices, seeded RNG, blob I/O
//! - [`schedule`]: noise schedule and its derived constants
//! - [`backbone`]: the frozen toy backbone
//! - [`denoiser`]: per-layer linear noise predictors and their training
//! - [`fusion`]: closed-form folding of denoise steps into affine weights
//! - [`evalkit`]: synthetic retrieval benchmark, probes, latency

pub mod backbone;
mod ckpt;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod numerics;
pub mod schedule;

pub use backbone::{Activation, ToyBackbone};
pub use denoiser::{DenoiseLayer, NoiseScale, TrainConfig, TrainReport, ZPolicy};
pub use error::{Error, Result};
pub use fusion::{Algebra, FusedModel, FusionMode};
pub use numerics::{Matrix, Rng, Vector};
pub use schedule::{NoiseSchedule, ScheduleParams};
