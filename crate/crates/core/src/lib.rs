//! Identity-preserving score distillation, studied at desk scale.
//!
//! The crate implements score distillation sampling (SDS), delta denoising
//! score (DDS) and identity-preserving distillation sampling (IDS). IDS
//! refines the noisy source latent by fixed-point regularization (FPR) so
//! that its Tweedie posterior mean reproduces the source, then reuses the
//! extracted guided noise on the target side.
//!
//! Scores come from a [`backend::ScoreBackend`]: an analytic Gaussian
//! mixture whose score, Jacobian and posterior mean are closed form, or a
//! tiny trained MLP denoiser. See `examples/` for one runnable walkthrough
//! per capability.

pub mod backend;
pub mod distill;
pub mod error;
pub mod fpr;
pub mod guidance;
pub mod latent;
pub mod metrics;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod tasks;
pub mod tweedie;

pub use backend::{Backend, Condition, ScoreBackend};
pub use error::{Error, Result};
pub use latent::Latent;
pub use rng::Rng;
pub use schedule::{alpha_at, forward_diffuse, NoiseSchedule, ScheduleKind};
