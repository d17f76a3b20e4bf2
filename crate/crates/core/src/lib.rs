//! Contrastive flow matching (ΔFM) on small class-conditional problems.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: the linear stochastic interpolant and its velocity/score/posterior identities.
//! - [`model`]: a dense velocity-field network with hand-written reverse-mode gradients.
//! - [`objective`]: flow-matching and contrastive flow-matching losses, mean trajectory, closed-form shift.
//! - [`trainer`]: batch step and training loop with SGD or adaptive moments.
//! - [`sampler`]: Euler ODE / Euler–Maruyama SDE integration with standard and λ-corrected guidance.
//! - [`data`]: Gaussian-mixture datasets with analytic posteriors and optimal velocities, CSV ingestion.
//! - [`metrics`]: 2-Wasserstein distance, ambiguity fraction, cross-class flow overlap.
//! - [`oracle`]: brute-force pointwise minimisation used to check the closed-form optimum.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Label, VelocityField, VelocityModel};
pub use schedule::Schedule;
