//! Discrete flow matching on enumerable state spaces.
//!
//! The crate covers the full generative loop over a finite vocabulary:
//! embedding-induced distances ([`token_space`]), time schedules
//! ([`schedule`]), conditional probability paths ([`paths`]), kinetic-optimal
//! probability velocities ([`velocity`]), exact and trainable denoisers
//! ([`denoiser`]), the CTMC Euler sampler ([`sampler`]), toy tasks
//! ([`data`]) and residual checks that the pieces satisfy the rate condition
//! and the continuity equation ([`verify`]).
//!
//! The mathematical layer is generic over a [`Scalar`] (`f32` or `f64`).
//! The trainable model, the toy tasks and the verification suite work in
//! `f64`; the aliases below name the `f64` instantiations used there.

pub mod data;
pub mod denoiser;
pub mod error;
pub mod paths;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod token_space;
pub mod velocity;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TokenSpace64 = token_space::TokenSpace<f64>;
pub type TokenSpace32 = token_space::TokenSpace<f32>;
pub type DistanceTable64 = token_space::DistanceTable<f64>;
pub type BetaSchedule64 = schedule::BetaSchedule<f64>;
pub type BetaSchedule32 = schedule::BetaSchedule<f32>;
pub type Path64 = paths::ConditionalPath<f64>;
pub type Path32 = paths::ConditionalPath<f32>;
pub type Joint64 = paths::JointDistribution<f64>;
pub type VelocityRow64 = velocity::VelocityRow<f64>;
pub type Oracle64 = denoiser::OracleDenoiser<f64>;
pub type Posterior64 = denoiser::Posterior<f64>;
pub type SampleTrace64 = sampler::SampleTrace<f64>;
