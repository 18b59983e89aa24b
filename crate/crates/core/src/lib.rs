//! Task-aware active learning with a multi-objective VAE representation learner.
//!
//! A variational autoencoder is trained on labeled and unlabeled images together
//! with a proxy classifier (supervised and rotation-pretext heads), a distillation
//! term towards the target classifier, and an adversarial state discriminator.
//! Unlabeled examples the discriminator finds least "labeled-looking" are sent to
//! the (simulated) oracle each round.

pub mod acquire;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nets;
pub mod pool;
pub mod rng;
pub mod trainer;

pub use config::ALConfig;
pub use dataset::{Dataset, ImageShape};
pub use error::{Error, Result};
pub use pool::PoolState;
pub use rng::Rng;
