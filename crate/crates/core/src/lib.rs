//! Temporal action proposal generation from actors, objects and environment
//! features.
//!
//! The pipeline runs per video: per-snippet features are fused by the
//! perception module ([`pmr`], built on the adaptive attention of [`aam`]),
//! the fused sequence is scored by the boundary-matching module ([`bmm`]),
//! and the scores are decoded into proposals ([`inference`]) and measured
//! ([`evaluation`]). [`training`] generates labels, computes the losses and
//! runs the optimizer. Everything differentiable is built on the small
//! reverse-mode engine in [`tensor`].

pub mod aam;
pub mod bmm;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod objects;
pub mod pipeline;
pub mod pmr;
pub mod real;
pub mod tensor;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
pub use model::{AoeNet, ModelConfig};
pub use real::Real;
