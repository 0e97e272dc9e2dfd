//! Ordinal-aware image-tabular contrastive pretraining for synthetic
//! fiber-composite microstructures.
//!
//! The crate is organized around a small f64 autodiff engine
//! ([`autodiff`]), two transformer encoders with low-rank adapters
//! ([`encoders`]), the alignment / ordinal contrastive objectives
//! ([`losses`]), an exact two-objective Pareto step ([`pareto`]), the
//! pretraining driver ([`trainer`]), frozen-feature evaluation
//! ([`downstream`]), and a descriptor-conditioned diffusion generator
//! ([`diffgen`]). Paired training data is produced procedurally by
//! [`rvegen`].

pub mod autodiff;
pub mod config;
pub mod diffgen;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod pareto;
pub mod rvegen;
pub mod trainer;
pub(crate) mod util;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
