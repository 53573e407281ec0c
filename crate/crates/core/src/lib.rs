//! Source-free domain adaptation for multichannel time series with a dual
//! time/frequency branch model, built on a small tape autodiff core.

pub mod augment;
pub mod cli;
pub mod curriculum;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod select;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
