//! Color-polarization demosaicking with an exact CPFA imaging model,
//! equivariance self-supervision and meta-learned task feature alignment.

pub mod app;
pub mod array;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optics;
pub mod params;
pub mod patfile;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use array::{Array, PadMode};
pub use autodiff::{grad, Tensor};
pub use error::{Error, Result};
