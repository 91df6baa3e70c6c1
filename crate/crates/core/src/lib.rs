//! Subnational total fertility rate projections from national trajectory
//! ensembles.

pub mod calibration;
pub mod cli;
pub mod correlation;
pub mod data;
pub mod error;
pub mod loess;
pub mod projection;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod validation;

pub use error::{Error, Result};
