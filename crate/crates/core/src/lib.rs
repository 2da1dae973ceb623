//! Cell tracking and motion phenotype clustering for 4D microscopy volumes.

pub mod clustering;
pub mod config;
pub mod detection;
pub mod dynamics;
pub mod error;
pub mod parallel;
pub mod pipeline;
pub mod similarity;
pub mod tracking;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
