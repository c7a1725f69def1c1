pub mod catalog;
pub mod container;
pub mod costmodel;
pub mod delta_source;
pub mod executor;
pub mod digest;
pub mod error;
pub mod meter;
pub mod operators;
pub mod planner;
pub mod report;
pub mod synth;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
