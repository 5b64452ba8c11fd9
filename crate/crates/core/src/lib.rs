pub mod error;
pub mod coupling;
pub mod data;
pub mod lattice;
pub mod model;
pub mod analysis;
pub mod cli;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
