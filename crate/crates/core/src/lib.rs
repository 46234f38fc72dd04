//! Tensor Product Recurrent Network cells with a quantization objective,
//! trained by back-propagation through time, plus tooling to interpret the
//! learned symbols and roles against ground-truth annotations.

pub mod cell;
pub mod config;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod jsonfmt;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod reference;
pub mod train;
pub mod wide;

pub use error::{Error, Result};
