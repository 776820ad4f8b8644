//! Deep adaptation networks: frozen convolutional base networks extended to
//! new tasks by controller modules that linearly recombine existing filters.

pub mod archive;
pub mod autodiff;
pub mod cli;
pub mod bars;
pub mod config;
pub mod dan;
pub mod decider;
pub mod nn;
pub mod quant;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{DanError, Result};
pub use tensor::{flatten_filters, unflatten_filters, FilterBank, Tensor};
