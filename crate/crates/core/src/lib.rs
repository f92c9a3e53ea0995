//! Boosted ensembles of binarized transformer encoder classifiers.
pub mod data;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod quant;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
