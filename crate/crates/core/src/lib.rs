#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod identity;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod perturb;
pub mod regressor;
pub mod render;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
