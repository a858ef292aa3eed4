//! Dynamic-fusion composed image retrieval: tensors, reverse-mode autodiff,
//! encoders, fusion modules, soft routing, training, and evaluation.
//!
//! The numeric core is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below fix the default precision used by the
//! trainer, the CLI, and all serialized artifacts.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod router;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision parameter store.
pub type ParamSet = params::ParamSet<f64>;
/// Default-precision gradient collection.
pub type GradientMap = params::GradientMap<f64>;
/// Default-precision tape.
pub type Tape = tape::Tape<f64>;
/// Default-precision tape handle.
pub type Var<'t> = tape::Var<'t, f64>;
