//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the same code runs in f32 or
//! f64. Training, checkpointing, and the CLI pin f64 (gradient verification at
//! the tolerances used here is not reachable in 32-bit); the f32 instantiation
//! exists for inference-style experiments.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64, for literals and config values.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to f64 for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
