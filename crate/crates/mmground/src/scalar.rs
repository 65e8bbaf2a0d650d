//! Floating-point scalar abstraction so the whole numeric stack runs in
//! either f32 (training speed) or f64 (finite-difference verification).

use ndarray::{NdFloat, ScalarOperand};
use num_traits::{FromPrimitive, ToPrimitive};

/// Element type for every tensor in the model, grounder, losses and trainer.
pub trait Scalar:
    NdFloat + ScalarOperand + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Numeric code stored in tensor blob headers.
    const DTYPE_CODE: u8;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;
}

/// Shorthand for converting literal constants into the active scalar type.
#[inline]
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// Lossless-enough readback for logging and reports.
#[inline]
pub fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("finite scalar")
}
