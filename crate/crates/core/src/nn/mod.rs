//! Minimal dense-layer toolkit with explicit backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and `f64` for finite-difference gradient checks. Activations are
//! row-major matrices of shape `(batch · length, features)`.

mod attention;
mod conv;
mod layers;
mod params;

pub use attention::{
    masked_softmax_rows, sha, sha_backward, AttentionCache, AttentionMask, MaskKind,
    MultiHeadAttention,
};
pub use conv::{Conv2d, Conv2dCache};
pub use layers::{
    positional_encoding, relu, relu_backward, Dropout, Embedding, FeedForward, FeedForwardCache,
    LayerNorm, LayerNormCache, Linear,
};
pub use params::{ParamId, Params};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
