//! Floating-point element type shared by every tensor in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use safetensors::Dtype;

/// Element type of images, activations, parameters and gradients.
///
/// Implemented for `f32` (training) and `f64` (gradient verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Storage tag used when writing checkpoints.
    const DTYPE: Dtype;

    /// Converts an `f64` literal into this type.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    /// Decodes little-endian bytes of either supported width.
    fn from_le_bytes_slice(bytes: &[u8], dtype: Dtype) -> Option<Vec<Self>>;
}

fn decode<T: Scalar>(bytes: &[u8], dtype: Dtype) -> Option<Vec<T>> {
    match dtype {
        Dtype::F32 => Some(
            bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
        ),
        Dtype::F64 => Some(
            bytes
                .chunks_exact(8)
                .map(|c| {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(c);
                    T::lit(f64::from_le_bytes(b))
                })
                .collect(),
        ),
        _ => None,
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8], dtype: Dtype) -> Option<Vec<Self>> {
        decode(bytes, dtype)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8], dtype: Dtype) -> Option<Vec<Self>> {
        decode(bytes, dtype)
    }
}
