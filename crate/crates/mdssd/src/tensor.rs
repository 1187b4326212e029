//! Dense 4-D tensors in batch-channel-height-width layout.
//!
//! Every feature map, weight and image in this crate is a [`Tensor`]. The
//! scalar type is a compile-time choice between `f32` (training builds) and
//! `f64` (gradient-check builds) via the [`Scalar`] trait.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type: `f32` for speed, `f64` for finite-difference checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + 'static
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype code used by the MDT1 container (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn max_s(self, other: Self) -> Self;
    fn min_s(self, other: Self) -> Self;
    fn is_finite_s(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE_CODE: u8 = 0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn max_s(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn min_s(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn is_finite_s(self) -> bool {
        f32::is_finite(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE_CODE: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn max_s(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min_s(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn is_finite_s(self) -> bool {
        f64::is_finite(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

/// Extents of a 4-D tensor: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of element (b, c, y, x) in row-major NCHW order.
    #[inline(always)]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array with an optional gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::ZERO; shape.numel()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> S) -> Self {
        let data = (0..shape.numel()).map(|i| f(i)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.index(b, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    /// The per-batch-item slice (all channels of image `b`).
    pub fn batch_item(&self, b: usize) -> &[S] {
        let stride = self.shape.c * self.shape.h * self.shape.w;
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn batch_item_mut(&mut self, b: usize) -> &mut [S] {
        let stride = self.shape.c * self.shape.h * self.shape.w;
        &mut self.data[b * stride..(b + 1) * stride]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    /// Allocate (or zero) the gradient slot.
    pub fn alloc_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = S::ZERO),
            None => self.grad = Some(vec![S::ZERO; self.data.len()]),
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_s())
    }

    /// Debug-build guard: forward ops on finite inputs must yield finite outputs.
    #[inline]
    pub fn debug_assert_finite(&self, context: &str) {
        debug_assert!(
            self.is_finite(),
            "non-finite value produced by {context} (shape {})",
            self.shape
        );
    }

    /// Convert element-wise between scalar types.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_index_is_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), s.numel() - 1);
    }

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f32; 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3"), "{msg}");
        assert!(msg.contains("1x1x2x2"), "{msg}");
    }

    #[test]
    fn grad_slot_lifecycle() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 4));
        assert!(t.grad().is_none());
        t.alloc_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
        t.grad_mut().unwrap()[2] = 7.0;
        t.alloc_grad(); // re-zeroes
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }
}
