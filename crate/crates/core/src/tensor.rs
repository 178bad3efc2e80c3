//! Dense rank-4 tensors in batch × height × width × channels layout.

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Extents `[batch, height, width, channels]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(b: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([b, h, w, c])
    }

    /// A `rows × cols` matrix stored as `[1, 1, rows, cols]`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape([1, 1, rows, cols])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn height(&self) -> usize {
        self.0[1]
    }
    pub fn width(&self) -> usize {
        self.0[2]
    }
    pub fn channels(&self) -> usize {
        self.0[3]
    }

    /// Row count when the tensor is viewed as a `(B·H·W) × C` matrix.
    pub fn rows(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn with_channels(&self, c: usize) -> Shape {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }

    #[inline]
    pub fn index(&self, b: usize, i: usize, j: usize, c: usize) -> usize {
        ((b * self.0[1] + i) * self.0[2] + j) * self.0[3] + c
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return shape_err(format!("{shape} needs {} values, got {}", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [nb, nh, nw, nc] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..nb {
            for i in 0..nh {
                for j in 0..nw {
                    for c in 0..nc {
                        data.push(f(b, i, j, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Shape::matrix(rows, cols), data)
    }

    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, i: usize, j: usize, c: usize) -> T {
        self.data[self.shape.index(b, i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, i: usize, j: usize, c: usize, v: T) {
        let k = self.shape.index(b, i, j, c);
        self.data[k] = v;
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    /// Copy of batch item `b` as a `1×H×W×C` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let per = self.shape.height() * self.shape.width() * self.shape.channels();
        Tensor {
            shape: Shape::new(1, self.shape.height(), self.shape.width(), self.shape.channels()),
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenate equally shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return shape_err("cannot stack an empty list");
        };
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.0[1..] != s.0[1..] {
                return shape_err(format!("stack extents differ: {} vs {}", t.shape, s));
            }
            batch += t.shape.batch();
            data.extend_from_slice(&t.data);
        }
        Self::new(Shape::new(batch, s.height(), s.width(), s.channels()), data)
    }

    /// Single channel `c` as a `B×H×W×1` tensor.
    pub fn channel(&self, c: usize) -> Tensor<T> {
        let nc = self.shape.channels();
        Tensor {
            shape: self.shape.with_channels(1),
            data: self.data.iter().skip(c).step_by(nc).copied().collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>({}", T::DTYPE, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}
