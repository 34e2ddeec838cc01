//! Dense row-major tensors with up to four axes.
//!
//! Deliberately minimal: the generators only need vectors, matrices, the
//! stacked square feature maps produced by the deconvolution chain, and the
//! four-axis deconvolution kernels. No views, no broadcasting.

use crate::scalar::Scalar;
use crate::{Error, Result};

pub const MAX_AXES: usize = 4;

/// Shape of a tensor: up to [`MAX_AXES`] axes, stored inline.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; MAX_AXES],
    ndim: u8,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= MAX_AXES,
            "shape must have 1..=4 axes"
        );
        let mut d = [1; MAX_AXES];
        d[..dims.len()].copy_from_slice(dims);
        Shape {
            dims: d,
            ndim: dims.len() as u8,
        }
    }

    pub fn ndim(&self) -> usize {
        self.ndim as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim as usize]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Dense row-major tensor over a [`Scalar`] type.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims);
        Tensor {
            data: vec![S::zero(); shape.len()],
            shape,
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Self {
        let shape = Shape::new(dims);
        assert_eq!(shape.len(), data.len(), "shape/data length mismatch");
        Tensor { shape, data }
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single-element accessor for scalar tensors.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> S {
        let d = self.shape.dims;
        self.data[i * d[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> S {
        let d = self.shape.dims;
        self.data[(i * d[1] + j) * d[2] + k]
    }

    #[inline]
    pub fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> S {
        let d = self.shape.dims;
        self.data[((i * d[1] + j) * d[2] + k) * d[3] + l]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        let d = self.shape.dims;
        self.data[i * d[1] + j] = v;
    }

    #[inline]
    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: S) {
        let d = self.shape.dims;
        self.data[(i * d[1] + j) * d[2] + k] = v;
    }

    #[inline]
    pub fn set4(&mut self, i: usize, j: usize, k: usize, l: usize, v: S) {
        let d = self.shape.dims;
        self.data[((i * d[1] + j) * d[2] + k) * d[3] + l] = v;
    }

    /// Copy of row `i` of a matrix.
    pub fn row(&self, i: usize) -> Tensor<S> {
        assert_eq!(self.shape.ndim(), 2, "row() on non-matrix");
        let cols = self.shape.dims[1];
        Tensor::from_vec(&[cols], self.data[i * cols..(i + 1) * cols].to_vec())
    }

    /// Copy of the channel fiber `self[r, c, :]` of a 3-axis tensor.
    pub fn fiber(&self, r: usize, c: usize) -> Tensor<S> {
        assert_eq!(self.shape.ndim(), 3, "fiber() on non-3-axis tensor");
        let (s1, ch) = (self.shape.dims[1], self.shape.dims[2]);
        let base = (r * s1 + c) * ch;
        Tensor::from_vec(&[ch], self.data[base..base + ch].to_vec())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * other`, shapes must match.
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        assert!(self.same_shape(other), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn sq_l2_norm(&self) -> S {
        self.data.iter().map(|x| *x * *x).sum()
    }

    pub fn l2_norm(&self) -> S {
        self.sq_l2_norm().sqrt()
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// `y = W x` for `W: (m, n)`, `x: (n)`.
pub fn matvec<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if w.shape().ndim() != 2 || x.shape().ndim() != 1 || w.dims()[1] != x.dims()[0] {
        return Err(Error::Dimension(format!(
            "matvec {:?} x {:?}",
            w.dims(),
            x.dims()
        )));
    }
    let (m, n) = (w.dims()[0], w.dims()[1]);
    let mut out = vec![S::zero(); m];
    for i in 0..m {
        let row = &w.data()[i * n..(i + 1) * n];
        let mut acc = S::zero();
        for (a, b) in row.iter().zip(x.data()) {
            acc += *a * *b;
        }
        out[i] = acc;
    }
    Ok(Tensor::from_vec(&[m], out))
}

pub fn dot<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "dot {:?} . {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).sum())
}

pub fn concat<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape().ndim(), 1);
    assert_eq!(b.shape().ndim(), 1);
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.len() + b.len()], data)
}

pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let sum: S = xs.iter().map(|x| (*x - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = logits.iter().map(|x| (*x - max).exp()).collect();
    let total: S = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v = *v / total;
    }
    out
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}
