//! Dense row-major `f64` tensors and convolution filter banks.
//!
//! [`Tensor`] is a plain value. Gradient tracking lives on the autodiff tape
//! (see [`crate::autodiff::Var`]), which wraps tensors as graph nodes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, DanError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return shape_err(format!("dims must be positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} hold {n} elements but data has {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive");
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self { dims: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(|_| normal.sample(rng)).collect() }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        if bound == 0.0 {
            return Self::zeros(dims);
        }
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound must be finite");
        Self { dims: dims.to_vec(), data: (0..n).map(|_| dist.sample(rng)).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for axis of size {d}");
            acc * d + i
        })
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let [r, c] = self.dims[..] else {
            return shape_err(format!("transpose2 needs a matrix, got {:?}", self.dims));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Plain matrix product (no autodiff).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (&self.dims[..], &rhs.dims[..]) else {
            return shape_err("matmul needs two matrices");
        };
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let out = crate::autodiff::kernels::matmul(&self.data, &rhs.data, m, k, n);
        Tensor::new(vec![m, n], out)
    }
}

/// Convolution weights `[c_out, c_in, k, k]` plus one bias per output filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub weights: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
}

impl FilterBank {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let &[c_out, _c_in, k, k2] = weights.dims() else {
            return shape_err(format!("filter weights must be 4-D, got {:?}", weights.dims()));
        };
        if k != k2 {
            return shape_err("filters must be square");
        }
        if bias.dims() != [c_out] {
            return shape_err(format!("bias dims {:?} for {c_out} filters", bias.dims()));
        }
        Ok(Self { weights, bias, frozen: false })
    }

    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn random<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weights = Tensor::uniform(&[c_out, c_in, k, k], bound, rng);
        let bias = Tensor::uniform(&[c_out], bound, rng);
        Self { weights, bias, frozen: false }
    }

    pub fn c_out(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.dims()[2]
    }

    /// Length of one flattened filter, `c_in * k * k`.
    pub fn filter_len(&self) -> usize {
        self.c_in() * self.kernel() * self.kernel()
    }
}

/// Row `r` of the result is filter `r` flattened in row-major order.
pub fn flatten_filters(fb: &FilterBank) -> Tensor {
    fb.weights
        .reshape(&[fb.c_out(), fb.filter_len()])
        .expect("well-formed filter bank")
}

pub fn unflatten_filters(m: &Tensor, target_dims: &[usize]) -> Result<Tensor> {
    let &[c_out, c_in, k, k2] = target_dims else {
        return shape_err(format!("target dims must be 4-D, got {target_dims:?}"));
    };
    let &[rows, cols] = m.dims() else {
        return shape_err(format!("expected a matrix, got {:?}", m.dims()));
    };
    if rows != c_out || cols != c_in * k * k2 {
        return Err(DanError::Shape(format!(
            "matrix {rows}x{cols} cannot unflatten to {target_dims:?}"
        )));
    }
    m.reshape(target_dims)
}
