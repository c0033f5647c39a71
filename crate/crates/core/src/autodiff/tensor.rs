//! Dense row-major `f64` arrays.
//!
//! `Tensor` carries no graph information; it is the value type stored inside
//! graph nodes and the currency for parameters, datasets and gradients.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast two shapes with right-aligned numpy rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `small` aligned against `big` (zero where `small` is broadcast).
fn aligned_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let offset = rank - small.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= small[i];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, passing the linear
/// offset of the aligned small tensor.
fn for_each_aligned(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel_of(big);
    if total == 0 {
        return;
    }
    let rank = big.len();
    let mut idx = vec![0usize; rank];
    let mut small_off = 0usize;
    for lin in 0..total {
        f(lin, small_off);
        // increment the multi-index
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            small_off += strides[d];
            if idx[d] < big[d] {
                break;
            }
            small_off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::new(shape.to_vec(), data).expect("tensor data length")
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn full(shape: &[usize], x: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![x; numel_of(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} values", self.numel());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "zip_map shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.numel(), other.numel());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// `op(self) · op(other)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert!(
            self.rank() == 2 && other.rank() == 2,
            "matmul needs rank-2 operands, got {:?} and {:?}",
            self.shape,
            other.shape
        );
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (other.shape[0], other.shape[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(
            k, k2,
            "matmul inner dimension mismatch: {:?}{} x {:?}{}",
            self.shape,
            if ta { "ᵀ" } else { "" },
            other.shape,
            if tb { "ᵀ" } else { "" }
        );
        let mut out = vec![0.0; m * n];
        if m == 0 || n == 0 {
            return Tensor::matrix(m, n, out);
        }
        // strides of the (possibly transposed) logical operands
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: pointers cover m*k, k*n and m*n elements with the strides above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::matrix(m, n, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let target = broadcast_shape(&self.shape, shape);
        assert!(
            target.as_deref() == Some(shape),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        if self.numel() == 1 {
            return Tensor::full(shape, self.data[0]);
        }
        let strides = aligned_strides(&self.shape, shape);
        let mut out = vec![0.0; numel_of(shape)];
        for_each_aligned(shape, &strides, |lin, off| out[lin] = self.data[off]);
        Tensor::from_vec(shape, out)
    }

    /// Sums broadcast dimensions away so that the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        assert!(
            broadcast_shape(shape, &self.shape).as_deref() == Some(self.shape.as_slice()),
            "cannot sum {:?} down to {:?}",
            self.shape,
            shape
        );
        let mut out = vec![0.0; numel_of(shape)];
        if out.len() == 1 {
            out[0] = self.sum();
        } else {
            let strides = aligned_strides(shape, &self.shape);
            for_each_aligned(&self.shape, &strides, |lin, off| out[off] += self.data[lin]);
        }
        Tensor::from_vec(shape, out)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        assert!(axis < shape.len(), "axis {} out of range for {:?}", axis, shape);
        let outer = numel_of(&shape[..axis]);
        let inner = numel_of(&shape[axis + 1..]);
        (outer, shape[axis], inner)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        let mut shape = first.to_vec();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b),
                "concat shape mismatch {:?} vs {:?} on axis {}",
                s,
                first,
                axis
            );
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = Tensor::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        Tensor::from_vec(&shape, out)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, n, inner) = Tensor::axis_split(&self.shape, axis);
        assert!(start + len <= n, "slice {}..{} out of range {}", start, start + len, n);
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor::from_vec(&shape, out)
    }

    /// Embeds `self` at `start` along `axis` into zeros of extent `total`.
    pub fn pad(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let (outer, len, inner) = Tensor::axis_split(&self.shape, axis);
        assert!(start + len <= total);
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            out[dst..dst + len * inner]
                .copy_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
        }
        Tensor::from_vec(&shape, out)
    }

    /// Repeats every row of a rank-2 tensor `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(self.row(i));
            }
        }
        Tensor::matrix(r * times, c, out)
    }

    /// Tiles a rank-2 tensor `times` times along the row axis.
    pub fn tile_rows(&self, times: usize) -> Tensor {
        let mut out = Vec::with_capacity(self.numel() * times);
        for _ in 0..times {
            out.extend_from_slice(&self.data);
        }
        Tensor::matrix(self.rows() * times, self.cols(), out)
    }

    /// Gathers the listed rows of a rank-2 tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
