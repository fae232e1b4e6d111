use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, stored row-major.
///
/// `requires_grad` marks leaf tensors whose gradient the backward pass must
/// report. It has no effect on forward arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must list positive dimensions, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    /// A shape-`[1]` scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// A `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Tensor {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a shape-`[1]` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Plain (non-recorded) matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape(
                "Tensor::matmul",
                format!("cannot multiply {:?} by {:?}", self.shape, rhs.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.data, &rhs.data, m, k, n, &mut out);
        Tensor::from_vec(vec![m, n], out)
    }

    /// Plain transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "Tensor::transposed",
                format!("expected rank 2, shape is {:?}", self.shape),
            ));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![n, m], out)
    }

    /// Frobenius norm over all entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }
}

/// C[m,n] += is not used; this overwrites `out` with A[m,k] * B[k,n].
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large |x|.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Valid (no padding, stride 1) cross-correlation.
///
/// input `[ci, h, w]` slice per sample, kernels `[co, ci, k, k]`, bias `[co]`,
/// writes `[co, oh, ow]` into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_sample_raw(
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    out: &mut [f64],
) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    for c in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[c];
                for j in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iv = input[j * h * w + (oy + ky) * w + (ox + kx)];
                            let kv = kernels[c * ci * k * k + j * k * k + ky * k + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[c * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let prod = i2.matmul(&d).unwrap();
        assert_eq!(prod.data(), d.data());
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let back = t.transposed().unwrap().transposed().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn sigmoid_symmetry_and_stability() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(800.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0).abs() < 1e-15);
        assert!((sigmoid_scalar(2.0) + sigmoid_scalar(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-5.0, -0.5, 0.0, 0.7, 4.0] {
            let naive = (1.0_f64 + f64::exp(x)).ln();
            assert!((softplus_scalar(x) - naive).abs() < 1e-12);
        }
        assert_eq!(softplus_scalar(1000.0), 1000.0);
        assert!(softplus_scalar(-1000.0) >= 0.0);
    }
}
