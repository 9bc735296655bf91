//! Dense row-major `f32` tensors and the forward kernels shared by the
//! differentiable graph and the inference paths.
//!
//! Every reduction runs in a fixed order (left to right over the reduced
//! axis), so identical inputs always give bit-identical outputs.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; shape/length agreement is a caller invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// SHA-256 over the shape and the little-endian value bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().fold(0.0f32, |acc, v| acc + v)
    }

    pub fn l2_norm(&self) -> f32 {
        l2(&self.data)
    }
}

pub(crate) fn l2(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |acc, x| acc + x * x).sqrt()
}

fn expect_matrix(t: &Tensor, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: other.shape().to_vec(),
        }),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "matmul", b)?;
    let (k2, n) = expect_matrix(b, "matmul", a)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Accumulates `a[m×k] · b[k×n]` into `out[m×n]`.
///
/// Each output element receives its `k` products strictly in order
/// `p = 0, 1, ..., k-1`; the inner loop runs across columns so it
/// vectorizes without reassociating any sum.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_matrix(a, "transpose", a)?;
    Ok(Tensor::from_parts(vec![c, r], transpose_raw(&a.data, r, c)))
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub(crate) fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose_raw(b, n, k);
    let mut out = vec![0.0f32; m * n];
    matmul_into(a, &bt, &mut out, m, k, n);
    out
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub(crate) fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let at = transpose_raw(a, m, k);
    let mut out = vec![0.0f32; k * n];
    matmul_into(&at, b, &mut out, k, m, n);
    out
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub fn silu_scalar(v: f32) -> f32 {
    v * sigmoid(v)
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape.clone(),
        x.data.iter().map(|&v| silu_scalar(v)).collect(),
    )
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut data = x.data.clone();
    for row in data.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::from_parts(x.shape.clone(), data)
}

/// Log-softmax of a single row.
pub(crate) fn log_softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let total = row.iter().fold(0.0f32, |acc, &v| acc + (v - max).exp());
    let log_z = max + total.ln();
    row.iter().map(|&v| v - log_z).collect()
}

pub(crate) fn rms_inverse(row: &[f32], eps: f32) -> f32 {
    let ms = row.iter().fold(0.0f32, |acc, v| acc + v * v) / row.len() as f32;
    1.0 / (ms + eps).sqrt()
}

/// Root-mean-square normalization over the last dimension, then elementwise `scale`.
pub fn rmsnorm(x: &Tensor, scale: &Tensor, eps: f32) -> Result<Tensor> {
    let cols = x.cols();
    if scale.numel() != cols {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            lhs: x.shape.clone(),
            rhs: scale.shape.clone(),
        });
    }
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data.chunks(cols) {
        let inv = rms_inverse(row, eps);
        data.extend(row.iter().zip(&scale.data).map(|(v, s)| v * inv * s));
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

fn zip_same(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matmul(&i2, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_5x7_7x3_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(Tensor::from_vec(vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::from_vec(vec![f32::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 6);
        let b = random(&mut rng, 5, 6);
        let bt = transpose(&b).unwrap();
        let direct = matmul(&a, &bt).unwrap();
        assert_eq!(direct.data(), &matmul_bt(a.data(), b.data(), 4, 6, 5)[..]);
        let c = random(&mut rng, 4, 5);
        let at = transpose(&a).unwrap();
        let direct = matmul(&at, &c).unwrap();
        assert_eq!(direct.data(), &matmul_at(a.data(), c.data(), 4, 6, 5)[..]);
    }

    #[test]
    fn elementwise_suite() {
        assert_eq!(silu_scalar(0.0), 0.0);
        let expected = 1.0f64 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) as f64 - expected).abs() < 1e-7);

        let s = softmax_rows(&Tensor::zeros(&[1, 3]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let x = Tensor::matrix(2, 4, vec![1.0, -2.0, 3.0, 0.5, 10.0, 0.0, -1.0, 4.0]).unwrap();
        let n = rmsnorm(&x, &Tensor::full(&[4], 1.0), 0.0).unwrap();
        for r in 0..2 {
            let ms: f32 = n.row(r).iter().map(|v| v * v).sum::<f32>() / 4.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-6);
        }
        let a = add(&x, &x).unwrap();
        let m = mul(&x, &x).unwrap();
        assert_eq!(a.data()[1], -4.0);
        assert_eq!(m.data()[1], 4.0);
        assert!(add(&x, &Tensor::zeros(&[4, 2])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matmul_agrees_with_naive(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let c = matmul(&a, &b).unwrap();
            for (x, y) in c.data().iter().zip(naive(&a, &b)) {
                prop_assert!((*x as f64 - y).abs() < 1e-5);
            }
            let again = matmul(&a, &b).unwrap();
            prop_assert!(c.bit_eq(&again));
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-20.0f32..20.0, 1..32)) {
            let n = vals.len();
            let s = softmax_rows(&Tensor::matrix(1, n, vals).unwrap());
            let total: f32 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
        }
    }
}
