//! Dense row-major tensors and the handful of kernels everything else uses.
//!
//! Layout is fixed: row-major (last dimension contiguous), which also defines
//! the serialized byte order. Data sits behind an `Arc`, so clones are cheap
//! and every operation is pure — same inputs give bit-identical outputs, and
//! values can be shared across threads for reading.
//!
//! Matrix products come in three variants (`matmul`, `matmul_nt`, `matmul_tn`)
//! so callers never materialize transposes. The inner loops use fixed-shape
//! accumulator arrays with a fixed reduction tree: the summation order is part
//! of the function's behavior, not left to the optimizer, which keeps results
//! reproducible while still autovectorizing.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense tensor with row-major layout.
#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.as_slice() == other.data.as_slice()
    }
}

fn shape_err(msg: String) -> CoreError {
    CoreError::Shape(msg)
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Invalid(format!(
                "tensor shape entries must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} implies {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![T::zero(); numel]) }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    fn rows_cols(&self, op: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(shape_err(format!("{op} expects a 2-D tensor, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · b` for `self [m×k]`, `b [k×n]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.rows_cols("matmul lhs")?;
        let (kb, n) = b.rows_cols("matmul rhs")?;
        if k != kb {
            return Err(shape_err(format!(
                "matmul inner dims differ: lhs {:?} rhs {:?}",
                self.shape, b.shape
            )));
        }
        let out = mm_nn(self.data(), b.data(), m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// `self · bᵀ` for `self [m×k]`, `b [n×k]`.
    pub fn matmul_nt(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.rows_cols("matmul_nt lhs")?;
        let (n, kb) = b.rows_cols("matmul_nt rhs")?;
        if k != kb {
            return Err(shape_err(format!(
                "matmul_nt trailing dims differ: lhs {:?} rhs {:?}",
                self.shape, b.shape
            )));
        }
        let out = mm_nt(self.data(), b.data(), m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// `selfᵀ · b` for `self [k×m]`, `b [k×n]`.
    pub fn matmul_tn(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = self.rows_cols("matmul_tn lhs")?;
        let (kb, n) = b.rows_cols("matmul_tn rhs")?;
        if k != kb {
            return Err(shape_err(format!(
                "matmul_tn leading dims differ: lhs {:?} rhs {:?}",
                self.shape, b.shape
            )));
        }
        let out = mm_tn(self.data(), b.data(), k, m, n);
        Tensor::new(&[m, n], out)
    }

    fn zip(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{op} needs equal shapes: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// `self + c·other`, the fused update used by Euler steps and optimizers.
    pub fn add_scaled(&self, other: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        self.zip(other, "add_scaled", |a, b| a + c * b)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Converts element type through f64 (exact when widening).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&x| U::of(x.as_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn silu(&self) -> Tensor<T> {
        self.map(|x| x * sigmoid(x))
    }

    /// Broadcast-adds a `[d]` row vector to every row of `self [n×d]`.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("add_row")?;
        if row.shape() != [d] {
            return Err(shape_err(format!(
                "add_row expects row [{d}], got {:?}",
                row.shape()
            )));
        }
        let r = row.data();
        let mut out = self.data.as_slice().to_vec();
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                o[j] = o[j] + r[j];
            }
        }
        Tensor::new(&[n, d], out)
    }

    /// Broadcast-multiplies every row of `self [n×d]` by a `[d]` row vector.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("mul_row")?;
        if row.shape() != [d] {
            return Err(shape_err(format!(
                "mul_row expects row [{d}], got {:?}",
                row.shape()
            )));
        }
        let r = row.data();
        let mut out = self.data.as_slice().to_vec();
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                o[j] = o[j] * r[j];
            }
        }
        Tensor::new(&[n, d], out)
    }

    /// Column sums of `self [n×d]`, returned as `[d]`.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("sum_rows")?;
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            let r = &self.data[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = out[j] + r[j];
            }
        }
        Tensor::new(&[d], out)
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("softmax_rows")?;
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &self.data[i * d..(i + 1) * d];
            let o = &mut out[i * d..(i + 1) * d];
            softmax_row(row, o);
        }
        Tensor::new(&[n, d], out)
    }

    /// Normalizes the trailing dimension of each row to mean 0, variance 1
    /// (population variance), then applies the affine map `gamma·x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = *self.shape.last().ok_or_else(|| shape_err("layer_norm on 0-d tensor".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(format!(
                "layer_norm affine params must be [{d}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let normed = self.layer_norm_rows(eps)?;
        let g = gamma.data();
        let b = beta.data();
        let mut out = normed.data.as_slice().to_vec();
        for chunk in out.chunks_mut(d) {
            for j in 0..d {
                chunk[j] = chunk[j] * g[j] + b[j];
            }
        }
        Tensor::new(&self.shape, out)
    }

    /// Non-affine layer norm over the trailing dimension.
    pub fn layer_norm_rows(&self, eps: T) -> Result<Tensor<T>> {
        let d = *self.shape.last().ok_or_else(|| shape_err("layer_norm on 0-d tensor".into()))?;
        let mut out = self.data.as_slice().to_vec();
        for chunk in out.chunks_mut(d) {
            layer_norm_row(chunk, eps);
        }
        Tensor::new(&self.shape, out)
    }

    /// Concatenates along the leading dimension; trailing dims must match.
    pub fn concat_rows(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() == 0 || self.shape[1..] != other.shape[1..] {
            return Err(shape_err(format!(
                "concat_rows trailing dims differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        let mut shape = self.shape.clone();
        shape[0] += other.shape[0];
        Tensor::new(&shape, data)
    }

    /// Rows `[start, start+len)` along the leading dimension.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if self.ndim() == 0 || start + len > self.shape[0] || len == 0 {
            return Err(shape_err(format!(
                "slice_rows [{start}, {}) out of bounds for {:?}",
                start + len,
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let data = self.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(&shape, data)
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("slice_cols")?;
        if start + len > d || len == 0 {
            return Err(shape_err(format!(
                "slice_cols [{start}, {}) out of bounds for {:?}",
                start + len,
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * d + start..i * d + start + len]);
        }
        Tensor::new(&[n, len], data)
    }

    /// Gathers rows of a 2-D tensor by index (indices may repeat).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("gather_rows")?;
        if ids.is_empty() {
            return Err(CoreError::Invalid("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(CoreError::Invalid(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Tensor::new(&[ids.len(), d], data)
    }

    /// Element gather: `out[i] = self.flat[table[i]]`, reshaped to `shape`.
    /// With a bijective table this is a pure layout permutation (patchify).
    pub fn reindex(&self, table: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != table.len() {
            return Err(shape_err(format!(
                "reindex table length {} does not match shape {shape:?}",
                table.len()
            )));
        }
        if let Some(&bad) = table.iter().find(|&&i| i >= self.numel()) {
            return Err(CoreError::Invalid(format!(
                "reindex source index {bad} out of range for {} elements",
                self.numel()
            )));
        }
        let src = self.data();
        let data = table.iter().map(|&i| src[i]).collect();
        Tensor::new(shape, data)
    }

    /// 2-D transpose (materialized).
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (n, d) = self.rows_cols("transpose")?;
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = self.data[i * d + j];
            }
        }
        Tensor::new(&[d, n], data)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in self.data.iter() {
            acc = acc + x;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.numel() as f64)
    }

    /// Largest absolute elementwise difference, as `f64`.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// True when shapes match and every element has the same bit pattern
    /// (distinguishes `-0.0` from `0.0`; `NaN` equals `NaN`).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a.bits() == b.bits())
    }

    /// Errors if any element is non-finite; `ctx` names the failing value.
    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numeric(format!("non-finite values in {ctx}")));
        }
        Ok(())
    }
}

/// Elementwise choice: where `mask` is 1 take `on_one`, where 0 take `on_zero`.
/// The selected values are copied bit-for-bit (no arithmetic on them).
pub fn select<T: Scalar>(
    mask: &Tensor<T>,
    on_one: &Tensor<T>,
    on_zero: &Tensor<T>,
) -> Result<Tensor<T>> {
    if mask.shape() != on_one.shape() || mask.shape() != on_zero.shape() {
        return Err(shape_err(format!(
            "select needs equal shapes: mask {:?}, {:?}, {:?}",
            mask.shape(),
            on_one.shape(),
            on_zero.shape()
        )));
    }
    let one = T::one();
    let zero = T::zero();
    if mask.data().iter().any(|&m| m != one && m != zero) {
        return Err(CoreError::Invalid("select mask entries must be exactly 0 or 1".into()));
    }
    let data = mask
        .data()
        .iter()
        .zip(on_one.data().iter().zip(on_zero.data().iter()))
        .map(|(&m, (&a, &b))| if m == one { a } else { b })
        .collect();
    Tensor::new(mask.shape(), data)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &x in &row[1..] {
        if x > m {
            m = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - m).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

pub(crate) fn layer_norm_row<T: Scalar>(row: &mut [T], eps: T) {
    let d = T::of(row.len() as f64);
    let mut mean = T::zero();
    for &x in row.iter() {
        mean = mean + x;
    }
    mean = mean / d;
    let mut var = T::zero();
    for &x in row.iter() {
        let c = x - mean;
        var = var + c * c;
    }
    var = var / d;
    let inv = T::one() / (var + eps).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) * inv;
    }
}

/// Dot product with eight parallel accumulators and a fixed reduction tree.
#[inline]
fn dot8<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let chunks = x.len() / 8;
    let mut acc = [T::zero(); 8];
    for c in 0..chunks {
        let xb = &x[c * 8..c * 8 + 8];
        let yb = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xb[l] * yb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..x.len() {
        tail = tail + x[i] * y[i];
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// `a [m×k] · b [k×n]`, i-k-j loop order so the inner loop streams rows.
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    c
}

/// `a [m×k] · bᵀ` with `b [n×k]`: both operands row-contiguous dot products.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] = dot8(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `aᵀ · b` with `a [k×m]`, `b [k×n]`: k-i-j loop order, streaming rows of b.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aik) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    c
}
