//! Minimal dense-array substrate.
//!
//! One canonical layout: row-major `[N, H, W, C]` for feature maps, with 2-D
//! and 3-D shapes permitted for matrices and column matrices. Element
//! `(n, h, w, c)` of a 4-D tensor lives at flat index
//! `((n*H + h)*W + w)*C + c`, so walking the channel dimension is always a
//! contiguous scan.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Element precision of a tensor, used for configuration and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::config(format!(
                "dtype must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Scalar element type of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array of `f32` or `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::shape("tensor rank must be at least 1"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Uniform samples from `[lo, hi)` using the caller's generator.
    pub fn random_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The four dimensions of a `[N, H, W, C]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::shape(format!(
                "expected a 4-D [N,H,W,C] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at4(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        let (_, hh, ww, cc) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * hh + h) * ww + w) * cc + c]
    }

    /// Read `(n, h, w, c)` treating out-of-range spatial coordinates as zero.
    #[inline]
    pub fn spatial_or_zero(&self, n: usize, h: i64, w: i64, c: usize) -> T {
        let hh = self.shape[1] as i64;
        let ww = self.shape[2] as i64;
        if h < 0 || h >= hh || w < 0 || w >= ww {
            T::zero()
        } else {
            self.at4(n, h as usize, w as usize, c)
        }
    }

    /// Reinterpret the flat buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Zero-pad the spatial dimensions of a `[N, H, W, C]` tensor.
    pub fn pad_zero(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let (n, h, w, c) = self.dims4()?;
        if pad_h == 0 && pad_w == 0 {
            return Ok(self.clone());
        }
        let oh = h + 2 * pad_h;
        let ow = w + 2 * pad_w;
        let mut out = Tensor::zeros([n, oh, ow, c]);
        for ni in 0..n {
            for hi in 0..h {
                let src = ((ni * h + hi) * w) * c;
                let dst = ((ni * oh + hi + pad_h) * ow + pad_w) * c;
                out.data[dst..dst + w * c].copy_from_slice(&self.data[src..src + w * c]);
            }
        }
        Ok(out)
    }

    /// Softmax along the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        let last = *self.shape.last().expect("rank >= 1");
        if last == 0 {
            return Err(Error::shape("softmax over an empty last dimension"));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(last) {
            softmax_row(row);
        }
        Ok(out)
    }

    /// Slice `lo..hi` of the last dimension.
    pub fn slice_last_dim(&self, lo: usize, hi: usize) -> Result<Self> {
        let last = *self.shape.last().expect("rank >= 1");
        if lo >= hi || hi > last {
            return Err(Error::shape(format!(
                "invalid last-dim slice {lo}..{hi} of {last}"
            )));
        }
        let width = hi - lo;
        let rows = self.data.len() / last;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * last + lo..r * last + hi]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Ok(Tensor { shape, data })
    }

    /// Concatenate tensors along the last dimension; all other dims must agree.
    pub fn concat_last_dim(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape(format!(
                    "concat leading dims differ: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor { shape, data })
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose a 2-D matrix.
    pub fn transpose2d(&self) -> Result<Self> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => {
                return Err(Error::shape(format!(
                    "transpose2d expects a 2-D tensor, got {:?}",
                    self.shape
                )))
            }
        };
        let mut out = Tensor::zeros([n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Convert elements to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[inline]
fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Backward of [`Tensor::softmax_lastdim`]: given the softmax output `y` and
/// upstream gradient `dy`, returns the gradient w.r.t. the logits,
/// `dx_i = y_i * (dy_i - sum_j dy_j * y_j)` per row.
pub fn softmax_lastdim_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape != dy.shape {
        return Err(Error::shape(format!(
            "softmax backward shape mismatch: {:?} vs {:?}",
            y.shape, dy.shape
        )));
    }
    let last = *y.shape.last().expect("rank >= 1");
    let mut out = Tensor::zeros(y.shape.clone());
    for ((yr, dr), or) in y
        .data
        .chunks(last)
        .zip(dy.data.chunks(last))
        .zip(out.data.chunks_mut(last))
    {
        let mut dot = T::zero();
        for (&yv, &dv) in yr.iter().zip(dr) {
            dot = dot + yv * dv;
        }
        for ((&yv, &dv), o) in yr.iter().zip(dr).zip(or.iter_mut()) {
            *o = yv * (dv - dot);
        }
    }
    Ok(out)
}

/// `[M, K] x [K, N] -> [M, N]` matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = match a.shape[..] {
        [m, k] => (m, k),
        _ => {
            return Err(Error::shape(format!(
                "matmul lhs must be 2-D, got {:?}",
                a.shape
            )))
        }
    };
    let (kb, n) = match b.shape[..] {
        [k, n] => (k, n),
        _ => {
            return Err(Error::shape(format!(
                "matmul rhs must be 2-D, got {:?}",
                b.shape
            )))
        }
    };
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {ka} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros([m, n]);
    matmul_into(&a.data, &b.data, &mut out.data, m, ka, n);
    Ok(out)
}

/// Batched matrix product: equal leading dims, trailing `[M, K] x [K, N]`.
pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("batched matmul needs rank >= 2 operands"));
    }
    if a.rank() != b.rank() {
        return Err(Error::shape(format!(
            "batched matmul rank mismatch: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let lead_a = &a.shape[..a.rank() - 2];
    let lead_b = &b.shape[..b.rank() - 2];
    if lead_a != lead_b {
        return Err(Error::shape(format!(
            "batched matmul leading dims disagree: {lead_a:?} vs {lead_b:?}"
        )));
    }
    let m = a.shape[a.rank() - 2];
    let ka = a.shape[a.rank() - 1];
    let kb = b.shape[b.rank() - 2];
    let n = b.shape[b.rank() - 1];
    if ka != kb {
        return Err(Error::shape(format!(
            "batched matmul inner dims disagree: {ka} vs {kb}"
        )));
    }
    let batch: usize = lead_a.iter().product();
    let mut shape = lead_a.to_vec();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(shape);
    for i in 0..batch {
        matmul_into(
            &a.data[i * m * ka..(i + 1) * m * ka],
            &b.data[i * ka * n..(i + 1) * ka * n],
            &mut out.data[i * m * n..(i + 1) * m * n],
            m,
            ka,
            n,
        );
    }
    Ok(out)
}

// i-k-j loop order keeps both the b row and the output row contiguous.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Backward of [`matmul`]: `dA = dC x B^T`, `dB = A^T x dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let grad_a = matmul(grad_out, &b.transpose2d()?)?;
    let grad_b = matmul(&a.transpose2d()?, grad_out)?;
    Ok((grad_a, grad_b))
}
