//! Column-based Im2Col lowering and the naive local-attention forward built
//! on it. This is the ground truth: every faster path in the crate has to
//! reproduce it, so everything here favors the literal definition over speed.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::window;

/// The materialized key/value matrix of a local window lowering.
///
/// Logical shape `[k*k, H*W, C]`: row `r` holds the feature shifted by the
/// offset `window::direction_offset(k, r)`, column `q = h*W + w` holds the
/// flattened window centered on query `(h, w)`. Out-of-range samples are
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2ColMatrix<T: Scalar> {
    data: Tensor<T>,
    k: usize,
    origin: (usize, usize, usize),
}

impl<T: Scalar> Im2ColMatrix<T> {
    /// Wrap an existing `[k*k, H*W, C]` tensor.
    pub fn from_tensor(data: Tensor<T>, k: usize, origin: (usize, usize, usize)) -> Result<Self> {
        window::require_odd(k)?;
        let (h, w, c) = origin;
        let expected = [k * k, h * w, c];
        if data.shape() != expected {
            return Err(Error::shape(format!(
                "column matrix for {origin:?}, k={k} must have shape {expected:?}, got {:?}",
                data.shape()
            )));
        }
        Ok(Im2ColMatrix { data, k, origin })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `(H, W, C)` of the feature map this matrix was built from.
    pub fn origin(&self) -> (usize, usize, usize) {
        self.origin
    }

    pub fn num_queries(&self) -> usize {
        self.origin.0 * self.origin.1
    }

    pub fn channels(&self) -> usize {
        self.origin.2
    }

    #[inline]
    pub fn query_index(&self, h: usize, w: usize) -> usize {
        h * self.origin.1 + w
    }

    #[inline]
    pub fn entry(&self, dir: usize, query: usize, c: usize) -> T {
        let (_, hw, ch) = (self.k * self.k, self.num_queries(), self.channels());
        self.data.data()[(dir * hw + query) * ch + c]
    }

    /// Whether row `dir` of column `query` samples an in-bounds position.
    pub fn source_in_bounds(&self, dir: usize, query: usize) -> bool {
        let (height, width, _) = self.origin;
        let (u, v) = window::direction_offset(self.k, dir);
        let h = query / width;
        let w = query % width;
        window::source_in_bounds(h, w, u, v, height, width)
    }

    /// Restrict to channels `lo..hi` (used to carve out one attention head).
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Self> {
        let data = self.data.slice_last_dim(lo, hi)?;
        Ok(Im2ColMatrix {
            data,
            k: self.k,
            origin: (self.origin.0, self.origin.1, hi - lo),
        })
    }

    /// Row `dir` reshaped back to a `[1, H, W, C]` feature map.
    pub fn row_as_feature(&self, dir: usize) -> Tensor<T> {
        let (h, w, c) = self.origin;
        let hw = h * w;
        let row = self.data.data()[dir * hw * c..(dir + 1) * hw * c].to_vec();
        Tensor::new([1, h, w, c], row).expect("row length matches feature size")
    }

    /// Column `query` as a `[k*k, C]` matrix: the flattened window.
    pub fn column(&self, query: usize) -> Tensor<T> {
        let kk = self.k * self.k;
        let c = self.channels();
        let mut out = Tensor::zeros([kk, c]);
        for dir in 0..kk {
            for ci in 0..c {
                out.data_mut()[dir * c + ci] = self.entry(dir, query, ci);
            }
        }
        out
    }
}

/// Column-based Im2Col of a `[1, H, W, C]` feature map: for every query the
/// surrounding `k x k` window is sampled and written out as one column,
/// element by element.
pub fn im2col<T: Scalar>(feature: &Tensor<T>, k: usize) -> Result<Im2ColMatrix<T>> {
    window::require_odd(k)?;
    let (n, h, w, c) = feature.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!(
            "column lowering operates on a single image, got N={n}"
        )));
    }
    let kk = k * k;
    let hw = h * w;
    let mut data = Tensor::zeros([kk, hw, c]);
    let out = data.data_mut();
    for hi in 0..h {
        for wi in 0..w {
            let query = hi * w + wi;
            for (dir, (u, v)) in window::offsets(k).enumerate() {
                for ci in 0..c {
                    out[(dir * hw + query) * c + ci] =
                        feature.spatial_or_zero(0, hi as i64 + u, wi as i64 + v, ci);
                }
            }
        }
    }
    Im2ColMatrix::from_tensor(data, k, (h, w, c))
}

/// Naive single-head local attention over a materialized key/value matrix.
///
/// For every query position the `k*k` surrounding keys are scored by scaled
/// dot product, normalized with softmax, and used to mix the matching value
/// entries. With `mask_padding` the out-of-bounds window positions are
/// excluded from the softmax instead of participating as zero keys/values.
pub fn local_attention_reference<T: Scalar>(
    q: &Tensor<T>,
    kmat: &Im2ColMatrix<T>,
    vmat: &Im2ColMatrix<T>,
    head_dim: usize,
    mask_padding: bool,
) -> Result<Tensor<T>> {
    let (n, h, w, d) = q.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("expected a single image, got N={n}")));
    }
    if d != head_dim {
        return Err(Error::shape(format!(
            "query channels {d} do not match head_dim {head_dim}"
        )));
    }
    if kmat.channels() != d || vmat.channels() != d {
        return Err(Error::shape(format!(
            "key/value channels ({}, {}) do not match query channels {d}",
            kmat.channels(),
            vmat.channels()
        )));
    }
    if kmat.origin() != (h, w, d) || vmat.origin() != (h, w, d) {
        return Err(Error::shape(format!(
            "key/value matrices built for {:?}/{:?}, query map is {:?}",
            kmat.origin(),
            vmat.origin(),
            (h, w, d)
        )));
    }
    if kmat.k() != vmat.k() {
        return Err(Error::shape(format!(
            "key window {} differs from value window {}",
            kmat.k(),
            vmat.k()
        )));
    }

    let k = kmat.k();
    let kk = k * k;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = Tensor::zeros([1, h, w, d]);

    let mut logits = vec![T::zero(); kk];
    for hi in 0..h {
        for wi in 0..w {
            let query = hi * w + wi;

            // Scaled dot-product logits, one per window position.
            let mut any_valid = false;
            for (dir, logit) in logits.iter_mut().enumerate() {
                if mask_padding && !kmat.source_in_bounds(dir, query) {
                    *logit = T::neg_infinity();
                    continue;
                }
                any_valid = true;
                let mut acc = T::zero();
                for ci in 0..d {
                    acc = acc + q.at4(0, hi, wi, ci) * kmat.entry(dir, query, ci);
                }
                *logit = acc * scale;
            }
            // The window center is the query itself, so it can never be
            // masked out.
            assert!(any_valid, "every window must keep its center position");

            // Softmax with max subtraction; -inf rows fall out as exp(-inf)=0.
            let mut max = T::neg_infinity();
            for &l in &logits {
                if l > max {
                    max = l;
                }
            }
            let mut denom = T::zero();
            let mut weights = vec![T::zero(); kk];
            for (wt, &l) in weights.iter_mut().zip(&logits) {
                *wt = (l - max).exp();
                denom = denom + *wt;
            }

            for ci in 0..d {
                let mut acc = T::zero();
                for (dir, &wt) in weights.iter().enumerate() {
                    acc = acc + wt * vmat.entry(dir, query, ci);
                }
                out.data_mut()[(hi * w + wi) * d + ci] = acc / denom;
            }
        }
    }
    Ok(out)
}

/// Multi-head composition of [`local_attention_reference`]: splits channels
/// into `num_heads` equal slices, runs the naive reference per head, and
/// concatenates the results. Projections stay with the caller.
pub fn local_attention_reference_multihead<T: Scalar>(
    q: &Tensor<T>,
    kmat: &Im2ColMatrix<T>,
    vmat: &Im2ColMatrix<T>,
    num_heads: usize,
    mask_padding: bool,
) -> Result<Tensor<T>> {
    let (_, _, _, c) = q.dims4()?;
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::config(format!(
            "channels {c} not divisible into {num_heads} heads"
        )));
    }
    let d = c / num_heads;
    let mut heads = Vec::with_capacity(num_heads);
    for m in 0..num_heads {
        let qm = q.slice_last_dim(m * d, (m + 1) * d)?;
        let km = kmat.slice_channels(m * d, (m + 1) * d)?;
        let vm = vmat.slice_channels(m * d, (m + 1) * d)?;
        heads.push(local_attention_reference(&qm, &km, &vm, d, mask_padding)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    Tensor::concat_last_dim(&refs)
}
