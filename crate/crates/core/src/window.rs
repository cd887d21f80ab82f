//! Window geometry shared by every local-attention path.
//!
//! The direction index is the one constant the column matrix, the shift
//! kernels, and the grouped-convolution channel layout all have to agree on:
//! offsets `(u, v)` with `u, v` in `[-half, half]` enumerate u-major, so
//! direction `(u, v)` gets index `(u + half)*k + (v + half)`. A mismatch
//! anywhere silently permutes attention logits, which is why nothing else in
//! the crate is allowed to define its own ordering.

use crate::error::{Error, Result};

/// Reject even window sizes; local windows are centered on the query.
pub fn require_odd(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        Err(Error::config(format!("window size must be odd, got {k}")))
    } else {
        Ok(())
    }
}

/// Half-width of a window: `floor(k / 2)`.
#[inline]
pub fn half(k: usize) -> i64 {
    (k / 2) as i64
}

/// All `(u, v)` shift offsets of a `k x k` window, in direction-index order.
pub fn offsets(k: usize) -> impl Iterator<Item = (i64, i64)> {
    let h = half(k);
    (-h..=h).flat_map(move |u| (-h..=h).map(move |v| (u, v)))
}

/// Direction index of offset `(u, v)` in a `k x k` window.
#[inline]
pub fn direction_index(k: usize, u: i64, v: i64) -> usize {
    let h = half(k);
    debug_assert!(u.abs() <= h && v.abs() <= h);
    ((u + h) as usize) * k + (v + h) as usize
}

/// Inverse of [`direction_index`].
#[inline]
pub fn direction_offset(k: usize, dir: usize) -> (i64, i64) {
    let h = half(k);
    ((dir / k) as i64 - h, (dir % k) as i64 - h)
}

/// Whether the key sampled at offset `(u, v)` from query `(h, w)` falls
/// inside an `height x width` map.
#[inline]
pub fn source_in_bounds(h: usize, w: usize, u: i64, v: i64, height: usize, width: usize) -> bool {
    let sh = h as i64 + u;
    let sw = w as i64 + v;
    sh >= 0 && sh < height as i64 && sw >= 0 && sw < width as i64
}
