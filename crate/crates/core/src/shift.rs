//! Row-based reformulation of the window lowering: explicit feature shifts,
//! the fixed delta-kernel bank that reproduces them as depthwise
//! convolutions, and the fusion of all `k*k` direction convolutions into one
//! grouped convolution.

use crate::conv::{depthwise_conv2d, grouped_conv2d};
use crate::error::{Error, Result};
use crate::im2col::Im2ColMatrix;
use crate::tensor::{Scalar, Tensor};
use crate::window;

/// Shift a `[N, H, W, C]` feature map so that `out[i, j] = f[i+u, j+v]`,
/// filling with zeros where the source is out of range.
///
/// Implemented with bounds-checked row copies, deliberately not as
/// pad-then-slice, so it stays an independent check on the padding code.
pub fn shift_feature<T: Scalar>(f: &Tensor<T>, u: i64, v: i64) -> Result<Tensor<T>> {
    let (n, h, w, c) = f.dims4()?;
    let mut out = Tensor::zeros([n, h, w, c]);
    let src = f.data();
    let dst = out.data_mut();

    // Destination rows i with i+u in range, and within each row the columns j
    // with j+v in range, form one contiguous span per row.
    let i_lo = 0.max(-u) as usize;
    let i_hi = (h as i64).min(h as i64 - u).max(0) as usize;
    let j_lo = 0.max(-v) as usize;
    let j_hi = (w as i64).min(w as i64 - v).max(0) as usize;
    if j_lo >= j_hi {
        return Ok(out);
    }
    let span = (j_hi - j_lo) * c;
    for ni in 0..n {
        for i in i_lo..i_hi {
            let si = (i as i64 + u) as usize;
            let sj = (j_lo as i64 + v) as usize;
            let s = ((ni * h + si) * w + sj) * c;
            let d = ((ni * h + i) * w + j_lo) * c;
            dst[d..d + span].copy_from_slice(&src[s..s + span]);
        }
    }
    Ok(out)
}

/// The `k*k` fixed depthwise kernels that encode shift directions: slice
/// `(., ., c, dir)` is zero except for a single 1.0 at row/column
/// `(u + k/2, v + k/2)` where `(u, v) = direction_offset(k, dir)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftKernelBank<T: Scalar> {
    k: usize,
    channels: usize,
    kernels: Tensor<T>,
}

impl<T: Scalar> ShiftKernelBank<T> {
    pub fn new(k: usize, channels: usize) -> Result<Self> {
        window::require_odd(k)?;
        if channels == 0 {
            return Err(Error::config("channel count must be at least 1"));
        }
        let kk = k * k;
        let half = window::half(k);
        let mut kernels = Tensor::zeros([k, k, channels, kk]);
        let data = kernels.data_mut();
        for (dir, (u, v)) in window::offsets(k).enumerate() {
            let p = (u + half) as usize;
            let q = (v + half) as usize;
            for c in 0..channels {
                data[((p * k + q) * channels + c) * kk + dir] = T::one();
            }
        }
        Ok(ShiftKernelBank {
            k,
            channels,
            kernels,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The full `[k, k, C, k*k]` kernel stack, ready for one grouped
    /// convolution.
    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    /// Test-only bank with all kernels zeroed, for isolating a parallel path.
    #[cfg(test)]
    pub(crate) fn zeroed(k: usize, channels: usize) -> Self {
        let mut bank = ShiftKernelBank::new(k, channels).expect("valid test bank");
        bank.kernels.data_mut().fill(T::zero());
        bank
    }

    /// Kernel slice for one direction as a `[k, k, C]` depthwise kernel.
    pub fn direction_slice(&self, dir: usize) -> Tensor<T> {
        let (k, c, kk) = (self.k, self.channels, self.k * self.k);
        assert!(dir < kk, "direction {dir} out of range for k={k}");
        let mut out = Tensor::zeros([k, k, c]);
        for p in 0..k {
            for q in 0..k {
                for ci in 0..c {
                    out.data_mut()[(p * k + q) * c + ci] =
                        self.kernels.data()[((p * k + q) * c + ci) * kk + dir];
                }
            }
        }
        out
    }
}

/// Row-based Im2Col: shift the feature toward every window direction and lay
/// the flattened results out as rows. Must agree with the column-based
/// lowering element-exactly.
pub fn im2col_via_shifts<T: Scalar>(feature: &Tensor<T>, k: usize) -> Result<Im2ColMatrix<T>> {
    window::require_odd(k)?;
    let (n, h, w, c) = feature.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!(
            "row lowering operates on a single image, got N={n}"
        )));
    }
    let kk = k * k;
    let hw = h * w;
    let mut data = Tensor::zeros([kk, hw, c]);
    for (dir, (u, v)) in window::offsets(k).enumerate() {
        let shifted = shift_feature(feature, u, v)?;
        data.data_mut()[dir * hw * c..(dir + 1) * hw * c].copy_from_slice(shifted.data());
    }
    Im2ColMatrix::from_tensor(data, k, (h, w, c))
}

/// How to execute the direction convolutions of [`im2col_via_dwconv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftConvMode {
    /// `k*k` separate depthwise convolutions, one per direction.
    PerDirection,
    /// One grouped convolution over the whole bank.
    Fused,
}

/// Convolution-based Im2Col: run the shift-kernel bank over the feature map
/// and reshape the channel-stacked output into the column matrix. Delta
/// kernels only copy values, so the result is element-exact against the
/// other two lowerings.
pub fn im2col_via_dwconv<T: Scalar>(
    feature: &Tensor<T>,
    bank: &ShiftKernelBank<T>,
    mode: ShiftConvMode,
) -> Result<Im2ColMatrix<T>> {
    let (n, h, w, c) = feature.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!(
            "convolution lowering operates on a single image, got N={n}"
        )));
    }
    if bank.channels() != c {
        return Err(Error::shape(format!(
            "bank channels {} do not match feature channels {c}",
            bank.channels()
        )));
    }
    let k = bank.k();
    let pad = k / 2;
    match mode {
        ShiftConvMode::PerDirection => {
            let kk = k * k;
            let hw = h * w;
            let mut data = Tensor::zeros([kk, hw, c]);
            for dir in 0..kk {
                let slice = bank.direction_slice(dir);
                let conv = depthwise_conv2d(feature, &slice, pad)?;
                data.data_mut()[dir * hw * c..(dir + 1) * hw * c].copy_from_slice(conv.data());
            }
            Im2ColMatrix::from_tensor(data, k, (h, w, c))
        }
        ShiftConvMode::Fused => {
            let conv = grouped_conv2d(feature, bank.kernels(), pad)?;
            grouped_output_to_columns(&conv, k)
        }
    }
}

/// Reshape a grouped-convolution output `[1, H, W, C*k*k]` (direction fastest
/// within each channel block) into the `[k*k, H*W, C]` column matrix layout.
pub fn grouped_output_to_columns<T: Scalar>(
    conv: &Tensor<T>,
    k: usize,
) -> Result<Im2ColMatrix<T>> {
    let (n, h, w, ckk) = conv.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("expected a single image, got N={n}")));
    }
    let kk = k * k;
    if ckk % kk != 0 {
        return Err(Error::shape(format!(
            "channel count {ckk} is not a multiple of k*k = {kk}"
        )));
    }
    let c = ckk / kk;
    let hw = h * w;
    let mut data = Tensor::zeros([kk, hw, c]);
    let src = conv.data();
    let dst = data.data_mut();
    // Direction-major output rows live a whole feature map apart, so walk
    // query tiles and sweep directions inside each: every write is a
    // contiguous run and the source tile stays cache-resident.
    const TILE: usize = 128;
    for tile_start in (0..hw).step_by(TILE) {
        let tile_len = TILE.min(hw - tile_start);
        for dir in 0..kk {
            let out_tile = &mut dst[(dir * hw + tile_start) * c..][..tile_len * c];
            for ti in 0..tile_len {
                let px = &src[(tile_start + ti) * ckk..][..ckk];
                for (o, chunk) in out_tile[ti * c..][..c].iter_mut().zip(px.chunks_exact(kk)) {
                    *o = chunk[dir];
                }
            }
        }
    }
    Im2ColMatrix::from_tensor(data, k, (h, w, c))
}

/// Inverse of [`grouped_output_to_columns`] for raw `[k*k, H*W, C]` data:
/// scatter column-matrix values back into the `[1, H, W, C*k*k]` channel
/// layout of a grouped-convolution output. Used to route gradients from the
/// attention core back into the convolution that produced the columns.
pub fn columns_to_grouped_output<T: Scalar>(
    cols: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (kk, hw, c) = match cols.shape()[..] {
        [kk, hw, c] => (kk, hw, c),
        _ => {
            return Err(Error::shape(format!(
                "expected [k*k, H*W, C] columns, got {:?}",
                cols.shape()
            )))
        }
    };
    if hw != height * width {
        return Err(Error::shape(format!(
            "column count {hw} does not match {height}x{width}"
        )));
    }
    let ckk = c * kk;
    let mut out = Tensor::zeros([1, height, width, ckk]);
    let src = cols.data();
    let dst = out.data_mut();
    for query in 0..hw {
        let px = &mut dst[query * ckk..(query + 1) * ckk];
        for ci in 0..c {
            for dir in 0..kk {
                px[ci * kk + dir] = src[(dir * hw + query) * c + ci];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::im2col::im2col;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_shift_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::<f64>::random_uniform([1, 3, 4, 2], -1.0, 1.0, &mut rng);
        assert_eq!(shift_feature(&f, 0, 0).unwrap(), f);
    }

    #[test]
    fn shift_minus_one_minus_one_on_two_by_two() {
        // Hand evaluation: out[i,j] = f[i-1,j-1]; only (1,1) reads in-bounds
        // and picks up f(0,0) = 1.
        let f = Tensor::new([1, 2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let s = shift_feature(&f, -1, -1).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn opposite_shifts_restore_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::<f64>::random_uniform([1, 5, 5, 3], -1.0, 1.0, &mut rng);
        for (u, v) in [(1i64, 2i64), (-2, 1), (2, 2)] {
            let round = shift_feature(&shift_feature(&f, u, v).unwrap(), -u, -v).unwrap();
            let mh = u.unsigned_abs() as usize;
            let mw = v.unsigned_abs() as usize;
            for h in mh..5 - mh {
                for w in mw..5 - mw {
                    for c in 0..3 {
                        assert_eq!(round.at4(0, h, w, c), f.at4(0, h, w, c));
                    }
                }
            }
        }
    }

    #[test]
    fn shift_larger_than_map_is_all_zero() {
        let f = Tensor::new([1, 2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let s = shift_feature(&f, 5, 0).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bank_direction_minus_one_minus_one_is_the_corner_delta() {
        // For k=3 the (-1,-1) direction kernel is 1 at the top-left corner.
        let bank = ShiftKernelBank::<f64>::new(3, 2).unwrap();
        let dir = window::direction_index(3, -1, -1);
        let slice = bank.direction_slice(dir);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0,  0.0, 0.0,  0.0, 0.0,
            0.0, 0.0,  0.0, 0.0,  0.0, 0.0,
            0.0, 0.0,  0.0, 0.0,  0.0, 0.0,
        ];
        assert_eq!(slice.data(), &expected[..]);
    }

    #[test]
    fn bank_k1_is_the_identity_kernel() {
        let bank = ShiftKernelBank::<f64>::new(1, 3).unwrap();
        assert_eq!(bank.kernels().shape(), &[1, 1, 3, 1]);
        assert!(bank.kernels().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bank_direction_one_one_has_its_delta_at_the_far_corner() {
        let bank = ShiftKernelBank::<f64>::new(3, 1).unwrap();
        let dir = window::direction_index(3, 1, 1);
        let slice = bank.direction_slice(dir);
        for p in 0..3 {
            for q in 0..3 {
                let want = if (p, q) == (2, 2) { 1.0 } else { 0.0 };
                assert_eq!(slice.data()[p * 3 + q], want);
            }
        }
        // And convolving with it reproduces the (1,1) shift.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f64>::random_uniform([1, 4, 4, 1], -1.0, 1.0, &mut rng);
        let conv = depthwise_conv2d(&f, &slice, 1).unwrap();
        assert_eq!(conv, shift_feature(&f, 1, 1).unwrap());
    }

    #[test]
    fn every_bank_slice_reproduces_its_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1usize, 3, 5] {
            let f = Tensor::<f64>::random_uniform([1, 6, 5, 2], -1.0, 1.0, &mut rng);
            let bank = ShiftKernelBank::<f64>::new(k, 2).unwrap();
            for (dir, (u, v)) in window::offsets(k).enumerate() {
                let conv = depthwise_conv2d(&f, &bank.direction_slice(dir), k / 2).unwrap();
                let shifted = shift_feature(&f, u, v).unwrap();
                assert_eq!(conv, shifted, "k={k} direction ({u},{v})");
            }
        }
    }

    #[test]
    fn bank_slices_preserve_the_interior_multiset() {
        // A shift kernel only relocates values: the nonzero-sourced outputs
        // are a sub-multiset of the inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f64>::random_uniform([1, 4, 4, 1], 0.5, 1.5, &mut rng);
        let bank = ShiftKernelBank::<f64>::new(3, 1).unwrap();
        for (dir, (u, v)) in window::offsets(3).enumerate() {
            let conv = depthwise_conv2d(&f, &bank.direction_slice(dir), 1).unwrap();
            let mut moved: Vec<f64> = conv.data().iter().copied().filter(|&x| x != 0.0).collect();
            let mut source: Vec<f64> = (0..4i64)
                .flat_map(|h| (0..4i64).map(move |w| (h, w)))
                .filter(|&(h, w)| h + u >= 0 && h + u < 4 && w + v >= 0 && w + v < 4)
                .map(|(h, w)| f.at4(0, (h + u) as usize, (w + v) as usize, 0))
                .collect();
            moved.sort_by(f64::total_cmp);
            source.sort_by(f64::total_cmp);
            assert_eq!(moved, source, "direction {dir}");
        }
    }

    #[test]
    fn via_shifts_k1_is_flattened_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::<f64>::random_uniform([1, 2, 3, 2], -1.0, 1.0, &mut rng);
        let m = im2col_via_shifts(&f, 1).unwrap();
        assert_eq!(m.data().data(), f.data());
    }

    #[test]
    fn via_shifts_matches_oracle_on_worked_example() {
        let f = Tensor::new([1, 2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(im2col_via_shifts(&f, 3).unwrap(), im2col(&f, 3).unwrap());
    }

    #[test]
    fn via_shifts_matches_oracle_non_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Tensor::<f64>::random_uniform([1, 5, 7, 3], -1.0, 1.0, &mut rng);
        assert_eq!(im2col_via_shifts(&f, 5).unwrap(), im2col(&f, 5).unwrap());
    }

    #[test]
    fn via_dwconv_k1_is_identity_lowering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::<f64>::random_uniform([1, 3, 3, 2], -1.0, 1.0, &mut rng);
        let bank = ShiftKernelBank::new(1, 2).unwrap();
        let m = im2col_via_dwconv(&f, &bank, ShiftConvMode::Fused).unwrap();
        assert_eq!(m.data().data(), f.data());
    }

    #[test]
    fn via_dwconv_matches_via_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::<f64>::random_uniform([1, 4, 6, 3], -1.0, 1.0, &mut rng);
        let bank = ShiftKernelBank::new(3, 3).unwrap();
        let a = im2col_via_dwconv(&f, &bank, ShiftConvMode::Fused).unwrap();
        let b = im2col_via_shifts(&f, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fused_and_per_direction_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for k in [1usize, 3, 5] {
            let f = Tensor::<f64>::random_uniform([1, 5, 4, 2], -1.0, 1.0, &mut rng);
            let bank = ShiftKernelBank::new(k, 2).unwrap();
            let fused = im2col_via_dwconv(&f, &bank, ShiftConvMode::Fused).unwrap();
            let per_dir = im2col_via_dwconv(&f, &bank, ShiftConvMode::PerDirection).unwrap();
            assert_eq!(fused, per_dir, "k={k}");
        }
    }

    #[test]
    fn via_dwconv_rejects_channel_mismatch() {
        let f = Tensor::<f64>::zeros([1, 3, 3, 2]);
        let bank = ShiftKernelBank::<f64>::new(3, 4).unwrap();
        assert!(matches!(
            im2col_via_dwconv(&f, &bank, ShiftConvMode::Fused),
            Err(Error::Shape(_))
        ));
    }
}
