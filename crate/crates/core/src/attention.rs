//! The full local-attention block: per-pixel Q/K/V projections, window-local
//! attention over convolution-generated keys and values, multi-head concat,
//! output projection, and the analytic backward for all of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{grouped_conv2d, grouped_conv2d_backward};
use crate::deformed::DeformedShiftParams;
use crate::error::{Error, Result};
use crate::im2col::{im2col, local_attention_reference_multihead, Im2ColMatrix};
use crate::shift::{columns_to_grouped_output, grouped_output_to_columns, im2col_via_shifts};
use crate::tensor::{matmul, Scalar, Tensor};
use crate::window;

/// Static configuration of an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub window_size: usize,
    /// Exclude out-of-bounds window positions from the softmax instead of
    /// letting zero-padded keys and values participate.
    pub mask_padding: bool,
    /// Generate keys/values with the deformed shifting module instead of the
    /// fixed shift bank.
    pub use_deformed: bool,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize, window_size: usize) -> Result<Self> {
        window::require_odd(window_size)?;
        if num_heads == 0 {
            return Err(Error::config("num_heads must be at least 1"));
        }
        if embed_dim == 0 || embed_dim % num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {embed_dim} is not divisible into {num_heads} heads"
            )));
        }
        Ok(AttentionConfig {
            embed_dim,
            num_heads,
            head_dim: embed_dim / num_heads,
            window_size,
            mask_padding: false,
            use_deformed: false,
        })
    }

    pub fn with_mask_padding(mut self, mask: bool) -> Self {
        self.mask_padding = mask;
        self
    }

    pub fn with_deformed(mut self, deformed: bool) -> Self {
        self.use_deformed = deformed;
        self
    }
}

/// Learnable parameters of an attention block. The deformed parameters are
/// only exercised when the config enables them; keys and values carry
/// independent sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub deformed_k: DeformedShiftParams<T>,
    pub deformed_v: DeformedShiftParams<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Seeded random initialization: projection weights uniform in
    /// `[-1/sqrt(C), 1/sqrt(C))`, deformed kernels per their own rule.
    pub fn random(cfg: &AttentionConfig, seed: u64) -> Result<Self> {
        let c = cfg.embed_dim;
        let bound = 1.0 / (c as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = || Tensor::random_uniform([c, c], -bound, bound, &mut rng);
        let w_q = weight();
        let w_k = weight();
        let w_v = weight();
        let w_o = weight();
        let seed_k: u64 = rng.random();
        let seed_v: u64 = rng.random();
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            deformed_k: DeformedShiftParams::init(cfg.window_size, c, seed_k)?,
            deformed_v: DeformedShiftParams::init(cfg.window_size, c, seed_v)?,
        })
    }

    /// Identity projections and zero learnable kernels; handy in tests.
    pub fn identity(cfg: &AttentionConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let k = cfg.window_size;
        let zeros = Tensor::zeros([k, k, c, k * k]);
        Ok(AttentionParams {
            w_q: Tensor::eye(c),
            w_k: Tensor::eye(c),
            w_v: Tensor::eye(c),
            w_o: Tensor::eye(c),
            deformed_k: DeformedShiftParams::with_learnable(k, c, zeros.clone())?,
            deformed_v: DeformedShiftParams::with_learnable(k, c, zeros)?,
        })
    }

    fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let c = cfg.embed_dim;
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.shape() != [c, c] {
                return Err(Error::shape(format!(
                    "{name} must be [{c}, {c}], got {:?}",
                    w.shape()
                )));
            }
        }
        for (name, d) in [
            ("deformed_k", &self.deformed_k),
            ("deformed_v", &self.deformed_v),
        ] {
            if d.k() != cfg.window_size || d.channels() != c {
                return Err(Error::shape(format!(
                    "{name} built for k={}, C={}, config wants k={}, C={c}",
                    d.k(),
                    d.channels(),
                    cfg.window_size
                )));
            }
        }
        Ok(())
    }
}

/// Which machinery generates the local key/value columns inside the fast
/// forward. All choices compute the same function for fixed kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvRoute {
    /// Explicit per-direction feature shifts.
    Shifts,
    /// One fused grouped convolution over the shift-kernel bank (or the
    /// deformed kernels when enabled).
    DwConvFused,
}

/// Apply a `[C, C]` matrix to every pixel of a `[1, H, W, C]` map (the Q/K/V
/// and output projections; no bias).
pub fn apply_projection<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, wd, c) = x.dims4()?;
    if w.shape() != [c, c] {
        return Err(Error::shape(format!(
            "projection weight must be [{c}, {c}], got {:?}",
            w.shape()
        )));
    }
    let mut out = Tensor::zeros([n, h, wd, c]);
    crate::tensor::matmul_into(x.data(), w.data(), out.data_mut(), n * h * wd, c, c);
    Ok(out)
}

/// Project the input into queries, keys, and values (per-pixel linear maps).
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let q = apply_projection(x, &params.w_q)?;
    let k = apply_projection(x, &params.w_k)?;
    let v = apply_projection(x, &params.w_v)?;
    Ok((q, k, v))
}

fn check_input<T: Scalar>(x: &Tensor<T>, cfg: &AttentionConfig) -> Result<(usize, usize)> {
    let (n, h, w, c) = x.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!(
            "attention operates on a single image, got N={n}"
        )));
    }
    if c != cfg.embed_dim {
        return Err(Error::shape(format!(
            "input channels {c} do not match embed_dim {}",
            cfg.embed_dim
        )));
    }
    Ok((h, w))
}

fn window_stack_conv<T: Scalar>(
    feature: &Tensor<T>,
    cfg: &AttentionConfig,
    deformed: &DeformedShiftParams<T>,
) -> Result<Tensor<T>> {
    if cfg.use_deformed {
        deformed.forward(feature)
    } else {
        grouped_conv2d(
            feature,
            deformed.fixed_bank().kernels(),
            cfg.window_size / 2,
        )
    }
}

/// Softmax attention weights saved by the forward pass for reuse in the
/// backward pass. Layout `[H*W][num_heads][k*k]`, masked entries zero.
struct CoreState<T> {
    probs: Vec<T>,
}

// Queries per tile in the fast core. The per-tile logit scratch
// (TILE * heads * k * k scalars) has to stay cache-resident while the column
// matrices stream through.
const QUERY_TILE: usize = 128;

// Four independent accumulators; a single running sum serializes on FP add
// latency and cannot vectorize.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for lane in 0..4 {
            acc[lane] = acc[lane] + xa[lane] * xb[lane];
        }
    }
    let mut tail = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    tail
}

// Same accumulation order as `dot`, with the second operand read at a fixed
// stride. Keeping the order identical keeps the two key/value layouts
// bit-compatible.
#[inline]
fn dot_strided<T: Scalar>(a: &[T], b: &[T], stride: usize) -> T {
    let n = a.len();
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for ch in 0..chunks {
        let base = ch * 4;
        for lane in 0..4 {
            acc[lane] = acc[lane] + a[base + lane] * b[(base + lane) * stride];
        }
    }
    let mut tail = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        tail = tail + a[i] * b[i * stride];
    }
    tail
}

// In-place softmax over one window row; -inf (masked) entries come out as
// exact zeros. Shared by both core layouts so their arithmetic matches.
#[inline]
fn softmax_window_row<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &l in row.iter() {
        if l > max {
            max = l;
        }
    }
    debug_assert!(max.is_finite(), "window center is always unmasked");
    let mut denom = T::zero();
    for l in row.iter_mut() {
        *l = (*l - max).exp();
        denom = denom + *l;
    }
    let inv = T::one() / denom;
    for l in row.iter_mut() {
        *l = *l * inv;
    }
}

fn attention_core<T: Scalar>(
    q: &Tensor<T>,
    kmat: &Im2ColMatrix<T>,
    vmat: &Im2ColMatrix<T>,
    cfg: &AttentionConfig,
    keep_state: bool,
) -> Result<(Tensor<T>, Option<CoreState<T>>)> {
    let (_, h, w, c) = q.dims4()?;
    let heads = cfg.num_heads;
    let d = cfg.head_dim;
    let k = cfg.window_size;
    let kk = k * k;
    let hw = h * w;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let offsets: Vec<(i64, i64)> = window::offsets(k).collect();

    let qd = q.data();
    let kd = kmat.data().data();
    let vd = vmat.data().data();
    let mut out = Tensor::zeros([1, h, w, c]);
    let od = out.data_mut();
    let mut probs = if keep_state {
        vec![T::zero(); hw * heads * kk]
    } else {
        Vec::new()
    };

    // The column matrices store a whole feature map per direction, so
    // query-major access would hop H*W*C elements between directions. Tiling
    // the queries and sweeping directions outermost keeps every read of the
    // key/value buffers contiguous; only the small per-tile logit scratch is
    // revisited.
    let mut logits = vec![T::zero(); QUERY_TILE * heads * kk];
    for tile_start in (0..hw).step_by(QUERY_TILE) {
        let tile_len = QUERY_TILE.min(hw - tile_start);

        for dir in 0..kk {
            let (u, v) = offsets[dir];
            let k_dir = &kd[(dir * hw + tile_start) * c..][..tile_len * c];
            for ti in 0..tile_len {
                let qi = tile_start + ti;
                if cfg.mask_padding && !window::source_in_bounds(qi / w, qi % w, u, v, h, w) {
                    for m in 0..heads {
                        logits[(ti * heads + m) * kk + dir] = T::neg_infinity();
                    }
                    continue;
                }
                let q_px = &qd[qi * c..][..c];
                let k_px = &k_dir[ti * c..][..c];
                for m in 0..heads {
                    let acc = dot(&q_px[m * d..][..d], &k_px[m * d..][..d]);
                    logits[(ti * heads + m) * kk + dir] = acc * scale;
                }
            }
        }

        // Softmax per (query, head); masked directions become exact zeros.
        for row in logits[..tile_len * heads * kk].chunks_mut(kk) {
            softmax_window_row(row);
        }
        if keep_state {
            probs[tile_start * heads * kk..(tile_start + tile_len) * heads * kk]
                .copy_from_slice(&logits[..tile_len * heads * kk]);
        }

        for dir in 0..kk {
            let v_dir = &vd[(dir * hw + tile_start) * c..][..tile_len * c];
            for ti in 0..tile_len {
                let qi = tile_start + ti;
                let v_px = &v_dir[ti * c..][..c];
                let out_px = &mut od[qi * c..][..c];
                for m in 0..heads {
                    let weight = logits[(ti * heads + m) * kk + dir];
                    if weight == T::zero() {
                        continue;
                    }
                    for (o, &vv) in out_px[m * d..][..d].iter_mut().zip(&v_px[m * d..][..d]) {
                        *o = *o + weight * vv;
                    }
                }
            }
        }
    }
    Ok((out, keep_state.then_some(CoreState { probs })))
}

// The grouped-convolution output keeps all window samples of one query
// contiguous ([1, H, W, C*k*k], direction fastest), so the fused route runs
// attention straight over it instead of paying for a re-materialization into
// the direction-major column layout. With directions innermost, the logit
// accumulation is a k*k-wide broadcast-multiply per channel and the value
// mix is a k*k-long dot per output element; every read is contiguous.
fn attention_core_query_major<T: Scalar>(
    q: &Tensor<T>,
    conv_k: &Tensor<T>,
    conv_v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let (_, h, w, c) = q.dims4()?;
    let heads = cfg.num_heads;
    let d = cfg.head_dim;
    let k = cfg.window_size;
    let kk = k * k;
    let hw = h * w;
    let ckk = c * kk;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let offsets: Vec<(i64, i64)> = window::offsets(k).collect();
    for (name, t) in [("keys", conv_k), ("values", conv_v)] {
        if t.shape() != [1, h, w, ckk] {
            return Err(Error::shape(format!(
                "window-stacked {name} must be [1, {h}, {w}, {ckk}], got {:?}",
                t.shape()
            )));
        }
    }

    let qd = q.data();
    let kd = conv_k.data();
    let vd = conv_v.data();
    let mut out = Tensor::zeros([1, h, w, c]);
    let od = out.data_mut();

    let mut logits = vec![T::zero(); kk];
    let mut valid = vec![true; kk];
    for qi in 0..hw {
        if cfg.mask_padding {
            for (dir, &(u, v)) in offsets.iter().enumerate() {
                valid[dir] = window::source_in_bounds(qi / w, qi % w, u, v, h, w);
            }
        }
        let q_px = &qd[qi * c..][..c];
        let k_px = &kd[qi * ckk..][..ckk];
        let v_px = &vd[qi * ckk..][..ckk];
        let out_px = &mut od[qi * c..][..c];
        for m in 0..heads {
            logits.fill(T::zero());
            for ci in 0..d {
                let qv = q_px[m * d + ci];
                let k_dirs = &k_px[(m * d + ci) * kk..][..kk];
                for (l, &kv) in logits.iter_mut().zip(k_dirs) {
                    *l = *l + qv * kv;
                }
            }
            for (dir, l) in logits.iter_mut().enumerate() {
                *l = if valid[dir] {
                    *l * scale
                } else {
                    T::neg_infinity()
                };
            }
            softmax_window_row(&mut logits);
            for ci in 0..d {
                let v_dirs = &v_px[(m * d + ci) * kk..][..kk];
                out_px[m * d + ci] = dot(&logits, v_dirs);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`attention_core`] w.r.t. queries and the key/value columns.
fn attention_core_backward<T: Scalar>(
    q: &Tensor<T>,
    kmat: &Im2ColMatrix<T>,
    vmat: &Im2ColMatrix<T>,
    cfg: &AttentionConfig,
    state: &CoreState<T>,
    grad_z: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, h, w, c) = q.dims4()?;
    let heads = cfg.num_heads;
    let d = cfg.head_dim;
    let kk = cfg.window_size * cfg.window_size;
    let hw = h * w;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());

    let qd = q.data();
    let kd = kmat.data().data();
    let vd = vmat.data().data();
    let gz = grad_z.data();

    let mut grad_q = Tensor::zeros([1, h, w, c]);
    let mut grad_kcols = Tensor::zeros([kk, hw, c]);
    let mut grad_vcols = Tensor::zeros([kk, hw, c]);
    let gq = grad_q.data_mut();
    let gk = grad_kcols.data_mut();
    let gv = grad_vcols.data_mut();

    let mut grad_s = vec![T::zero(); kk];
    for qi in 0..hw {
        for m in 0..heads {
            let s = &state.probs[(qi * heads + m) * kk..][..kk];
            let gz_h = &gz[qi * c + m * d..][..d];
            let q_h = &qd[qi * c + m * d..][..d];

            // dL/ds_r = gz . V_r  and  dL/dV_r = s_r * gz.
            for dir in 0..kk {
                let v_h = &vd[(dir * hw + qi) * c + m * d..][..d];
                let mut acc = T::zero();
                for (&g, &vv) in gz_h.iter().zip(v_h) {
                    acc = acc + g * vv;
                }
                grad_s[dir] = acc;
                if s[dir] != T::zero() {
                    let gv_h = &mut gv[(dir * hw + qi) * c + m * d..][..d];
                    for (o, &g) in gv_h.iter_mut().zip(gz_h) {
                        *o = *o + s[dir] * g;
                    }
                }
            }

            // Softmax backward: dl_r = s_r (gs_r - sum_j gs_j s_j). Masked
            // entries have s_r = 0 and drop out on their own.
            let mut dot = T::zero();
            for (&sv, &gs) in s.iter().zip(&grad_s) {
                dot = dot + sv * gs;
            }
            let gq_h = &mut gq[qi * c + m * d..][..d];
            for dir in 0..kk {
                let dl = s[dir] * (grad_s[dir] - dot);
                if dl == T::zero() {
                    continue;
                }
                let dls = dl * scale;
                let k_h = &kd[(dir * hw + qi) * c + m * d..][..d];
                let gk_h = &mut gk[(dir * hw + qi) * c + m * d..][..d];
                for ci in 0..d {
                    gq_h[ci] = gq_h[ci] + dls * k_h[ci];
                    gk_h[ci] = gk_h[ci] + dls * q_h[ci];
                }
            }
        }
    }
    Ok((grad_q, grad_kcols, grad_vcols))
}

/// Multi-head window attention over pre-built key/value column matrices
/// (the fast core shared by the shift and convolution routes).
pub fn attention_over_columns<T: Scalar>(
    q: &Tensor<T>,
    kmat: &Im2ColMatrix<T>,
    vmat: &Im2ColMatrix<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let (out, _) = attention_core(q, kmat, vmat, cfg, false)?;
    Ok(out)
}

/// The fast local-attention forward (fused-convolution key/value route).
pub fn slide_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    slide_attention_forward_with_route(x, cfg, params, KvRoute::DwConvFused)
}

/// Forward with an explicit choice of key/value generation machinery.
pub fn slide_attention_forward_with_route<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    route: KvRoute,
) -> Result<Tensor<T>> {
    params.validate(cfg)?;
    check_input(x, cfg)?;
    let (q, k, v) = project_qkv(x, params)?;
    let z = match route {
        KvRoute::Shifts => {
            if cfg.use_deformed {
                return Err(Error::config(
                    "the shift route has no deformed form; use the fused convolution route",
                ));
            }
            let kmat = im2col_via_shifts(&k, cfg.window_size)?;
            let vmat = im2col_via_shifts(&v, cfg.window_size)?;
            let (z, _) = attention_core(&q, &kmat, &vmat, cfg, false)?;
            z
        }
        KvRoute::DwConvFused => {
            let conv_k = window_stack_conv(&k, cfg, &params.deformed_k)?;
            let conv_v = window_stack_conv(&v, cfg, &params.deformed_v)?;
            attention_core_query_major(&q, &conv_k, &conv_v, cfg)?
        }
    };
    apply_projection(&z, &params.w_o)
}

/// The naive ground-truth forward: column-based Im2Col plus the scalar-loop
/// attention reference, composed with the same projections as the fast path.
pub fn reference_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    if cfg.use_deformed {
        return Err(Error::config(
            "the column-based reference has no deformed form",
        ));
    }
    params.validate(cfg)?;
    check_input(x, cfg)?;
    let (q, k, v) = project_qkv(x, params)?;
    let kmat = im2col(&k, cfg.window_size)?;
    let vmat = im2col(&v, cfg.window_size)?;
    let z = local_attention_reference_multihead(&q, &kmat, &vmat, cfg.num_heads, cfg.mask_padding)?;
    apply_projection(&z, &params.w_o)
}

/// Gradients returned by [`slide_attention_backward`]. The fixed shift bank
/// is a constant and has no entry; learnable kernel gradients only exist when
/// the deformed module is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub learnable_k: Option<Tensor<T>>,
    pub learnable_v: Option<Tensor<T>>,
}

/// Analytic backward of the training-form forward (two-path convolutions
/// when the deformed module is enabled). Recomputes its own intermediates.
pub fn slide_attention_backward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    upstream: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    params.validate(cfg)?;
    let (h, w) = check_input(x, cfg)?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape(format!(
            "upstream gradient shape {:?} does not match output shape {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let c = cfg.embed_dim;
    let k = cfg.window_size;
    let hw = h * w;

    // Recompute the forward, keeping softmax weights.
    let (q, kf, vf) = project_qkv(x, params)?;
    let conv_k = if cfg.use_deformed {
        params.deformed_k.forward_two_path(&kf)?
    } else {
        grouped_conv2d(&kf, params.deformed_k.fixed_bank().kernels(), k / 2)?
    };
    let conv_v = if cfg.use_deformed {
        params.deformed_v.forward_two_path(&vf)?
    } else {
        grouped_conv2d(&vf, params.deformed_v.fixed_bank().kernels(), k / 2)?
    };
    let kmat = grouped_output_to_columns(&conv_k, k)?;
    let vmat = grouped_output_to_columns(&conv_v, k)?;
    let (z, state) = attention_core(&q, &kmat, &vmat, cfg, true)?;
    let state = state.expect("state requested");

    // Output projection: out = z W_o.
    let z_flat = z.clone().reshape([hw, c])?;
    let up_flat = upstream.clone().reshape([hw, c])?;
    let grad_z_flat = matmul(&up_flat, &params.w_o.transpose2d()?)?;
    let grad_w_o = matmul(&z_flat.transpose2d()?, &up_flat)?;
    let grad_z = grad_z_flat.reshape([1, h, w, c])?;

    // Attention core.
    let (grad_q, grad_kcols, grad_vcols) =
        attention_core_backward(&q, &kmat, &vmat, cfg, &state, &grad_z)?;

    // Column layout back to convolution-output layout, then through the
    // convolution that generated the columns.
    let grad_conv_k = columns_to_grouped_output(&grad_kcols, h, w)?;
    let grad_conv_v = columns_to_grouped_output(&grad_vcols, h, w)?;
    let (grad_kf, learnable_k) = if cfg.use_deformed {
        let (gi, gk) = params.deformed_k.two_path_backward(&kf, &grad_conv_k)?;
        (gi, Some(gk))
    } else {
        let (gi, _) =
            grouped_conv2d_backward(&kf, params.deformed_k.fixed_bank().kernels(), &grad_conv_k)?;
        (gi, None)
    };
    let (grad_vf, learnable_v) = if cfg.use_deformed {
        let (gi, gv) = params.deformed_v.two_path_backward(&vf, &grad_conv_v)?;
        (gi, Some(gv))
    } else {
        let (gi, _) =
            grouped_conv2d_backward(&vf, params.deformed_v.fixed_bank().kernels(), &grad_conv_v)?;
        (gi, None)
    };

    // Input projections.
    let x_flat = x.clone().reshape([hw, c])?;
    let x_flat_t = x_flat.transpose2d()?;
    let gq_flat = grad_q.reshape([hw, c])?;
    let gk_flat = grad_kf.reshape([hw, c])?;
    let gv_flat = grad_vf.reshape([hw, c])?;
    let grad_w_q = matmul(&x_flat_t, &gq_flat)?;
    let grad_w_k = matmul(&x_flat_t, &gk_flat)?;
    let grad_w_v = matmul(&x_flat_t, &gv_flat)?;
    let grad_x = matmul(&gq_flat, &params.w_q.transpose2d()?)?
        .add(&matmul(&gk_flat, &params.w_k.transpose2d()?)?)?
        .add(&matmul(&gv_flat, &params.w_v.transpose2d()?)?)?
        .reshape([1, h, w, c])?;

    Ok(AttentionGrads {
        x: grad_x,
        w_q: grad_w_q,
        w_k: grad_w_k,
        w_v: grad_w_v,
        w_o: grad_w_o,
        learnable_k,
        learnable_v,
    })
}
