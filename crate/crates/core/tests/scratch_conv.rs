use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slide_attn::tensor::Tensor;

const H: usize = 56;
const W: usize = 56;
const C: usize = 96;
const K: usize = 3;
const G: usize = 9;
const PAD: usize = 1;

// Variant A: output-pixel outer, per-channel G-wide axpy (dynamic G).
fn conv_a(x: &[f32], ker: &[f32], out: &mut [f32]) {
    let cg = C * G;
    for hi in 0..H {
        for wi in 0..W {
            let out_px = &mut out[(hi * W + wi) * cg..][..cg];
            for p in 0..K {
                let ih = hi as i64 + p as i64 - PAD as i64;
                if ih < 0 || ih >= H as i64 {
                    continue;
                }
                for q in 0..K {
                    let iw = wi as i64 + q as i64 - PAD as i64;
                    if iw < 0 || iw >= W as i64 {
                        continue;
                    }
                    let in_px = &x[(ih as usize * W + iw as usize) * C..][..C];
                    let ker_pq = &ker[(p * K + q) * cg..][..cg];
                    for ((&xv, kc), oc) in in_px
                        .iter()
                        .zip(ker_pq.chunks_exact(G))
                        .zip(out_px.chunks_exact_mut(G))
                    {
                        for (o, &kv) in oc.iter_mut().zip(kc) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
}

// Variant C: same as A but const-specialized G so the axpy unrolls.
fn conv_c<const GG: usize>(x: &[f32], ker: &[f32], out: &mut [f32]) {
    let cg = C * GG;
    for hi in 0..H {
        for wi in 0..W {
            let out_px = &mut out[(hi * W + wi) * cg..][..cg];
            for p in 0..K {
                let ih = hi as i64 + p as i64 - PAD as i64;
                if ih < 0 || ih >= H as i64 {
                    continue;
                }
                for q in 0..K {
                    let iw = wi as i64 + q as i64 - PAD as i64;
                    if iw < 0 || iw >= W as i64 {
                        continue;
                    }
                    let in_px = &x[(ih as usize * W + iw as usize) * C..][..C];
                    let ker_pq = &ker[(p * K + q) * cg..][..cg];
                    for ((&xv, kc), oc) in in_px
                        .iter()
                        .zip(ker_pq.chunks_exact(GG))
                        .zip(out_px.chunks_exact_mut(GG))
                    {
                        for (o, &kv) in oc.iter_mut().zip(kc) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
}

// Variant D: input-pixel outer with a small per-pixel expanded scratch.
fn conv_d(x: &[f32], ker: &[f32], out: &mut [f32]) {
    let cg = C * G;
    let mut xg = vec![0.0f32; cg];
    for hi in 0..H {
        for wi in 0..W {
            let in_px = &x[(hi * W + wi) * C..][..C];
            for (chunk, &v) in xg.chunks_exact_mut(G).zip(in_px) {
                chunk.fill(v);
            }
            for p in 0..K {
                let oh = hi as i64 - p as i64 + PAD as i64;
                if oh < 0 || oh >= H as i64 {
                    continue;
                }
                for q in 0..K {
                    let ow = wi as i64 - q as i64 + PAD as i64;
                    if ow < 0 || ow >= W as i64 {
                        continue;
                    }
                    let out_px = &mut out[(oh as usize * W + ow as usize) * cg..][..cg];
                    let ker_pq = &ker[(p * K + q) * cg..][..cg];
                    for ((o, &xv), &kv) in out_px.iter_mut().zip(&xg).zip(ker_pq) {
                        *o += xv * kv;
                    }
                }
            }
        }
    }
}

// Variant E: output-pixel outer, all nine taps of one channel block fused so
// the output slice is loaded/stored once per pixel.
fn conv_e(x: &[f32], ker: &[f32], out: &mut [f32]) {
    let cg = C * G;
    for hi in 0..H {
        let interior_h = hi >= PAD && hi + PAD < H;
        for wi in 0..W {
            let out_px = &mut out[(hi * W + wi) * cg..][..cg];
            let interior = interior_h && wi >= PAD && wi + PAD < W;
            if interior {
                // in-bounds fast path: gather the 9 input pixel slices first
                let mut in_ptr: [&[f32]; 9] = [&[]; 9];
                for p in 0..K {
                    for q in 0..K {
                        let ih = hi + p - PAD;
                        let iw = wi + q - PAD;
                        in_ptr[p * K + q] = &x[(ih * W + iw) * C..][..C];
                    }
                }
                for ci in 0..C {
                    let base = ci * G;
                    let oc: &mut [f32] = &mut out_px[base..base + G];
                    for (tap, in_px) in in_ptr.iter().enumerate() {
                        let xv = in_px[ci];
                        let kc = &ker[tap * cg + base..][..G];
                        for (o, &kv) in oc.iter_mut().zip(kc) {
                            *o += xv * kv;
                        }
                    }
                }
            } else {
                for p in 0..K {
                    let ih = hi as i64 + p as i64 - PAD as i64;
                    if ih < 0 || ih >= H as i64 {
                        continue;
                    }
                    for q in 0..K {
                        let iw = wi as i64 + q as i64 - PAD as i64;
                        if iw < 0 || iw >= W as i64 {
                            continue;
                        }
                        let in_px = &x[(ih as usize * W + iw as usize) * C..][..C];
                        let ker_pq = &ker[(p * K + q) * cg..][..cg];
                        for ((&xv, kc), oc) in in_px
                            .iter()
                            .zip(ker_pq.chunks_exact(G))
                            .zip(out_px.chunks_exact_mut(G))
                        {
                            for (o, &kv) in oc.iter_mut().zip(kc) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn time(name: &str, mut f: impl FnMut()) {
    f();
    let reps = 11;
    let mut times = Vec::new();
    for _ in 0..reps {
        let start = Instant::now();
        f();
        times.push(start.elapsed());
    }
    times.sort();
    println!("{name}: median {:?}", times[reps / 2]);
}

#[test]
fn conv_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::random_uniform([1, H, W, C], -1.0, 1.0, &mut rng).into_data();
    let ker = Tensor::<f32>::random_uniform([K, K, C, G], -1.0, 1.0, &mut rng).into_data();
    let cg = C * G;

    let mut out_a = vec![0.0f32; H * W * cg];
    let mut out_c = vec![0.0f32; H * W * cg];
    let mut out_d = vec![0.0f32; H * W * cg];
    let mut out_e = vec![0.0f32; H * W * cg];

    time("A dyn-G axpy      ", || {
        out_a.fill(0.0);
        conv_a(&x, &ker, &mut out_a);
    });
    time("C const-G axpy    ", || {
        out_c.fill(0.0);
        conv_c::<G>(&x, &ker, &mut out_c);
    });
    time("D scatter expanded", || {
        out_d.fill(0.0);
        conv_d(&x, &ker, &mut out_d);
    });
    time("E tap-fused       ", || {
        out_e.fill(0.0);
        conv_e(&x, &ker, &mut out_e);
    });

    // all variants agree (different tap order for D ⇒ tolerance)
    for i in 0..out_a.len() {
        assert!((out_a[i] - out_c[i]).abs() < 1e-4);
        assert!((out_a[i] - out_d[i]).abs() < 1e-4);
        assert!((out_a[i] - out_e[i]).abs() < 1e-4);
    }
}
