use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slide_attn::tensor::Tensor;

// Variant A with all-runtime dimensions.
#[inline(never)]
fn conv_a_dyn(
    x: &[f32],
    ker: &[f32],
    out: &mut [f32],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    g: usize,
    pad: usize,
) {
    let cg = c * g;
    for hi in 0..h {
        for wi in 0..w {
            let out_px = &mut out[(hi * w + wi) * cg..][..cg];
            for p in 0..k {
                let ih = hi as i64 + p as i64 - pad as i64;
                if ih < 0 || ih >= h as i64 {
                    continue;
                }
                for q in 0..k {
                    let iw = wi as i64 + q as i64 - pad as i64;
                    if iw < 0 || iw >= w as i64 {
                        continue;
                    }
                    let in_px = &x[(ih as usize * w + iw as usize) * c..][..c];
                    let ker_pq = &ker[(p * k + q) * cg..][..cg];
                    for ((&xv, kc), oc) in in_px
                        .iter()
                        .zip(ker_pq.chunks_exact(g))
                        .zip(out_px.chunks_exact_mut(g))
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
fn dyn_dims_and_alloc() {
    let (h, w, c, k, g, pad) = (56usize, 56, 96, 3usize, 9usize, 1usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng).into_data();
    let ker = Tensor::<f32>::random_uniform([k, k, c, g], -1.0, 1.0, &mut rng).into_data();
    let cg = c * g;

    let mut reused = vec![0.0f32; h * w * cg];
    time("dyn dims, reused buffer", || {
        reused.fill(0.0);
        conv_a_dyn(&x, &ker, &mut reused, h, w, c, k, g, pad);
        std::hint::black_box(&reused);
    });
    time("dyn dims, fresh alloc  ", || {
        let mut fresh = vec![0.0f32; h * w * cg];
        conv_a_dyn(&x, &ker, &mut fresh, h, w, c, k, g, pad);
        std::hint::black_box(&fresh);
    });
    time("in-crate grouped_conv2d", || {
        let xt = Tensor::<f32>::new([1, h, w, c], x.clone()).unwrap();
        let kt = Tensor::<f32>::new([k, k, c, g], ker.clone()).unwrap();
        std::hint::black_box(slide_attn::conv::grouped_conv2d(&xt, &kt, pad).unwrap());
    });
}
