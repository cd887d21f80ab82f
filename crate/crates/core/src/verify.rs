//! The equivalence and gradient suite behind the `verify` subcommand and the
//! acceptance tests: randomized cross-implementation checks, re-parameterization
//! exactness, translation equivariance, and finite-difference validation of
//! every analytic backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    reference_forward, slide_attention_backward, slide_attention_forward, AttentionConfig,
    AttentionParams,
};
use crate::conv::{
    depthwise_conv2d, depthwise_conv2d_backward, grouped_conv2d, grouped_conv2d_backward,
    op_counter,
};
use crate::deformed::DeformedShiftParams;
use crate::demo;
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::im2col::im2col;
use crate::shift::{im2col_via_dwconv, im2col_via_shifts, shift_feature, ShiftConvMode,
    ShiftKernelBank};
use crate::tensor::{matmul, matmul_backward, softmax_lastdim_backward, Scalar, Tensor};
use crate::window;

/// Result of one named check, with enough detail to print a useful line.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            passed: false,
            detail,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} — {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn scaled_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn max_scaled_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| scaled_diff(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max)
}

/// Three-way lowering equivalence: the column-based oracle, the shift route,
/// and the fused-convolution route must agree element-exactly on randomized
/// shapes across all supported window sizes.
pub fn check_im2col_equivalence(cases: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "im2col three-way equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = [1usize, 3, 5, 7];
    for case in 0..cases {
        let k = windows[rng.random_range(0..windows.len())];
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let c = rng.random_range(1..=8);
        let f = Tensor::<f64>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng);
        let oracle = im2col(&f, k).expect("valid window");
        let shifted = im2col_via_shifts(&f, k).expect("valid window");
        let bank = ShiftKernelBank::new(k, c).expect("valid window");
        let conv = im2col_via_dwconv(&f, &bank, ShiftConvMode::Fused).expect("valid bank");
        if oracle != shifted {
            return CheckOutcome::fail(
                NAME,
                format!("case {case} (H={h} W={w} C={c} k={k}): shift route differs from oracle"),
            );
        }
        if oracle != conv {
            return CheckOutcome::fail(
                NAME,
                format!(
                    "case {case} (H={h} W={w} C={c} k={k}): convolution route differs from oracle"
                ),
            );
        }
    }
    CheckOutcome::pass(NAME, format!("{cases} randomized cases, element-exact"))
}

/// Every kernel slice of the shift bank applied as a depthwise convolution
/// must reproduce the plain feature shift, element-exactly.
pub fn check_shift_kernel_identity(cases: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "shift-kernel identity";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = [1usize, 3, 5, 7];
    let mut directions = 0usize;
    for case in 0..cases {
        let k = windows[rng.random_range(0..windows.len())];
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let c = rng.random_range(1..=4);
        let f = Tensor::<f64>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng);
        let bank = ShiftKernelBank::new(k, c).expect("valid window");
        for (dir, (u, v)) in window::offsets(k).enumerate() {
            let conv = depthwise_conv2d(&f, &bank.direction_slice(dir), k / 2).expect("valid");
            let shifted = shift_feature(&f, u, v).expect("4-D input");
            if conv != shifted {
                return CheckOutcome::fail(
                    NAME,
                    format!("case {case} (k={k}, direction ({u},{v})): convolution != shift"),
                );
            }
            directions += 1;
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{cases} cases, {directions} directions, element-exact"),
    )
}

/// The fast forward with the fixed bank must match the naive Im2Col
/// reference composed with the same projections, in both padding modes.
pub fn check_attention_oracle_equivalence(cases: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "attention oracle equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_options = [(2usize, 1usize), (4, 2), (4, 1), (8, 4), (8, 2), (6, 3)];
    let windows = [1usize, 3, 5];
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (c, heads) = head_options[rng.random_range(0..head_options.len())];
        let k = windows[rng.random_range(0..windows.len())];
        let h = rng.random_range(2..=6);
        let w = rng.random_range(2..=6);
        let mask = case % 2 == 0;
        let cfg = AttentionConfig::new(c, heads, k)
            .expect("valid config")
            .with_mask_padding(mask);
        let params = AttentionParams::<f64>::random(&cfg, rng.random()).expect("valid params");
        let x = Tensor::<f64>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng);
        let fast = slide_attention_forward(&x, &cfg, &params).expect("forward");
        let naive = reference_forward(&x, &cfg, &params).expect("reference");
        let diff = max_scaled_diff(&fast, &naive);
        worst = worst.max(diff);
        if diff > 1e-10 {
            return CheckOutcome::fail(
                NAME,
                format!(
                    "case {case} (H={h} W={w} C={c} M={heads} k={k} mask={mask}): \
                     max deviation {diff:.3e} > 1e-10"
                ),
            );
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{cases} configs, both padding modes, max deviation {worst:.3e} <= 1e-10"),
    )
}

fn reparam_cases<T: Scalar>(cases: usize, seed: u64, tol: f64) -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = [1usize, 3, 5];
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = windows[rng.random_range(0..windows.len())];
        let c = rng.random_range(1..=6);
        let h = rng.random_range(2..=7);
        let w = rng.random_range(2..=7);
        let params = DeformedShiftParams::<T>::init(k, c, rng.random()).expect("valid");
        let f = Tensor::<T>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng);
        let two = params.forward_two_path(&f).expect("forward");
        let one = params
            .reparameterize()
            .expect("first merge")
            .forward_merged(&f)
            .expect("merged forward");
        let diff = max_scaled_diff(&two, &one);
        worst = worst.max(diff);
        if diff > tol {
            return Err(format!(
                "case {case} ({}, H={h} W={w} C={c} k={k}): max deviation {diff:.3e} > {tol:.1e}",
                std::any::type_name::<T>()
            ));
        }
    }
    Ok(worst)
}

/// Merged-kernel forward equals the two-path forward at dtype tolerance, and
/// the merged path costs exactly one grouped convolution instead of two.
pub fn check_reparam_exactness(cases: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "re-parameterization exactness";
    let worst64 = match reparam_cases::<f64>(cases, seed, 1e-12) {
        Ok(w) => w,
        Err(detail) => return CheckOutcome::fail(NAME, detail),
    };
    let worst32 = match reparam_cases::<f32>(cases, seed ^ 0xdead_beef, 1e-6) {
        Ok(w) => w,
        Err(detail) => return CheckOutcome::fail(NAME, detail),
    };

    // Structural half-cost claim, measured by the op counter.
    let params = DeformedShiftParams::<f64>::init(3, 2, seed).expect("valid");
    let f = Tensor::<f64>::filled([1, 4, 4, 2], 0.5);
    op_counter::reset();
    params.forward_two_path(&f).expect("forward");
    let two = op_counter::stats();
    let merged = params.reparameterize().expect("merge");
    op_counter::reset();
    merged.forward_merged(&f).expect("merged forward");
    let one = op_counter::stats();
    if two.grouped_calls != 2 || one.grouped_calls != 1 || two.madds != 2 * one.madds {
        return CheckOutcome::fail(
            NAME,
            format!(
                "operation counter: two-path ran {} grouped convs / {} madds, \
                 merged ran {} / {}",
                two.grouped_calls, two.madds, one.grouped_calls, one.madds
            ),
        );
    }
    CheckOutcome::pass(
        NAME,
        format!(
            "{cases} f64 cases (max {worst64:.3e} <= 1e-12), {cases} f32 cases \
             (max {worst32:.3e} <= 1e-6), merged path = 1 grouped conv vs 2"
        ),
    )
}

/// Interior-restricted translation equivariance of the fixed-bank block:
/// shifting the input then running the forward equals running the forward
/// then shifting, bit for bit, away from the borders.
pub fn check_translation_equivariance(cases: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "translation equivariance";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked_positions = 0usize;
    for case in 0..cases {
        let k = if rng.random_range(0..2) == 0 { 1 } else { 3 };
        let c = 4;
        let h = rng.random_range(7..=9);
        let w = rng.random_range(7..=9);
        let (s, t) = loop {
            let s = rng.random_range(-2..=2i64);
            let t = rng.random_range(-2..=2i64);
            if s != 0 || t != 0 {
                break (s, t);
            }
        };
        let cfg = AttentionConfig::new(c, 2, k)
            .expect("valid config")
            .with_mask_padding(case % 2 == 0);
        let params = AttentionParams::<f64>::random(&cfg, rng.random()).expect("valid");
        let x = Tensor::<f64>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng);

        let forward_of_shifted =
            slide_attention_forward(&shift_feature(&x, s, t).expect("shift"), &cfg, &params)
                .expect("forward");
        let shifted_forward =
            shift_feature(&slide_attention_forward(&x, &cfg, &params).expect("forward"), s, t)
                .expect("shift");

        let margin = (k / 2) as i64 + s.abs().max(t.abs());
        for hi in 0..h as i64 {
            for wi in 0..w as i64 {
                let interior = hi >= margin
                    && hi < h as i64 - margin
                    && wi >= margin
                    && wi < w as i64 - margin;
                if !interior {
                    continue;
                }
                for ci in 0..c {
                    let a = forward_of_shifted.at4(0, hi as usize, wi as usize, ci);
                    let b = shifted_forward.at4(0, hi as usize, wi as usize, ci);
                    if a != b {
                        return CheckOutcome::fail(
                            NAME,
                            format!(
                                "case {case} (H={h} W={w} k={k} shift=({s},{t})): \
                                 mismatch at ({hi},{wi},{ci}): {a} vs {b}"
                            ),
                        );
                    }
                    checked_positions += 1;
                }
            }
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{cases} instances, {checked_positions} interior values equal exactly"),
    )
}

fn dot_loss<T: Scalar>(out: &Tensor<T>, upstream: &Tensor<T>) -> f64 {
    out.data()
        .iter()
        .zip(upstream.data())
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum()
}

fn all_passed(reports: &[GradReport]) -> std::result::Result<(), String> {
    match reports.iter().find(|r| !r.passed) {
        None => Ok(()),
        Some(r) => Err(r.to_string()),
    }
}

fn gradcheck_matmul(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::<f64>::random_uniform([3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::random_uniform([4, 5], -1.0, 1.0, &mut rng);
    let upstream = Tensor::<f64>::random_uniform([3, 5], -1.0, 1.0, &mut rng);
    let (ga, gb) = matmul_backward(&a, &b, &upstream)?;
    let up = upstream.clone();
    check_gradients(
        move |p| Ok(dot_loss(&matmul(&p[0], &p[1])?, &up)),
        &[("matmul.a", a), ("matmul.b", b)],
        &[ga, gb],
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

fn gradcheck_softmax(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::random_uniform([4, 5], -2.0, 2.0, &mut rng);
    let upstream = Tensor::<f64>::random_uniform([4, 5], -1.0, 1.0, &mut rng);
    let y = x.softmax_lastdim()?;
    let gx = softmax_lastdim_backward(&y, &upstream)?;
    let up = upstream.clone();
    check_gradients(
        move |p| Ok(dot_loss(&p[0].softmax_lastdim()?, &up)),
        &[("softmax.x", x)],
        &[gx],
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

fn gradcheck_depthwise(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::random_uniform([1, 4, 4, 2], -1.0, 1.0, &mut rng);
    let kernel = Tensor::<f64>::random_uniform([3, 3, 2], -1.0, 1.0, &mut rng);
    let upstream = Tensor::<f64>::random_uniform([1, 4, 4, 2], -1.0, 1.0, &mut rng);
    let (gx, gk) = depthwise_conv2d_backward(&x, &kernel, &upstream)?;
    let up = upstream.clone();
    check_gradients(
        move |p| Ok(dot_loss(&depthwise_conv2d(&p[0], &p[1], 1)?, &up)),
        &[("depthwise.input", x), ("depthwise.kernel", kernel)],
        &[gx, gk],
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

fn gradcheck_grouped(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::random_uniform([1, 3, 3, 2], -1.0, 1.0, &mut rng);
    let kernels = Tensor::<f64>::random_uniform([3, 3, 2, 4], -1.0, 1.0, &mut rng);
    let upstream = Tensor::<f64>::random_uniform([1, 3, 3, 8], -1.0, 1.0, &mut rng);
    let (gx, gk) = grouped_conv2d_backward(&x, &kernels, &upstream)?;
    let up = upstream.clone();
    check_gradients(
        move |p| Ok(dot_loss(&grouped_conv2d(&p[0], &p[1], 1)?, &up)),
        &[("grouped.input", x), ("grouped.kernels", kernels)],
        &[gx, gk],
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

fn gradcheck_two_path(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, c) = (3usize, 2usize);
    let x = Tensor::<f64>::random_uniform([1, 3, 3, c], -1.0, 1.0, &mut rng);
    let params = DeformedShiftParams::<f64>::init(k, c, rng.random())?;
    let upstream = Tensor::<f64>::random_uniform([1, 3, 3, c * k * k], -1.0, 1.0, &mut rng);
    let (gx, glearn) = params.two_path_backward(&x, &upstream)?;
    let up = upstream.clone();
    check_gradients(
        move |p| {
            let rebuilt = DeformedShiftParams::with_learnable(k, c, p[1].clone())?;
            Ok(dot_loss(&rebuilt.forward_two_path(&p[0])?, &up))
        },
        &[
            ("two_path.input", x),
            ("two_path.learnable", params.learnable().clone()),
        ],
        &[gx, glearn],
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

fn gradcheck_attention(seed: u64, use_deformed: bool, mask: bool) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, heads, k) = (4usize, 2usize, 3usize);
    let cfg = AttentionConfig::new(c, heads, k)?
        .with_mask_padding(mask)
        .with_deformed(use_deformed);
    let x = Tensor::<f64>::random_uniform([1, 3, 3, c], -1.0, 1.0, &mut rng);
    let params = AttentionParams::<f64>::random(&cfg, rng.random())?;
    let upstream = Tensor::<f64>::random_uniform([1, 3, 3, c], -1.0, 1.0, &mut rng);
    let grads = slide_attention_backward(&x, &cfg, &params, &upstream)?;

    let mut named: Vec<(&str, Tensor<f64>)> = vec![
        ("attention.x", x),
        ("attention.w_q", params.w_q.clone()),
        ("attention.w_k", params.w_k.clone()),
        ("attention.w_v", params.w_v.clone()),
        ("attention.w_o", params.w_o.clone()),
    ];
    let mut analytic = vec![grads.x, grads.w_q, grads.w_k, grads.w_v, grads.w_o];
    if use_deformed {
        named.push(("attention.learnable_k", params.deformed_k.learnable().clone()));
        named.push(("attention.learnable_v", params.deformed_v.learnable().clone()));
        analytic.push(grads.learnable_k.expect("deformed grads"));
        analytic.push(grads.learnable_v.expect("deformed grads"));
    }

    let up = upstream.clone();
    check_gradients(
        move |p| {
            let rebuilt = AttentionParams {
                w_q: p[1].clone(),
                w_k: p[2].clone(),
                w_v: p[3].clone(),
                w_o: p[4].clone(),
                deformed_k: if use_deformed {
                    DeformedShiftParams::with_learnable(k, c, p[5].clone())?
                } else {
                    DeformedShiftParams::with_learnable(k, c, Tensor::zeros([k, k, c, k * k]))?
                },
                deformed_v: if use_deformed {
                    DeformedShiftParams::with_learnable(k, c, p[6].clone())?
                } else {
                    DeformedShiftParams::with_learnable(k, c, Tensor::zeros([k, k, c, k * k]))?
                },
            };
            Ok(dot_loss(
                &slide_attention_forward(&p[0], &cfg, &rebuilt)?,
                &up,
            ))
        },
        &named,
        &analytic,
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

/// Finite-difference validation of every analytic backward, plus the
/// negative control (a deliberately perturbed gradient must be caught).
pub fn check_gradient_suite(seeds: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "gradient checks";
    let mut total = 0usize;
    for i in 0..seeds as u64 {
        let s = seed.wrapping_add(i);
        let batches: [(&str, Result<Vec<GradReport>>); 6] = [
            ("matmul", gradcheck_matmul(s)),
            ("softmax", gradcheck_softmax(s)),
            ("depthwise", gradcheck_depthwise(s)),
            ("grouped", gradcheck_grouped(s)),
            ("two_path", gradcheck_two_path(s)),
            ("attention", gradcheck_attention(s, i % 2 == 0, i % 4 < 2)),
        ];
        for (op, batch) in batches {
            match batch {
                Err(e) => return CheckOutcome::fail(NAME, format!("{op} seed {s}: {e}")),
                Ok(reports) => {
                    total += reports.len();
                    if let Err(detail) = all_passed(&reports) {
                        return CheckOutcome::fail(NAME, format!("{op} seed {s}: {detail}"));
                    }
                }
            }
        }
    }

    // Negative control: inflate one analytic gradient by 1% and demand a
    // failing report.
    match negative_control(seed) {
        Ok(true) => {}
        Ok(false) => {
            return CheckOutcome::fail(
                NAME,
                "negative control: a 1% gradient perturbation went unnoticed".to_string(),
            )
        }
        Err(e) => return CheckOutcome::fail(NAME, format!("negative control: {e}")),
    }

    CheckOutcome::pass(
        NAME,
        format!(
            "{seeds} seeds x 6 ops, {total} parameter reports within rel {DEFAULT_TOL:.0e} \
             (eps {DEFAULT_EPS:.0e}); negative control caught"
        ),
    )
}

fn negative_control(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::<f64>::random_uniform([3, 4], 0.5, 1.5, &mut rng);
    let b = Tensor::<f64>::random_uniform([4, 5], 0.5, 1.5, &mut rng);
    let upstream = Tensor::<f64>::random_uniform([3, 5], 0.5, 1.5, &mut rng);
    let (ga, gb) = matmul_backward(&a, &b, &upstream)?;
    let perturbed = ga.scale(1.01);
    let up = upstream.clone();
    let reports = check_gradients(
        move |p| Ok(dot_loss(&matmul(&p[0], &p[1])?, &up)),
        &[("perturbed.a", a), ("perturbed.b", b)],
        &[perturbed, gb],
        DEFAULT_EPS,
        DEFAULT_TOL,
    )?;
    Ok(reports.iter().any(|r| !r.passed))
}

/// The worked-example structure: matrix rows are the shifted maps, matrix
/// columns are the flattened per-query windows.
pub fn check_demo_structure() -> CheckOutcome {
    const NAME: &str = "worked-example structure";
    let ex = demo::worked_example();
    for (dir, ((u, v), shifted)) in ex.shifted_rows.iter().enumerate() {
        if ex.matrix.row_as_feature(dir) != *shifted {
            return CheckOutcome::fail(NAME, format!("row ({u},{v}) is not the shifted map"));
        }
    }
    let (h, w, _) = ex.matrix.origin();
    for i in 0..h {
        for j in 0..w {
            let col = ex.matrix.column(ex.matrix.query_index(i, j));
            for (dir, (u, v)) in window::offsets(ex.matrix.k()).enumerate() {
                let want = ex.feature.spatial_or_zero(0, i as i64 + u, j as i64 + v, 0);
                if col.data()[dir] != want {
                    return CheckOutcome::fail(
                        NAME,
                        format!("column ({i},{j}) row ({u},{v}) is not the window sample"),
                    );
                }
            }
        }
    }
    CheckOutcome::pass(
        NAME,
        "9 rows match the shifted maps, 4 columns match the flattened windows".to_string(),
    )
}

/// Run the whole suite at acceptance-grade case counts.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_im2col_equivalence(200, seed),
        check_shift_kernel_identity(100, seed.wrapping_add(1)),
        check_attention_oracle_equivalence(50, seed.wrapping_add(2)),
        check_reparam_exactness(100, seed.wrapping_add(3)),
        check_gradient_suite(20, seed.wrapping_add(4)),
        check_translation_equivariance(50, seed.wrapping_add(5)),
        check_demo_structure(),
    ]
}
