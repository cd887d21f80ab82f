//! Latency benchmark harness: times the local-attention implementations
//! across resolutions and window sizes and emits machine-readable reports.
//! Checksums guard against dead-code elimination and against timing paths
//! that silently compute different functions.

use std::hint::black_box;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    reference_forward, slide_attention_forward_with_route, AttentionConfig, AttentionParams,
    KvRoute,
};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// The timed local-attention implementations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImplKind {
    /// Column-based Im2Col lowering with the naive scalar-loop attention.
    #[serde(rename = "im2col")]
    Im2col,
    /// Explicit per-direction feature shifts feeding the fast core.
    #[serde(rename = "shift")]
    Shift,
    /// One fused grouped convolution feeding the fast core.
    #[serde(rename = "dwconv_fused")]
    DwconvFused,
}

impl ImplKind {
    pub const ALL: [ImplKind; 3] = [ImplKind::Im2col, ImplKind::Shift, ImplKind::DwconvFused];

    pub fn as_str(&self) -> &'static str {
        match self {
            ImplKind::Im2col => "im2col",
            ImplKind::Shift => "shift",
            ImplKind::DwconvFused => "dwconv_fused",
        }
    }
}

impl std::fmt::Display for ImplKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ImplKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "im2col" => Ok(ImplKind::Im2col),
            "shift" => Ok(ImplKind::Shift),
            "dwconv_fused" => Ok(ImplKind::DwconvFused),
            other => Err(Error::config(format!(
                "implementations: unknown implementation {other:?} \
                 (expected im2col, shift, or dwconv_fused)"
            ))),
        }
    }
}

/// Benchmark sweep description. Spatial sizes pair up index-wise
/// (`heights[i] x widths[i]`); the channel and window-size lists cross with
/// every spatial size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub implementations: Vec<ImplKind>,
    pub heights: Vec<usize>,
    pub widths: Vec<usize>,
    pub channels: Vec<usize>,
    pub window_sizes: Vec<usize>,
    pub heads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub dtype: DType,
    pub seed: u64,
    pub mask_padding: bool,
    pub use_deformed: bool,
    /// Run cells on multiple threads. Voids the monotone-cost check; capped
    /// by the SLIDE_ATTN_THREADS environment variable.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            implementations: ImplKind::ALL.to_vec(),
            heights: vec![28, 56],
            widths: vec![28, 56],
            channels: vec![64, 96],
            window_sizes: vec![3],
            heads: 4,
            repeats: 9,
            warmup: 2,
            dtype: DType::F32,
            seed: 0,
            mask_padding: false,
            use_deformed: false,
            parallel: false,
        }
    }
}

impl BenchConfig {
    /// Validate every field, naming the offending one in the error.
    pub fn validate(&self) -> Result<()> {
        if self.implementations.is_empty() {
            return Err(Error::config("implementations: must not be empty"));
        }
        if self.heights.is_empty() {
            return Err(Error::config("heights: must not be empty"));
        }
        if self.heights.len() != self.widths.len() {
            return Err(Error::config(format!(
                "widths: {} entries do not pair with {} heights",
                self.widths.len(),
                self.heights.len()
            )));
        }
        if self.heights.iter().chain(&self.widths).any(|&v| v == 0) {
            return Err(Error::config("heights/widths: sizes must be positive"));
        }
        if self.channels.is_empty() {
            return Err(Error::config("channels: must not be empty"));
        }
        if self.window_sizes.is_empty() {
            return Err(Error::config("window_sizes: must not be empty"));
        }
        for &k in &self.window_sizes {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!(
                    "window_sizes: window size must be odd, got {k}"
                )));
            }
        }
        if self.heads == 0 {
            return Err(Error::config("heads: must be at least 1"));
        }
        for &c in &self.channels {
            if c % self.heads != 0 {
                return Err(Error::config(format!(
                    "channels: {c} is not divisible by heads = {}",
                    self.heads
                )));
            }
        }
        if self.repeats < 3 {
            return Err(Error::config(format!(
                "repeats: must be at least 3, got {}",
                self.repeats
            )));
        }
        if self.warmup < 1 {
            return Err(Error::config(format!(
                "warmup: must be at least 1, got {}",
                self.warmup
            )));
        }
        Ok(())
    }

    /// The `(H, W, C, k)` grid this config sweeps, in report order.
    pub fn cells(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for (&h, &w) in self.heights.iter().zip(&self.widths) {
            for &c in &self.channels {
                for &k in &self.window_sizes {
                    out.push((h, w, c, k));
                }
            }
        }
        out
    }
}

/// Timing and checksum for one `(implementation, H, W, C, k)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub implementation: ImplKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    /// Sum of the output elements; all implementations of one cell must
    /// agree on it when the deformed module is off.
    pub checksum: f64,
}

/// Full benchmark output: the config echoed back, environment notes, and one
/// row per (cell, implementation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub build_profile: String,
    pub cells: Vec<CellResult>,
}

/// Output encodings for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!(
                "format: expected json or csv, got {other:?}"
            ))),
        }
    }
}

// splitmix64; mixes the config seed with cell coordinates so every cell gets
// its own reproducible stream regardless of scheduling order.
fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn bench_cell<T: Scalar>(
    cfg: &BenchConfig,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) -> Result<Vec<CellResult>> {
    use rand::SeedableRng;
    let cell_seed = mix_seed(cfg.seed, &[h as u64, w as u64, c as u64, k as u64]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cell_seed);
    let x = Tensor::<T>::random_uniform([1, h, w, c], -1.0, 1.0, &mut rng);

    let fixed_cfg = AttentionConfig::new(c, cfg.heads, k)?.with_mask_padding(cfg.mask_padding);
    let mut params = AttentionParams::<T>::random(&fixed_cfg, cell_seed)?;
    let deformed_cfg = fixed_cfg.with_deformed(cfg.use_deformed);
    if cfg.use_deformed {
        // Inference form: one merged convolution per key/value path.
        params.deformed_k = params.deformed_k.reparameterize()?;
        params.deformed_v = params.deformed_v.reparameterize()?;
    }

    let run = |imp: ImplKind| -> Result<Tensor<T>> {
        match imp {
            ImplKind::Im2col => reference_forward(&x, &fixed_cfg, &params),
            ImplKind::Shift => {
                slide_attention_forward_with_route(&x, &fixed_cfg, &params, KvRoute::Shifts)
            }
            ImplKind::DwconvFused => {
                slide_attention_forward_with_route(&x, &deformed_cfg, &params, KvRoute::DwConvFused)
            }
        }
    };

    let mut results = Vec::with_capacity(cfg.implementations.len());
    for &imp in &cfg.implementations {
        for _ in 0..cfg.warmup {
            black_box(run(imp)?);
        }
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut checksum = 0.0;
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let out = run(imp)?;
            times.push(start.elapsed().as_nanos() as u64);
            checksum = black_box(out.sum_f64());
        }
        times.sort_unstable();
        results.push(CellResult {
            implementation: imp,
            h,
            w,
            c,
            k,
            median_ns: percentile(&times, 0.5),
            p10_ns: percentile(&times, 0.1),
            p90_ns: percentile(&times, 0.9),
            checksum,
        });
    }
    Ok(results)
}

fn thread_cap() -> usize {
    std::env::var("SLIDE_ATTN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn run_cells<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<CellResult>> {
    let cells = cfg.cells();
    if !cfg.parallel || cells.len() < 2 {
        let mut out = Vec::new();
        for (h, w, c, k) in cells {
            out.extend(bench_cell::<T>(cfg, h, w, c, k)?);
        }
        return Ok(out);
    }

    let threads = thread_cap().min(cells.len());
    let chunk = cells.len().div_ceil(threads);
    let mut slots: Vec<Result<Vec<CellResult>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|batch| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for &(h, w, c, k) in batch {
                        out.extend(bench_cell::<T>(cfg, h, w, c, k)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        for handle in handles {
            slots.push(handle.join().expect("bench thread panicked"));
        }
    });
    let mut out = Vec::new();
    for slot in slots {
        out.extend(slot?);
    }
    Ok(out)
}

/// Run the configured sweep. Inputs and parameters are derived from the seed
/// per cell, so everything except the wall-clock fields is deterministic.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let cells = match cfg.dtype {
        DType::F32 => run_cells::<f32>(cfg)?,
        DType::F64 => run_cells::<f64>(cfg)?,
    };
    Ok(BenchReport {
        config: cfg.clone(),
        build_profile: if cfg!(debug_assertions) {
            "debug".to_string()
        } else {
            "release".to_string()
        },
        cells,
    })
}

/// Render the fixed CSV schema:
/// `impl,H,W,C,k,heads,dtype,median_ns,p10_ns,p90_ns,checksum`.
pub fn render_csv(report: &BenchReport) -> String {
    let mut out = String::from("impl,H,W,C,k,heads,dtype,median_ns,p10_ns,p90_ns,checksum\n");
    for cell in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            cell.implementation.as_str(),
            cell.h,
            cell.w,
            cell.c,
            cell.k,
            report.config.heads,
            report.config.dtype,
            cell.median_ns,
            cell.p10_ns,
            cell.p90_ns,
            cell.checksum,
        ));
    }
    out
}

/// Serialize a report to `path` as JSON or CSV.
pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)?,
        ReportFormat::Csv => render_csv(report),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(body.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a JSON report back (the inverse of [`emit_report`] with
/// [`ReportFormat::Json`]).
pub fn parse_json_report(body: &str) -> Result<BenchReport> {
    Ok(serde_json::from_str(body)?)
}

/// Verify that all implementations of each cell computed the same function:
/// per `(H, W, C, k)`, checksums must agree within `rel_tol` relative to the
/// largest magnitude. Returns the offending cells.
pub fn checksum_disagreements(report: &BenchReport, rel_tol: f64) -> Vec<String> {
    let mut problems = Vec::new();
    let mut seen: Vec<(usize, usize, usize, usize)> = Vec::new();
    for cell in &report.cells {
        let key = (cell.h, cell.w, cell.c, cell.k);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let group: Vec<&CellResult> = report
            .cells
            .iter()
            .filter(|r| (r.h, r.w, r.c, r.k) == key)
            .collect();
        let max_mag = group
            .iter()
            .map(|r| r.checksum.abs())
            .fold(0.0f64, f64::max)
            .max(1.0);
        for pair in group.windows(2) {
            let diff = (pair[0].checksum - pair[1].checksum).abs();
            if diff > rel_tol * max_mag {
                problems.push(format!(
                    "cell {key:?}: {} checksum {} vs {} checksum {} (rel diff {:.3e})",
                    pair[0].implementation,
                    pair[0].checksum,
                    pair[1].implementation,
                    pair[1].checksum,
                    diff / max_mag,
                ));
            }
        }
    }
    problems
}

/// Check that per-implementation median latency is non-decreasing in the
/// window size for every fixed `(H, W, C)`, tolerating at most `allowed`
/// inversions across the whole report (timing noise happens).
pub fn count_k_inversions(report: &BenchReport) -> usize {
    let mut inversions = 0;
    for &imp in &report.config.implementations {
        for (&h, &w) in report.config.heights.iter().zip(&report.config.widths) {
            for &c in &report.config.channels {
                let mut series: Vec<(usize, u64)> = report
                    .cells
                    .iter()
                    .filter(|r| r.implementation == imp && (r.h, r.w, r.c) == (h, w, c))
                    .map(|r| (r.k, r.median_ns))
                    .collect();
                series.sort_by_key(|&(k, _)| k);
                inversions += series.windows(2).filter(|p| p[1].1 < p[0].1).count();
            }
        }
    }
    inversions
}

/// Cells where the fused-convolution median did not beat the column-based
/// Im2Col median.
pub fn ordering_violations(report: &BenchReport) -> Vec<String> {
    let mut seen: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut problems = Vec::new();
    for cell in &report.cells {
        let key = (cell.h, cell.w, cell.c, cell.k);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let find = |imp: ImplKind| {
            report
                .cells
                .iter()
                .find(|r| r.implementation == imp && (r.h, r.w, r.c, r.k) == key)
        };
        if let (Some(naive), Some(fused)) = (find(ImplKind::Im2col), find(ImplKind::DwconvFused)) {
            if fused.median_ns >= naive.median_ns {
                problems.push(format!(
                    "cell {key:?}: dwconv_fused {} ns !< im2col {} ns",
                    fused.median_ns, naive.median_ns
                ));
            }
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BenchConfig {
        BenchConfig {
            heights: vec![6],
            widths: vec![6],
            channels: vec![4],
            window_sizes: vec![3],
            heads: 2,
            repeats: 3,
            warmup: 1,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        BenchConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = tiny_config();
        cfg.repeats = 2;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("repeats"), "{msg}");

        let mut cfg = tiny_config();
        cfg.warmup = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("warmup"));

        let mut cfg = tiny_config();
        cfg.window_sizes = vec![4];
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("window_sizes"));

        let mut cfg = tiny_config();
        cfg.widths = vec![6, 7];
        assert!(cfg.validate().unwrap_err().to_string().contains("widths"));

        let mut cfg = tiny_config();
        cfg.channels = vec![5];
        assert!(cfg.validate().unwrap_err().to_string().contains("channels"));
    }

    #[test]
    fn single_cell_run_reports_one_row_per_implementation() {
        let report = run_bench(&tiny_config()).unwrap();
        assert_eq!(report.cells.len(), 3);
        let impls: Vec<ImplKind> = report.cells.iter().map(|c| c.implementation).collect();
        assert_eq!(impls, ImplKind::ALL.to_vec());
        for cell in &report.cells {
            assert!(cell.checksum.is_finite());
            assert!(cell.p10_ns <= cell.median_ns && cell.median_ns <= cell.p90_ns);
        }
    }

    #[test]
    fn k1_checksums_agree_exactly() {
        // Degenerate window: every implementation reduces to value
        // pass-through, bit for bit.
        let mut cfg = tiny_config();
        cfg.window_sizes = vec![1];
        let report = run_bench(&cfg).unwrap();
        let sums: Vec<f64> = report.cells.iter().map(|c| c.checksum).collect();
        assert_eq!(sums[0], sums[1]);
        assert_eq!(sums[1], sums[2]);
    }

    #[test]
    fn checksums_agree_within_f32_tolerance() {
        let report = run_bench(&tiny_config()).unwrap();
        let problems = checksum_disagreements(&report, 1e-3);
        assert!(problems.is_empty(), "{problems:?}");
    }

    #[test]
    fn deterministic_apart_from_wall_clock() {
        let cfg = tiny_config();
        let a = run_bench(&cfg).unwrap();
        let b = run_bench(&cfg).unwrap();
        let strip = |r: &BenchReport| {
            r.cells
                .iter()
                .map(|c| (c.implementation, c.h, c.w, c.c, c.k, c.checksum))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn parallel_scheduling_matches_sequential_checksums() {
        let mut cfg = tiny_config();
        cfg.heights = vec![5, 6];
        cfg.widths = vec![5, 6];
        let sequential = run_bench(&cfg).unwrap();
        cfg.parallel = true;
        let parallel = run_bench(&cfg).unwrap();
        let sums = |r: &BenchReport| {
            r.cells
                .iter()
                .map(|c| (c.implementation, c.h, c.checksum))
                .collect::<Vec<_>>()
        };
        assert_eq!(sums(&sequential), sums(&parallel));
    }

    #[test]
    fn empty_report_renders_header_only_csv() {
        let report = BenchReport {
            config: tiny_config(),
            build_profile: "debug".into(),
            cells: vec![],
        };
        let csv = render_csv(&report);
        assert_eq!(
            csv,
            "impl,H,W,C,k,heads,dtype,median_ns,p10_ns,p90_ns,checksum\n"
        );
    }

    #[test]
    fn one_row_csv_has_two_lines_in_declared_order() {
        let report = BenchReport {
            config: tiny_config(),
            build_profile: "debug".into(),
            cells: vec![CellResult {
                implementation: ImplKind::Shift,
                h: 6,
                w: 6,
                c: 4,
                k: 3,
                median_ns: 1000,
                p10_ns: 900,
                p90_ns: 1100,
                checksum: 1.5,
            }],
        };
        let csv = render_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "shift,6,6,4,3,2,f32,1000,900,1100,1.5");
    }

    #[test]
    fn json_report_round_trips() {
        let report = run_bench(&tiny_config()).unwrap();
        let body = serde_json::to_string_pretty(&report).unwrap();
        let back = parse_json_report(&body).unwrap();
        assert_eq!(back, report);
    }
}
