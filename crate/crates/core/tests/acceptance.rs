//! Acceptance checks. Each criterion prints one PASS/FAIL line with the
//! measured values and its pinned tolerance; the process exits non-zero if
//! any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- <substring>`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use lkfs::autoencoder::{
    analytic_gradients, encode, init_model, max_relative_error, numeric_gradients, train,
    AeArchitecture, AeHyperparams,
};
use lkfs::clustering::rand_index;
use lkfs::dataio::{
    generate_redundant, generate_synthetic, minmax_scale, ExpressionMatrix, PreprocessConfig,
};
use lkfs::evaluation::{red_score, Method};
use lkfs::kernel::{
    alignment, feature_kernels, gaussian_kernel, median_bandwidth, target_kernel, BandwidthMode,
    KernelMatrix, KernelSource,
};
use lkfs::mkl::{combined_kernel, greedy_select, solve_pair_weights, MklConfig};
use lkfs::pipeline::{
    emit_outputs, prepare_repetition, run_experiment, run_experiment_on, run_lkfs_once, RunConfig,
};
use lkfs::seed;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, Check); 9] = [
        ("gradient correctness", c1_gradients),
        ("greedy MKL pair oracle", c2_pair_oracle),
        ("monotone alignment", c3_monotone),
        ("metric oracles", c4_metric_oracles),
        ("synthetic recovery", c5_synthetic_recovery),
        ("baseline RED ordering", c6_baseline_ordering),
        ("kernel invariants", c7_kernel_invariants),
        ("determinism", c8_determinism),
        ("grid bookkeeping", c9_grid_bookkeeping),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let label = format!("criterion {} {name}", i + 1);
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {label}: {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn random_matrix(n: usize, m: usize, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.sample(StandardNormal))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Tiny autoencoder, batch of 4, β = 1e-3; every parameter gradient within
/// 1e-4 relative error of central differences (step 1e-5); under 5 s.
fn c1_gradients() -> Outcome {
    let (worst, elapsed) = timed(|| {
        let mut worst: f64 = 0.0;
        for s in 0..5 {
            let mut model = init_model(&AeArchitecture::mirrored(&[6, 4, 2]), s).unwrap();
            let mut rng = seed::rng(100 + s);
            for l in &mut model.layers {
                l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                if let Some(bn) = &mut l.batch_norm {
                    bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
                    bn.shift.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                }
            }
            let batch = Array2::from_shape_fn((4, 6), |_| rng.random_range(0.0..1.0));
            let (_, analytic) = analytic_gradients(&model, batch.view(), 1e-3).unwrap();
            let numeric = numeric_gradients(&model, batch.view(), 1e-3, 1e-5).unwrap();
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        worst
    });
    let secs = elapsed.as_secs_f64();
    Outcome::new(
        worst <= 1e-4 && secs < 5.0,
        format!("max relative error {worst:.2e} (tol 1e-4) over 5 models, {secs:.2}s (limit 5s)"),
    )
}

fn combined_alignment(ka: &KernelMatrix, kb: &KernelMatrix, kz: &KernelMatrix, mu_a: f64, mu_b: f64) -> f64 {
    let entries = ka.entries() * mu_a + kb.entries() * mu_b;
    let combo = KernelMatrix::from_entries(entries, KernelSource::Explicit).unwrap();
    alignment(&combo, kz).unwrap()
}

/// 50 random 8×8 Gaussian-kernel triples; the closed-form pair weights reach
/// the best alignment of a 2000-point log-spaced ratio grid within 1e-6.
fn c2_pair_oracle() -> Outcome {
    let mut rng = seed::rng(2);
    let kernel = |rng: &mut seed::Rng| {
        let m = rng.random_range(1..4);
        let pts = random_matrix(8, m, rng);
        let sigma = median_bandwidth(pts.view()).unwrap() * rng.random_range(0.3..3.0);
        gaussian_kernel(pts.view(), sigma).unwrap()
    };
    let ratios: Vec<f64> = (0..2000).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 1999.0)).collect();
    let (result, elapsed) = timed(|| {
        let mut worst_gap: f64 = 0.0;
        let mut worst_consistency: f64 = 0.0;
        for _ in 0..50 {
            let (ka, kb, kz) = (kernel(&mut rng), kernel(&mut rng), kernel(&mut rng));
            let w = solve_pair_weights(&ka, &kb, &kz).unwrap();
            let mut grid = alignment(&ka, &kz).unwrap().max(alignment(&kb, &kz).unwrap());
            for r in &ratios {
                grid = grid.max(combined_alignment(&ka, &kb, &kz, 1.0, *r));
            }
            worst_gap = worst_gap.max((w.alignment - grid).abs());
            let at_mu = combined_alignment(&ka, &kb, &kz, w.mu_a, w.mu_b);
            worst_consistency = worst_consistency.max((at_mu - w.alignment).abs());
            assert!(w.mu_a >= 0.0 && w.mu_b >= 0.0);
        }
        (worst_gap, worst_consistency)
    });
    let (gap, consistency) = result;
    let secs = elapsed.as_secs_f64();
    Outcome::new(
        gap <= 1e-6 && consistency <= 1e-12 && secs < 10.0,
        format!(
            "max |closed form - grid| {gap:.2e} (tol 1e-6), alignment at returned mu off by {consistency:.1e}, {secs:.2}s (limit 10s)"
        ),
    )
}

fn fixture() -> ExpressionMatrix {
    generate_synthetic(200, 100, 10, 4.0, 1).unwrap().0
}

/// Alignment of Σ μⱼ Kⱼ with K_z, built directly from the weights.
fn alignment_from_mu(mu: &[f64], selected: &[usize], candidates: &[KernelMatrix], kz: &KernelMatrix) -> f64 {
    let n = kz.n();
    let mut acc = Array2::<f64>::zeros((n, n));
    for &j in selected {
        acc.scaled_add(mu[j], candidates[j].entries());
    }
    let num = (&acc * kz.entries()).sum();
    let aa = (&acc * &acc).sum();
    let zz = (kz.entries() * kz.entries()).sum();
    num / (aa * zz).sqrt()
}

/// LKFS trajectory strictly increasing for every seed tried; the final value
/// recomputed from μ matches within 1e-10.
fn c3_monotone() -> Outcome {
    let raw = fixture();
    let config = RunConfig::default();
    let x = prepare_repetition(&raw, &config, 0).unwrap();
    let candidates = feature_kernels(&x, config.bandwidth).unwrap();
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let seeds = [0u64, 1, 7, 42, 1234];
    for &s in &seeds {
        let (sol, latent) = run_lkfs_once(&x, &config, s).unwrap();
        let kz = target_kernel(latent.z_values.view()).unwrap();
        monotone &= sol.alignment_trajectory.windows(2).all(|w| w[1] > w[0]);
        let direct = alignment_from_mu(&sol.mu, &sol.selected, &candidates, &kz);
        let via_kernel = alignment(&combined_kernel(&sol, &candidates).unwrap(), &kz).unwrap();
        worst = worst
            .max((direct - sol.target_alignment).abs())
            .max((via_kernel - sol.target_alignment).abs());
    }
    Outcome::new(
        monotone && worst <= 1e-10,
        format!(
            "{} seeds, strictly increasing: {monotone}, max |recomputed - final| {worst:.1e} (tol 1e-10)",
            seeds.len()
        ),
    )
}

fn brute_rand(pred: &[usize], truth: &[usize]) -> f64 {
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            total += 1;
            if (pred[i] == pred[j]) == (truth[i] == truth[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

fn brute_red(x: ArrayView2<'_, f64>, sel: &[usize]) -> f64 {
    let n = x.nrows() as f64;
    let p = sel.len();
    let mut total = 0.0;
    for &a in sel {
        for &b in sel {
            if a == b {
                continue;
            }
            let (ca, cb) = (x.column(a), x.column(b));
            let (ma, mb) = (ca.sum() / n, cb.sum() / n);
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for i in 0..x.nrows() {
                sab += (ca[i] - ma) * (cb[i] - mb);
                saa += (ca[i] - ma) * (ca[i] - ma);
                sbb += (cb[i] - mb) * (cb[i] - mb);
            }
            total += (sab / (saa * sbb).sqrt()).abs();
        }
    }
    total / (p * (p - 1)) as f64
}

fn sorted_median(points: ArrayView2<'_, f64>) -> f64 {
    let n = points.nrows();
    let mut d = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        (d[m / 2 - 1] + d[m / 2]) / 2.0
    }
}

/// rand_index exact against pair counting on 100 random partitions;
/// red_score within 1e-12 of the O(p²n) oracle; median_bandwidth exact
/// against sorting.
fn c4_metric_oracles() -> Outcome {
    let mut rng = seed::rng(4);
    let mut rand_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let (kp, kt) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        if rand_index(&pred, &truth).unwrap() != brute_rand(&pred, &truth) {
            rand_mismatch += 1;
        }
    }
    let mut red_err: f64 = 0.0;
    for _ in 0..50 {
        let (n, d) = (rng.random_range(5..40), rng.random_range(2..12));
        let v = random_matrix(n, d, &mut rng);
        let x = ExpressionMatrix::from_values(v.clone()).unwrap();
        let p = rng.random_range(2..=d);
        let all: Vec<usize> = (0..d).collect();
        let sel: Vec<usize> = all.choose_multiple(&mut rng, p).copied().collect();
        red_err = red_err.max((red_score(&x, &sel).unwrap() - brute_red(v.view(), &sel)).abs());
    }
    let mut median_mismatch = 0;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(2..30), rng.random_range(1..5));
        let pts = random_matrix(n, m, &mut rng);
        if median_bandwidth(pts.view()).unwrap() != sorted_median(pts.view()) {
            median_mismatch += 1;
        }
    }
    Outcome::new(
        rand_mismatch == 0 && red_err <= 1e-12 && median_mismatch == 0,
        format!(
            "rand_index mismatches {rand_mismatch}/100 (exact), max RED error {red_err:.1e} (tol 1e-12), median mismatches {median_mismatch}/100 (exact)"
        ),
    )
}

fn is_informative(name: &str) -> bool {
    name.strip_prefix('f')
        .and_then(|s| s.parse::<usize>().ok())
        .is_some_and(|j| j < 10)
}

/// Random selections of p features built from correlated pairs: pairs with
/// |ρ| > 0.5 are drawn at random and both members added until p features
/// are collected (or the correlated features run out).
fn correlated_pair_selection(x: &ExpressionMatrix, p: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let d = x.n_features();
    let mut pairs = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            if let Some(r) = lkfs::linalg::pearson(x.column(a), x.column(b)) {
                if r.abs() > 0.5 {
                    pairs.push((a, b));
                }
            }
        }
    }
    let mut selected: Vec<usize> = Vec::new();
    while selected.len() < p && !pairs.is_empty() {
        let i = rng.random_range(0..pairs.len());
        let (a, b) = pairs.swap_remove(i);
        for j in [a, b] {
            if selected.len() < p && !selected.contains(&j) {
                selected.push(j);
            }
        }
    }
    selected
}

/// Fixture n=200, d=100, 10 informative, separation 4; p=10, k=2, 10
/// repetitions. Mean informative count ≥ 8, mean Rand ≥ 0.9, mean LKFS RED ≤
/// mean RED of 10 random correlated-pair selections.
fn c5_synthetic_recovery() -> Outcome {
    let (raw, labels) = generate_synthetic(200, 100, 10, 4.0, 1).unwrap();
    let config = RunConfig {
        methods: vec![Method::Lkfs],
        p_grid: vec![10],
        k_grid: vec![2],
        seed: 5,
        ..Default::default()
    };
    let result = run_experiment_on(&raw, Some(&labels), &config, &|_| {}).unwrap();
    let report = &result.reports[0];
    let counts: Vec<f64> = report
        .records
        .iter()
        .map(|r| r.selected.iter().filter(|n| is_informative(n)).count() as f64)
        .collect();
    let cell = report.cell(10, 2).unwrap();
    let rand_mean = cell.rand_index.as_ref().unwrap().mean;
    let lkfs_red = cell.red.as_ref().unwrap().mean;

    let mut rng = seed::rng(55);
    let mut random_reds = Vec::new();
    for r in 0..config.preprocess.repetitions {
        let x = prepare_repetition(&raw, &config, r).unwrap();
        for _ in 0..10 {
            let sel = correlated_pair_selection(&x, 10, &mut rng);
            random_reds.push(red_score(&x, &sel).unwrap());
        }
    }
    let random_red = mean(&random_reds);
    let informative = mean(&counts);
    Outcome::new(
        informative >= 8.0 && rand_mean >= 0.9 && lkfs_red <= random_red,
        format!(
            "mean informative selected {informative:.1}/10 (need >= 8), mean Rand {rand_mean:.4} (need >= 0.9), mean RED {lkfs_red:.4} vs correlated-pair {random_red:.4} (need <=)"
        ),
    )
}

/// Ten informative signals copied 5 times each plus noise; mean LKFS RED
/// strictly below mean SKM RED over 10 seeds.
fn c6_baseline_ordering() -> Outcome {
    let mut lkfs_red = Vec::new();
    let mut skm_red = Vec::new();
    for s in 0..10u64 {
        let (raw, labels) = generate_redundant(200, 10, 5, 50, 4.0, 0.5, 600 + s).unwrap();
        let config = RunConfig {
            methods: vec![Method::Lkfs, Method::Skm],
            preprocess: PreprocessConfig {
                repetitions: 1,
                ..Default::default()
            },
            p_grid: vec![10],
            k_grid: vec![2],
            seed: s,
            ..Default::default()
        };
        let result = run_experiment_on(&raw, Some(&labels), &config, &|_| {}).unwrap();
        let red = |m: Method| {
            let report = result.reports.iter().find(|r| r.method == m).unwrap();
            report.records[0].red.unwrap()
        };
        lkfs_red.push(red(Method::Lkfs));
        skm_red.push(red(Method::Skm));
    }
    let (l, k) = (mean(&lkfs_red), mean(&skm_red));
    Outcome::new(l < k, format!("mean RED LKFS {l:.4} vs SKM {k:.4} over 10 seeds (need strict <)"))
}

struct KernelAudit {
    count: usize,
    failures: Vec<String>,
    min_eigen: f64,
}

impl KernelAudit {
    fn check(&mut self, what: &str, k: &KernelMatrix) {
        self.count += 1;
        let e = k.entries();
        let n = k.n();
        for i in 0..n {
            if e[[i, i]] != 1.0 {
                self.failures.push(format!("{what}: diagonal {} at {i}", e[[i, i]]));
                return;
            }
            for j in 0..n {
                if e[[i, j]] != e[[j, i]] {
                    self.failures.push(format!("{what}: asymmetric at ({i},{j})"));
                    return;
                }
                if !(e[[i, j]] > 0.0 && e[[i, j]] <= 1.0) {
                    self.failures.push(format!("{what}: entry {} at ({i},{j})", e[[i, j]]));
                    return;
                }
            }
        }
        if n <= 50 {
            let m = nalgebra::DMatrix::from_fn(n, n, |i, j| e[[i, j]]);
            let lo = nalgebra::SymmetricEigen::new(m).eigenvalues.min();
            self.min_eigen = self.min_eigen.min(lo);
            if lo < -1e-8 {
                self.failures.push(format!("{what}: eigenvalue {lo:.2e}"));
            }
        }
    }
}

/// Symmetry and unit diagonal exact, entries in (0, 1], smallest eigenvalue
/// ≥ −1e-8, for every kind of kernel the library builds (n ≤ 50).
fn c7_kernel_invariants() -> Outcome {
    let mut audit = KernelAudit {
        count: 0,
        failures: Vec::new(),
        min_eigen: f64::INFINITY,
    };
    let mut rng = seed::rng(7);
    for t in 0..30 {
        let (n, m) = (rng.random_range(2..=50), rng.random_range(1..6));
        let pts = random_matrix(n, m, &mut rng);
        let sigma = median_bandwidth(pts.view()).unwrap() * rng.random_range(0.2..5.0);
        audit.check(&format!("gaussian #{t}"), &gaussian_kernel(pts.view(), sigma).unwrap());
    }
    let x = minmax_scale(&generate_synthetic(50, 20, 4, 4.0, 9).unwrap().0);
    for mode in [BandwidthMode::PerFeature, BandwidthMode::Global] {
        for (j, k) in feature_kernels(&x, mode).unwrap().iter().enumerate() {
            audit.check(&format!("feature {j} ({mode:?})"), k);
        }
    }
    let hp = AeHyperparams {
        epochs: 20,
        batch_size: 16,
        ..Default::default()
    };
    let model = train(&x, &AeArchitecture::standard(20), &hp).unwrap();
    let kz = target_kernel(encode(&model, &x).unwrap().z_values.view()).unwrap();
    audit.check("latent target", &kz);
    let candidates = feature_kernels(&x, BandwidthMode::PerFeature).unwrap();
    for p in [1, 3, 8] {
        let sol = greedy_select(&candidates, &kz, &MklConfig { p, ..Default::default() }).unwrap();
        audit.check(&format!("combined p={p}"), &combined_kernel(&sol, &candidates).unwrap());
    }
    Outcome::new(
        audit.failures.is_empty(),
        format!(
            "{} kernels checked, smallest eigenvalue {:.2e} (floor -1e-8){}",
            audit.count,
            audit.min_eigen,
            audit
                .failures
                .first()
                .map(|f| format!(", first failure: {f}"))
                .unwrap_or_default()
        ),
    )
}

/// Two full runs from files with the same config and master seed write
/// byte-identical report JSON.
fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (raw, labels) = generate_synthetic(200, 100, 10, 4.0, 8).unwrap();
    let matrix = dir.path().join("matrix.tsv");
    let label_file = dir.path().join("labels.tsv");
    lkfs::dataio::save_matrix(&raw, &matrix).unwrap();
    lkfs::dataio::save_labels(&labels, &label_file).unwrap();
    let config = RunConfig {
        input: Some(matrix),
        labels: Some(label_file),
        preprocess: PreprocessConfig {
            repetitions: 2,
            ..Default::default()
        },
        seed: 77,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let result = run_experiment(&config, &|_| {}).unwrap();
        let loaded = lkfs::dataio::load_labels(config.labels.as_ref().unwrap()).unwrap();
        emit_outputs(&result, Some(&loaded), &out, false, false).unwrap();
        let bytes: Vec<Vec<u8>> = Method::ALL
            .iter()
            .map(|m| std::fs::read(out.join(format!("report_{m}.json"))).unwrap())
            .collect();
        reports.push(bytes);
    }
    let identical = reports[0] == reports[1];
    let sizes: Vec<usize> = reports[0].iter().map(Vec::len).collect();
    Outcome::new(
        identical,
        format!("3 method reports ({sizes:?} bytes) byte-identical across runs: {identical}"),
    )
}

/// reps=10, p ∈ {10..50}, k ∈ {2..5}: exactly 50 selection records and 200
/// clustering records per method.
fn c9_grid_bookkeeping() -> Outcome {
    let (raw, labels) = generate_synthetic(60, 120, 10, 4.0, 9).unwrap();
    let config = RunConfig {
        ae: AeHyperparams {
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        },
        kmeans_restarts: 2,
        ..Default::default()
    };
    let result = run_experiment_on(&raw, Some(&labels), &config, &|_| {}).unwrap();
    let mut ok = result.reports.len() == 3;
    let mut parts = Vec::new();
    for report in &result.reports {
        let selections = report.records.len();
        let clusters = report.cluster_record_count();
        let cells_full = report.aggregates.len() == 20 && report.aggregates.iter().all(|c| c.repetitions == 10);
        ok &= selections == 50 && clusters == 200 && cells_full;
        parts.push(format!("{}: {selections} selections, {clusters} clusterings", report.method));
    }
    Outcome::new(ok, format!("{} (need 50 and 200, 20 cells of 10 reps)", parts.join("; ")))
}

