//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test -p dlpl-core --test acceptance -- --nocapture` to see
//! the lines as they complete. The directional comparison (criterion 7)
//! trains six models and dominates the runtime.

use std::time::Instant;

use dlpl_core::config::ModelConfig;
use dlpl_core::harness::{build_model, generate_dataset, history_csv, train, TrainOptions};
use dlpl_core::pia::BlockMode;
use dlpl_core::verify;

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "[{}] {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{criterion}: {detail}");
}

/// Gradient suite: every differentiable op at rel. err <= 1e-5 (1e-6 for the
/// exactly-linear ones) and the composed decomposition-to-reconstruction and
/// input-to-fusion paths at 1e-4, seeds 0..3, inputs held off kinks.
#[test]
fn criterion_1_gradient_suite() {
    let t = Instant::now();
    let rep = verify::run_suite("gradients").unwrap();
    for (label, ok) in &rep.checks {
        assert!(ok, "gradient check failed: {label}");
    }
    let dt = t.elapsed().as_secs_f64();
    report(
        "criterion 1 (gradient suite)",
        rep.passed && dt < 120.0,
        &format!("{} checks passed in {dt:.1}s (< 120s)", rep.checks.len()),
    );
}

/// Discretization partition and graph-count normalization over 100 random
/// inputs.
#[test]
fn criterion_2_discretization() {
    let rep = verify::run_suite("discretization").unwrap();
    for (label, ok) in &rep.checks {
        assert!(ok, "discretization check failed: {label}");
    }
    report(
        "criterion 2 (partition and normalization)",
        rep.passed,
        "support-factor-1 partition and count normalization hold on 100 inputs",
    );
}

/// Homography recovery under 1e-6 over 20 random projective draws; identity
/// and one-cell-shift warps exact to 1e-10.
#[test]
fn criterion_3_dlt_oracle() {
    let rep = verify::run_suite("dlt").unwrap();
    for (label, ok) in &rep.checks {
        assert!(ok, "dlt check failed: {label}");
    }
    report(
        "criterion 3 (DLT oracle)",
        rep.passed,
        "20 projective recoveries < 1e-6; identity and shift warps exact",
    );
}

/// Constant-input EMA against the geometric closed form at alpha = 0.9;
/// mixture weights and responsibilities normalized to 1e-12 after every
/// update.
#[test]
fn criterion_4_ema_gmm() {
    let rep = verify::run_suite("ema").unwrap();
    for (label, ok) in &rep.checks {
        assert!(ok, "ema check failed: {label}");
    }
    report(
        "criterion 4 (EMA / mixture)",
        rep.passed,
        "closed form to 1e-10; weight and responsibility sums at 1e-12",
    );
}

/// Gram-loss zero cases under 1e-10 and >= 90% loss reduction in 500 steps
/// on a fixed pair at C = 8, H = W = 8, M = 4.
#[test]
fn criterion_5_reconstruction() {
    let t = Instant::now();
    let rep = verify::run_suite("reconstruction").unwrap();
    for (label, ok) in &rep.checks {
        assert!(ok, "reconstruction check failed: {label}");
    }
    let dt = t.elapsed().as_secs_f64();
    report(
        "criterion 5 (reconstruction)",
        rep.passed && dt < 180.0,
        &format!("zero cases and trainability passed in {dt:.1}s (< 180s)"),
    );
}

/// Schedule fidelity: the mode flips exactly at ceil(0.3 * epochs), the
/// warmup path is bitwise self-attention, and the logged total loss equals
/// task + 0.4 * reconstruction to 1e-12.
#[test]
fn criterion_6_schedule_fidelity() {
    let rep = verify::run_suite("schedule").unwrap();
    for (label, ok) in &rep.checks {
        assert!(ok, "schedule check failed: {label}");
    }
    report(
        "criterion 6 (schedule fidelity)",
        rep.passed,
        "flip epoch, bitwise self path, and loss decomposition hold",
    );
}

/// Directional comparison on the default shifted-view benchmark
/// (train warp 0.1, test warp 0.4): median over seeds {0, 1, 2} of
/// (perspective-model test mIoU - baseline test mIoU) must be positive.
/// The full-scale reference gap reported alongside is 58.67 - 52.03 = 6.64
/// points; desk scale only needs the sign.
#[test]
fn criterion_7_directional_benchmark() {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let mut diffs = Vec::new();
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut c = cfg.clone();
        c.seed = seed;
        let ds = generate_dataset(
            c.n_train,
            c.n_test,
            c.num_classes,
            c.img_size,
            c.warp_train,
            c.warp_test,
            seed,
        )
        .unwrap();

        let mut dlpl = build_model(&c, false).unwrap();
        let dlpl_hist = train(&mut dlpl, &ds, TrainOptions::default()).unwrap();
        let dlpl_miou = dlpl_hist.last().unwrap().test_miou;

        let mut base = build_model(&c, true).unwrap();
        let base_hist = train(&mut base, &ds, TrainOptions::default()).unwrap();
        let base_miou = base_hist.last().unwrap().test_miou;

        diffs.push(dlpl_miou - base_miou);
        lines.push(format!(
            "seed {seed}: dlpl {dlpl_miou:.4} vs baseline {base_miou:.4} (diff {:+.4})",
            dlpl_miou - base_miou
        ));
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = diffs[1];
    let dt = t.elapsed().as_secs_f64();
    for l in &lines {
        println!("  {l}");
    }
    report(
        "criterion 7 (directional benchmark)",
        median > 0.0 && dt < 3.0 * 3600.0,
        &format!(
            "median test-mIoU gain {median:+.4} over seeds {{0,1,2}} in {:.0}s \
             (full-scale reference gap: 6.64 points, not a desk-scale target)",
            dt
        ),
    );
}

/// Parameter accounting: the perspective blocks add fewer than one million
/// parameters over the matched baseline at the default configuration.
#[test]
fn criterion_8_parameter_accounting() {
    let cfg = ModelConfig::default();
    let dlpl = build_model(&cfg, false).unwrap();
    let base = build_model(&cfg, true).unwrap();
    let rd = dlpl.param_report();
    let rb = base.param_report();
    assert_eq!(rd.stem, rb.stem);
    assert_eq!(rd.head, rb.head);
    let added = rd.total - rb.total;
    report(
        "criterion 8 (parameter accounting)",
        added < 1_000_000,
        &format!(
            "dlpl {} vs baseline {} parameters: {added} added (< 1M; the full-scale \
             reference claim is < 3M at backbone scale)",
            rd.total, rb.total
        ),
    );
}

/// Determinism: identical seed and config give a bitwise-identical history
/// CSV in single-threaded mode.
#[test]
fn criterion_9_determinism() {
    let cfg = ModelConfig {
        img_size: 16,
        patch_size: 4,
        embed_dim: 8,
        levels: 2,
        perspective_channels: 8,
        codebook_size: 4,
        heads: 2,
        num_blocks: 2,
        num_classes: 3,
        recon_grid: 2,
        n_train: 8,
        n_test: 4,
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.01,
        seed: 42,
        ..ModelConfig::default()
    };
    let ds = generate_dataset(8, 4, 3, 16, 0.1, 0.4, 42).unwrap();
    let run = || {
        let mut model = build_model(&cfg, false).unwrap();
        let hist = train(&mut model, &ds, TrainOptions::default()).unwrap();
        // the run must cross the warmup flip so both paths are covered
        assert!(hist.iter().any(|r| r.mode == BlockMode::Transformed));
        history_csv(&hist)
    };
    let a = run();
    let b = run();
    report(
        "criterion 9 (determinism)",
        a == b,
        "two identical runs produced byte-identical history CSVs",
    );
}
