//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Takes about half an hour on one core.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fredft::detection::{evaluate, generate_synthetic, ModelVariant, Trained};
use fredft::fft::{fft2d, ifft2d, take_real};
use fredft::oracle::circular_conv2d;
use fredft::{Shape, Tensor};
use fredft_cli::bench::bench_attention;
use fredft_cli::commands::{parse_variant, train_variant, LOSS_WINDOW};
use fredft_cli::config::RunConfig;
use fredft_cli::verify::{self, Report, Suite};
use fredft_cli::weights;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn failures(r: &Report) -> String {
    let f: Vec<String> = r.failures().map(|c| c.to_string()).collect();
    if f.is_empty() {
        "none".into()
    } else {
        f.join("; ")
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn suite_criterion(suite: Suite, budget: Duration, required: &[&str]) -> Outcome {
    let (r, took) = timed(|| verify::run(suite));
    let missing: Vec<&&str> = required
        .iter()
        .filter(|n| !r.checks.iter().any(|c| c.name.starts_with(**n)))
        .collect();
    outcome(
        r.passed() && took < budget && missing.is_empty(),
        format!(
            "{} checks, {} failed ({}), missing {missing:?}, {:.1}s of {}s",
            r.checks.len(),
            r.failures().count(),
            failures(&r),
            took.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn fft_correctness() -> Outcome {
    let (r, took) = timed(|| verify::run(Suite::Fft));
    let mut required: Vec<String> = Vec::new();
    for n in [8, 20, 40, 80] {
        required.push(format!("fft/roundtrip/{n}x{n}"));
        required.push(format!("fft/parseval/{n}x{n}"));
    }
    let pinned = r.checks.iter().all(|c| c.tolerance <= 1e-9);
    let naive = r.checks.iter().filter(|c| c.name.starts_with("fft/naive_dft/")).count();
    let missing: Vec<&String> = required.iter().filter(|n| !r.checks.iter().any(|c| &c.name == *n)).collect();
    outcome(
        r.passed() && pinned && missing.is_empty() && naive > 0 && took < Duration::from_secs(30),
        format!(
            "{} checks at tol <= 1e-9 ({pinned}), failed: {}, missing {missing:?}, {:.1}s",
            r.checks.len(),
            failures(&r),
            took.as_secs_f64()
        ),
    )
}

fn convolution_theorem() -> Outcome {
    let (worst, took) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        let sizes = [(1, 1), (2, 3), (4, 4), (5, 7), (8, 8), (9, 6), (12, 20), (16, 16), (20, 13), (20, 20)];
        for (i, &(h, w)) in sizes.iter().cycle().take(30).enumerate() {
            let shape = Shape::new(1, 1 + i % 2, h, w);
            let a = Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng);
            let product = fft2d(&a).mul(&fft2d(&b), false).unwrap();
            let via = take_real(&ifft2d(&product).unwrap(), None).unwrap();
            worst = worst.max(via.max_abs_diff(&circular_conv2d(&a, &b).unwrap()).unwrap());
        }
        worst
    });
    outcome(
        worst < 1e-8 && took < Duration::from_secs(30),
        format!("30 instances up to 20x20, max abs err {worst:.3e} (< 1e-8), {:.1}s", took.as_secs_f64()),
    )
}

fn gradient_suite() -> Outcome {
    suite_criterion(
        Suite::Gradcheck,
        Duration::from_secs(180),
        &["gradcheck/lfem", "gradcheck/cgmm", "gradcheck/mfda", "gradcheck/fdffl", "gradcheck/fdfam"],
    )
}

fn structural_invariants() -> Outcome {
    suite_criterion(
        Suite::Invariants,
        Duration::from_secs(60),
        &[
            "invariants/channel_shuffle",
            "invariants/fdffl_chunk",
            "invariants/identity/lfem",
            "invariants/identity/cgmm",
            "invariants/identity/mfda",
            "invariants/identity/fdffl",
            "invariants/identity/msda",
            "invariants/identity/mlp_ffl",
            "invariants/mfda_imaginary_residue",
            "invariants/softmax",
            "invariants/layer_norm",
        ],
    )
}

fn train(cfg: &RunConfig, variant: &str, seed: u64) -> (Trained, Duration) {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let (t, took) = timed(|| train_variant(&cfg, parse_variant(variant).unwrap(), 0).unwrap());
    (t, took)
}

fn recall(cfg: &RunConfig, t: &Trained) -> f64 {
    let eval = generate_synthetic(&cfg.eval_data()).unwrap();
    evaluate(&t.detector, &t.store, &eval).unwrap().recall
}

fn fusion_benefit(cfg: &RunConfig, fused: &Trained, fused_time: Duration) -> Outcome {
    let steps = fused.log.entries.len();
    let f = recall(cfg, fused);
    let rgb = recall(cfg, &train(cfg, "rgb_only", 0).0);
    let ir = recall(cfg, &train(cfg, "ir_only", 0).0);
    outcome(
        f >= 0.85 && rgb <= 0.75 && ir <= 0.75 && steps <= 2000 && fused_time < Duration::from_secs(15 * 60),
        format!(
            "recall fused {f:.4} (>= 0.85), rgb_only {rgb:.4}, ir_only {ir:.4} (<= 0.75), {steps} steps, fused training {:.0}s",
            fused_time.as_secs_f64()
        ),
    )
}

fn ablation_direction(cfg: &RunConfig, full_seed0: &Trained) -> Outcome {
    let mut ordered = 0;
    let mut lines = Vec::new();
    let mut loss_ok = false;
    for seed in 0..3u64 {
        let base = train(cfg, "baseline_add", seed).0;
        let fdfam = train(cfg, "fdfam", seed).0;
        let full_owned;
        let full = if seed == 0 {
            full_seed0
        } else {
            full_owned = train(cfg, "full", seed).0;
            &full_owned
        };
        let (rb, rf, rfull) = (recall(cfg, &base), recall(cfg, &fdfam), recall(cfg, full));
        if rfull >= rf && rf >= rb {
            ordered += 1;
        }
        let ma = |t: &Trained| t.log.final_average(LOSS_WINDOW).unwrap();
        if seed == 0 {
            loss_ok = ma(full) < ma(&base);
        }
        lines.push(format!(
            "seed {seed}: loss full {:.4} base {:.4}, recall full {rfull:.4} fdfam {rf:.4} base {rb:.4}",
            ma(full),
            ma(&base)
        ));
    }
    outcome(
        loss_ok && ordered >= 2,
        format!("full loss < baseline on seed 0: {loss_ok}; recall ordered in {ordered}/3 seeds; {}", lines.join("; ")),
    )
}

fn complexity(cfg: &RunConfig) -> Outcome {
    let mut bench = cfg.bench.clone();
    bench.sizes = vec![16, 32, 64, 128];
    bench.channels = 32;
    let (r, took) = timed(|| bench_attention(&bench, 0).unwrap());
    let (ms, mf) = (r.slope("msda").unwrap(), r.slope("mfda").unwrap());
    outcome(
        ms - mf >= 0.3 && bench.repeats >= 5 && took < Duration::from_secs(300),
        format!(
            "slope msda {ms:.3}, mfda {mf:.3}, difference {:.3} (>= 0.3), {} repeats, {:.0}s",
            ms - mf,
            bench.repeats,
            took.as_secs_f64()
        ),
    )
}

fn loss_arithmetic() -> Outcome {
    let r = verify::run(Suite::Oracle);
    let wanted = [
        ("oracle/loss_additivity", 0.0),
        ("oracle/one_object_breakdown", 1e-10),
        ("oracle/ciou_identical_is_zero", 1e-10),
        ("oracle/ciou_distinct_is_positive", f64::MIN_POSITIVE),
        ("oracle/ciou_hand_case", 1e-10),
        ("oracle/ciou_random_vs_hand", 1e-10),
        ("oracle/varifocal_monotonicity", 0.0),
    ];
    let mut bad = Vec::new();
    for (name, tol) in wanted {
        match r.checks.iter().find(|c| c.name == name) {
            Some(c) if c.passed() && c.tolerance == tol => {}
            Some(c) => bad.push(c.to_string()),
            None => bad.push(format!("{name} missing")),
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { format!("{} loss checks pass", wanted.len()) } else { bad.join("; ") })
}

fn persistence(fused: &Trained) -> Outcome {
    let bytes = weights::encode(&fused.store);
    let mut copy = fused.store.clone();
    for (id, p) in fused.store.iter() {
        copy.set(id, Tensor::zeros(p.value.shape())).unwrap();
    }
    weights::load_into(&bytes, &mut copy).unwrap();
    let exact = fused.store.iter().zip(copy.iter()).all(|((_, a), (_, b))| {
        a.name == b.name && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_fredft"))
            .args(["verify", "--suite", "all"])
            .env_remove("FREDFT_THREADS")
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    let same = a.stdout == b.stdout && !a.stdout.is_empty();
    outcome(
        exact && same && a.status.success(),
        format!(
            "weights bit-exact: {exact}; two `verify --suite all` runs identical: {same} ({} bytes, exit {:?})",
            a.stdout.len(),
            a.status.code()
        ),
    )
}

fn main() {
    let cfg = RunConfig::default();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("fft_correctness", fft_correctness());
    report("convolution_theorem", convolution_theorem());
    report("gradient_suite", gradient_suite());
    report("structural_invariants", structural_invariants());
    report("loss_arithmetic", loss_arithmetic());
    report("complexity_slope", complexity(&cfg));
    let (fused, fused_time) = train(&cfg, "fused_fredft", 0);
    assert_eq!(parse_variant("full").unwrap(), ModelVariant::FUSED, "full row is the default model");
    report("fusion_benefit", fusion_benefit(&cfg, &fused, fused_time));
    report("ablation_direction", ablation_direction(&cfg, &fused));
    report("persistence_determinism", persistence(&fused));
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} criteria, {} passed, {failed} failed", results.len(), results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
