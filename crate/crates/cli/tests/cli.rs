use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fredft::detection::{Detector, ModelVariant};
use fredft::nn::{ParamKind, ParamStore};
use fredft::{Shape, Tensor};
use fredft_cli::bench::{bench_attention, fit_slope, median};
use fredft_cli::config::{BenchConfig, RunConfig};
use fredft_cli::dump::{encode_pgm, map_to_pgm, normalize, Stage};
use fredft_cli::{weights, CliError};

fn fredft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fredft"))
        .args(args)
        .env("FREDFT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A config small enough to train in about a second.
const TINY: &str = r#"{
  "train": {"epochs": 1, "batch_size": 4, "warmup_steps": 2},
  "data": {"count": 16},
  "eval": {"count": 6}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn small_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.add("a.weight".into(), ParamKind::Weight, Tensor::new(Shape::new(2, 1, 1, 2), vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap());
    s.add("b.bias".into(), ParamKind::Bias, Tensor::new(Shape::new(1, 3, 1, 1), vec![0.1, 0.2, 0.3]).unwrap());
    s
}

#[test]
fn default_config_round_trips_through_json() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
}

#[test]
fn config_fields_agree_with_the_detector_defaults() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.data.size, cfg.detector.image_size);
    assert_eq!(cfg.train.total_steps(cfg.data.count), 2000);
    assert_eq!(cfg.bench.sizes, vec![16, 32, 64, 128]);
}

#[test]
fn unknown_keys_are_rejected_at_any_depth() {
    for text in [
        r#"{"modle": {}}"#,
        r#"{"train": {"lr": 0.1}}"#,
        r#"{"train": {"varifocal": {"beta": 1}}}"#,
        r#"{"bench": {"size": [16]}}"#,
    ] {
        let e = RunConfig::from_json(text).unwrap_err();
        assert!(matches!(e, CliError::Usage(_)), "{text}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn inconsistent_configs_are_usage_errors() {
    for text in [
        r#"{"data": {"size": 32}}"#,
        r#"{"bench": {"repeats": 3}}"#,
        r#"{"train": {"batch_size": 0}}"#,
        r#"{"model": {"channels": 0}}"#,
        "[1, 2",
    ] {
        assert!(matches!(RunConfig::from_json(text), Err(CliError::Usage(_))), "{text}");
    }
}

#[test]
fn weight_round_trip_is_bit_exact() {
    let (_, store) = Detector::new(ModelVariant::FUSED, &Default::default(), &Default::default(), 3).unwrap();
    let bytes = weights::encode(&store);
    let (_, mut other) = Detector::new(ModelVariant::FUSED, &Default::default(), &Default::default(), 4).unwrap();
    weights::load_into(&bytes, &mut other).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    assert_eq!(weights::encode(&other), bytes);
}

#[test]
fn weight_file_layout() {
    let bytes = weights::encode(&small_store());
    assert_eq!(&bytes[..8], b"FREDFT01");
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 8);
    assert_eq!(&bytes[20..28], b"a.weight");
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    assert_eq!(u64::from_le_bytes(tail.try_into().unwrap()), weights::fnv1a64(body));
    // 8 magic + 8 count + 2 names + 2 ranks + 8 dims + 7 values + checksum
    assert_eq!(bytes.len(), 8 + 8 + (4 + 8) + (4 + 6) + 2 * 4 + 8 * 8 + 7 * 8 + 8);
}

#[test]
fn corrupting_any_byte_is_detected() {
    let bytes = weights::encode(&small_store());
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            assert!(weights::decode(&bad).is_err(), "flip {flip:#x} at byte {i} went unnoticed");
        }
    }
}

#[test]
fn truncated_and_padded_files_are_rejected() {
    let bytes = weights::encode(&small_store());
    for n in 0..bytes.len() {
        assert!(weights::decode(&bytes[..n]).is_err(), "prefix of {n} bytes");
    }
    let mut padded = bytes.clone();
    padded.push(0);
    assert!(weights::decode(&padded).is_err());
}

#[test]
fn loading_into_a_different_model_fails_and_leaves_it_untouched() {
    let (_, fused) = Detector::new(ModelVariant::FUSED, &Default::default(), &Default::default(), 0).unwrap();
    let (_, mut rgb) = Detector::new(ModelVariant::RgbOnly, &Default::default(), &Default::default(), 0).unwrap();
    let before = weights::encode(&rgb);
    assert!(matches!(weights::load_into(&weights::encode(&fused), &mut rgb), Err(CliError::Weights(_))));
    let mut shaped = small_store();
    let mut other = ParamStore::new();
    other.add("a.weight".into(), ParamKind::Weight, Tensor::zeros(Shape::new(1, 1, 1, 4)));
    other.add("b.bias".into(), ParamKind::Bias, Tensor::zeros(Shape::new(1, 3, 1, 1)));
    assert!(weights::load_into(&weights::encode(&other), &mut shaped).is_err());
    assert_eq!(weights::encode(&shaped), weights::encode(&small_store()));
    assert_eq!(weights::encode(&rgb), before);
}

#[test]
fn pgm_header_and_payload() {
    let pgm = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 5]);
    assert_eq!(&pgm[..11], b"P5\n3 2\n255\n");
    assert_eq!(pgm.len(), 11 + 6);
    let t = Tensor::new(Shape::new(1, 2, 2, 3), (0..12).map(f64::from).collect()).unwrap();
    let pgm = map_to_pgm(&t, 0);
    let header = b"P5\n3 2\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(&pgm[header.len()..], &[0, 51, 102, 153, 204, 255]);
}

#[test]
fn constant_maps_become_mid_gray() {
    assert_eq!(normalize(&[2.5; 7]), vec![128; 7]);
    let t = Tensor::full(Shape::new(1, 4, 5, 3), -1.25);
    let pgm = map_to_pgm(&t, 0);
    assert!(pgm.ends_with(&[128; 15]));
    assert_eq!(pgm.len(), b"P5\n3 5\n255\n".len() + 15);
}

#[test]
fn normalization_spans_the_full_range() {
    let px = normalize(&[3.0, -1.0, 1.0, 7.0]);
    assert_eq!(px, vec![128, 0, 64, 255]);
}

#[test]
fn stage_names_parse_and_unknown_ones_are_usage_errors() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    let e = "neck".parse::<Stage>().unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn median_and_slope_helpers() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    let xs = [16.0f64, 64.0, 256.0, 1024.0];
    let ln_t: Vec<f64> = xs.iter().map(|x| (0.3 * x.powf(1.7)).ln()).collect();
    let ln_x: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    assert!((fit_slope(&ln_x, &ln_t) - 1.7).abs() < 1e-12);
}

#[test]
fn bench_csv_has_one_row_per_size_and_kernel() {
    let cfg = BenchConfig {
        sizes: vec![4, 6, 8],
        channels: 4,
        repeats: 5,
    };
    let r = bench_attention(&cfg, 0).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.rows.iter().all(|row| row.repeats >= 5 && row.median > 0.0 && row.tokens == row.size * row.size));
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kernel,size,tokens,repeats,median_seconds,slope");
    assert_eq!(lines.len(), 7);
    for size in [4, 6, 8] {
        for k in ["msda", "mfda"] {
            assert_eq!(lines.iter().filter(|l| l.starts_with(&format!("{k},{size},"))).count(), 1);
        }
    }
    assert!(r.slope("msda").unwrap().is_finite() && r.slope("mfda").unwrap().is_finite());
}

#[test]
fn verify_fft_passes_on_a_correct_build() {
    let o = fredft(&["verify", "--suite", "fft"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| !l.starts_with("suite")).all(|l| l.starts_with("PASS ")));
    assert!(text.contains("measured=") && text.contains("tol="));
}

#[test]
fn an_ifft_scale_fault_fails_the_parseval_check() {
    let o = fredft(&["verify", "--suite", "fft", "--inject-fault", "ifft-scale"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL fft/parseval")), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&fredft(&["verify", "--suite", "everything"])), 2);
    assert_eq!(code(&fredft(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"train": {"speed": 1}}"#);
    let w = dir.path().join("w.bin");
    let o = fredft(&["train", "--config", bad.to_str().unwrap(), "--out", w.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = fredft(&["train", "--variant", "rgb_plus", "--out", w.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_weights_exit_with_one() {
    let o = fredft(&["eval", "--weights", "/nonexistent/w.bin"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn default_config_command_prints_parseable_defaults() {
    let o = fredft(&["default-config"]);
    assert_eq!(code(&o), 0);
    assert_eq!(RunConfig::from_json(&stdout(&o)).unwrap(), RunConfig::default());
}

#[test]
fn train_eval_and_dump_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let cfg = cfg.to_str().unwrap();
    let w1 = dir.path().join("a.bin");
    let w2 = dir.path().join("b.bin");
    for w in [&w1, &w2] {
        let o = fredft(&["train", "--config", cfg, "--seed", "5", "--out", w.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(&w2).unwrap(), "training is deterministic given --seed");
    let log = std::fs::read_to_string(dir.path().join("a.log")).unwrap();
    assert_eq!(log.lines().next(), Some("step,lr,l_box,l_cls,l_obj,total"));
    assert_eq!(log.lines().count(), 1 + 4);

    let eval = fredft(&["eval", "--config", cfg, "--seed", "5", "--weights", w1.to_str().unwrap()]);
    assert_eq!(code(&eval), 0);
    let text = stdout(&eval);
    for key in ["variant fused_fredft", "recall ", "mean_iou ", "recall_both ", "recall_rgb_only ", "recall_ir_only "] {
        assert!(text.lines().any(|l| l.starts_with(key)), "missing {key:?} in {text}");
    }
    assert_eq!(text, stdout(&fredft(&["eval", "--config", cfg, "--seed", "5", "--weights", w1.to_str().unwrap()])));

    // an rgb_only model cannot read fused weights
    let o = fredft(&["eval", "--config", cfg, "--variant", "rgb_only", "--weights", w1.to_str().unwrap()]);
    assert_eq!(code(&o), 1);

    let out = dir.path().join("maps");
    let dump = |stage: &str| {
        let o = fredft(&[
            "dump-features", "--config", cfg, "--seed", "5", "--weights", w1.to_str().unwrap(),
            "--stage", stage, "--index", "2", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    for stage in ["backbone", "lfem", "cgmm", "mfda", "fused"] {
        dump(stage);
    }
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut want = vec!["fused_joint_2.pgm".to_string()];
    for s in ["backbone", "lfem", "cgmm", "mfda"] {
        for m in ["rgb", "ir"] {
            want.push(format!("{s}_{m}_2.pgm"));
        }
    }
    want.sort();
    assert_eq!(names, want);
    for n in &names {
        let b = std::fs::read(out.join(n)).unwrap();
        assert!(b.starts_with(b"P5\n8 8\n255\n"), "{n}");
        assert_eq!(b.len(), b"P5\n8 8\n255\n".len() + 64, "{n}");
    }
    let o = fredft(&["dump-features", "--config", cfg, "--weights", w1.to_str().unwrap(), "--stage", "neck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn cgmm_changes_the_maps_it_receives() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let cfg = cfg.to_str().unwrap();
    let w = dir.path().join("w.bin");
    assert_eq!(code(&fredft(&["train", "--config", cfg, "--out", w.to_str().unwrap()])), 0);
    let run = RunConfig::load(Path::new(cfg)).unwrap();
    let (det, store) = fredft_cli::commands::load_model(&run, ModelVariant::FUSED, &w).unwrap();
    let eval = run.eval_data();
    let index = (0..eval.count)
        .find(|&i| {
            fredft::detection::synthetic_sample(&eval, i)
                .visibility
                .iter()
                .any(|v| *v != fredft::detection::Visibility::Both)
        })
        .expect("the mix produces exclusive objects");
    let sample = fredft::detection::synthetic_sample(&eval, index);
    let before = fredft_cli::dump::stage_maps(&det, &store, &sample, Stage::Lfem).unwrap();
    let after = fredft_cli::dump::stage_maps(&det, &store, &sample, Stage::Cgmm).unwrap();
    for ((m, b), (_, a)) in before.iter().zip(&after) {
        let (pb, pa) = (map_to_pgm(b, 0), map_to_pgm(a, 0));
        let differing = pb.iter().zip(&pa).filter(|(x, y)| x != y).count();
        assert!(differing > 0, "{m}: CGMM left the dumped map unchanged");
    }
}

#[test]
fn stages_absent_from_a_variant_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let run = RunConfig::load(&cfg).unwrap();
    let (det, store) = Detector::new(ModelVariant::RgbOnly, &run.detector, &run.model, 0).unwrap();
    let sample = fredft::detection::synthetic_sample(&run.eval_data(), 0);
    let e = fredft_cli::dump::stage_maps(&det, &store, &sample, Stage::Cgmm).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let maps = fredft_cli::dump::stage_maps(&det, &store, &sample, Stage::Backbone).unwrap();
    assert_eq!(maps.iter().map(|(m, _)| *m).collect::<Vec<_>>(), vec!["rgb"]);
}
