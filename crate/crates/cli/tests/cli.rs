use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posm_cli::manifest::RunManifest;
use posm_core::audio_io::{read_wav, write_variance_file};
use posm_core::dsp::stft;
use posm_core::estimators::ToyEstimator;
use posm_core::eval::parse_trace_csv;
use posm_core::simulate::{load_scene, ImpulseResponseSet};
use posm_core::{StftConfig, VarianceEstimator};

fn posm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posm")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("scene");
    let mut args = vec!["simulate", "--duration", "2", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let res = posm(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    out.join("scene.toml")
}

const FAST: [&str; 4] = ["--window", "512", "--hop", "256"];

#[test]
fn simulate_writes_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), &[]);
    let scene_dir = manifest.parent().unwrap();
    for f in ["observed.wav", "dry_1.wav", "dry_2.wav", "image_1.wav", "image_2.wav", "scene.toml", "run.toml"] {
        assert!(scene_dir.join(f).exists(), "{f}");
    }
    let (_, scene) = load_scene(&manifest).unwrap();
    assert_eq!(scene.n_sources(), 2);
    assert_eq!(scene.observed.channel_count(), 2);
    assert_eq!(scene.observed.len(), 16000);
}

#[test]
fn simulate_without_reverb_is_near_instantaneous() {
    let dir = tempfile::tempdir().unwrap();
    let (_, scene) = load_scene(simulate(dir.path(), &["--t60", "0"])).unwrap();
    let direct = ImpulseResponseSet::direct_path_range();
    for h in scene.irs.taps.iter().flatten() {
        assert!(h.len() <= direct.end);
        let peak = h.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert_eq!(h.iter().filter(|v| v.abs() > 0.5 * peak).count(), 1);
    }
}

#[test]
fn simulate_rejects_underdetermined_setups() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let res = posm(&["simulate", "--sources", "2", "--channels", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn separate_with_variance_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), &[]);
    let (_, scene) = load_scene(&manifest).unwrap();
    let cfg = StftConfig { window_length_samples: 512, hop_samples: 256, ..Default::default() };
    let vars: Vec<_> = scene.references(0).iter().map(|r| stft(r, &cfg).unwrap().power(0)).collect();
    let psm1 = dir.path().join("vars.psm1");
    write_variance_file(&vars, &psm1).unwrap();
    let out = dir.path().join("out");
    let estimator = format!("file:{}", psm1.display());
    let mut args = vec![
        "separate", "--input", "", "--mode", "posm", "--alpha", "0.5", "--estimator", &estimator, "--k", "20",
        "--outer", "2", "--inner", "3", "--eps", "0.1", "--out", out.to_str().unwrap(),
    ];
    let input = manifest.parent().unwrap().join("observed.wav");
    args[2] = input.to_str().unwrap();
    args.extend_from_slice(&FAST);
    let res = posm(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    for k in 1..=2 {
        let s = read_wav(out.join(format!("src_{k}.wav"))).unwrap();
        assert_eq!(s.len(), scene.observed.len());
    }
    let rows = parse_trace_csv(&std::fs::read_to_string(out.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.sdr_improvement.iter().all(|v| v.is_nan())));
    let run = RunManifest::read(&out.join("run.toml")).unwrap();
    assert_eq!(run.config.unwrap().estimator.as_deref(), Some(estimator.as_str()));
}

#[test]
fn ilrma_ignores_estimator_and_runs_hundred_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), &[]);
    let out = dir.path().join("out");
    let mut args = vec![
        "separate", "--scene", manifest.to_str().unwrap(), "--mode", "ilrma", "--estimator", "file:nowhere.psm1",
        "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(&FAST);
    let res = posm(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stderr(&res).contains("ignored"));
    let rows = parse_trace_csv(&std::fs::read_to_string(out.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.sdr_improvement.iter().all(|v| v.is_finite())));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    let out = dir.path().join("out");
    let res = posm(&["separate", "--input", missing.to_str().unwrap(), "--mode", "ilrma", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    assert!(stderr(&res).contains("missing.wav"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), &[]);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let m = manifest.to_str().unwrap();
    for args in [
        vec!["separate", "--scene", m, "--mode", "posm", "--out", out],
        vec!["separate", "--scene", m, "--mode", "bogus", "--out", out],
        vec!["separate", "--scene", m, "--input", m, "--mode", "ilrma", "--out", out],
        vec!["separate", "--scene", m, "--mode", "idlma", "--estimator", "dnn:x", "--out", out],
        vec!["separate", "--scene", m, "--mode", "ilrma", "--alpha", "1.5", "--out", out],
        vec!["train", "--scenes", "0", "--out", out],
        vec!["separate", "--bogus-flag"],
    ] {
        assert_eq!(posm(&args).status.code(), Some(2), "{args:?}");
    }
    let res = Command::new(env!("CARGO_BIN_EXE_posm"))
        .args(["simulate", "--duration", "0.5", "--out", out])
        .env("POSM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), &[]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, format!("mode = \"ilrma\"\nouter = 3\ninner = 2\nwindow = 512\nhop = 256\nscene = \"{}\"\n", manifest.display())).unwrap();
    let out = dir.path().join("out");
    let res = posm(&["separate", "--config", cfg.to_str().unwrap(), "--inner", "4", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let rows = parse_trace_csv(&std::fs::read_to_string(out.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 12);
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.toml")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn separate_is_reproducible_from_its_manifest_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), &[]);
    let scene_dir = manifest.parent().unwrap().to_path_buf();
    let before = file_bytes(&scene_dir);
    let out = dir.path().join("first");
    let estimator = format!("oracle-corrupt:{}:smear:0.5", manifest.display());
    let mut args = vec![
        "separate", "--scene", manifest.to_str().unwrap(), "--mode", "posm", "--alpha", "0.1", "--estimator",
        &estimator, "--outer", "3", "--inner", "3", "--seed", "9", "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(&FAST);
    assert!(posm(&args).status.success());
    assert_eq!(file_bytes(&scene_dir), before);

    let run = RunManifest::read(&out.join("run.toml")).unwrap();
    let second = dir.path().join("second");
    let mut argv = run.argv.clone();
    let n = argv.len();
    argv[n - 1] = second.display().to_string();
    let res = Command::new(env!("CARGO_BIN_EXE_posm")).args(&argv).output().unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(file_bytes(&out), file_bytes(&second));

    let third = dir.path().join("third");
    let res = posm(&["separate", "--config", out.join("run.toml").to_str().unwrap(), "--out", third.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(file_bytes(&out), file_bytes(&third));
}

#[test]
fn bench_row_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let mut args = vec!["bench", "--scenes", "5", "--duration", "1", "--outer", "2", "--inner", "2", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&FAST);
    let res = posm(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let summary = std::fs::read_to_string(out.join("bench_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + (2 + 6) * 5);
    let long = std::fs::read_to_string(out.join("bench_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + (2 + 6) * 5 * 4);
    assert_eq!(long.lines().next().unwrap(), "scene,mode,alpha,iteration,cost,sdr_improvement");

    let run = RunManifest::read(&out.join("run.toml")).unwrap();
    let again = dir.path().join("again");
    let mut argv = run.argv.clone();
    let n = argv.len();
    argv[n - 1] = again.display().to_string();
    assert!(Command::new(env!("CARGO_BIN_EXE_posm")).args(&argv).output().unwrap().status.success());
    assert_eq!(file_bytes(&out), file_bytes(&again));
}

#[test]
fn train_reduces_loss_and_writes_loadable_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let res = posm(&[
        "train", "--scenes", "2", "--duration", "1", "--window", "256", "--hop", "128", "--hidden", "8", "--epochs", "8",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        csv.lines().skip(1).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 9);
    for n in 0..2 {
        assert!(rows[8][n] < rows[0][n], "source {n}: {} -> {}", rows[0][n], rows[8][n]);
    }
    let est = ToyEstimator::load(out.join("est_1.psm2")).unwrap();
    let again = ToyEstimator::load(out.join("est_1.psm2")).unwrap();
    let input = ndarray::Array2::from_shape_fn((129, 5), |(i, j)| (i + j) as f64 * 0.01);
    assert_eq!(est.estimate(input.view()).unwrap(), again.estimate(input.view()).unwrap());

    let scene = simulate(dir.path(), &[]);
    let sep = dir.path().join("sep");
    let spec = format!("mlp:{},{}", out.join("est_1.psm2").display(), out.join("est_2.psm2").display());
    let mut args = vec![
        "separate", "--scene", scene.to_str().unwrap(), "--mode", "idlma", "--estimator", &spec, "--outer", "2",
        "--inner", "2", "--out", sep.to_str().unwrap(), "--window", "256", "--hop", "128",
    ];
    assert!(posm(&args).status.success());
    args[6] = "mlp:only_one.psm2";
    assert_ne!(posm(&args).status.code(), Some(0));
}
