//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use posm_core::audio_io::{read_wav, write_wav, WavSpec};
use posm_core::dsp::stft;
use posm_core::estimators::{corrupt_oracle, train_toy, Corruption, ToyEstimator, TrainConfig};
use posm_core::eval::trace_to_csv;
use posm_core::simulate::{load_scene, save_scene, DryKind, MixtureScene, SceneParams};
use posm_core::{Mode, PosmWeights, SolverConfig, StftConfig, TimeSignal, VarianceEstimator, WindowKind};
use rayon::prelude::*;

use crate::args::{BenchArgs, Command, SceneArgs, SeparateArgs, SimulateArgs, TrainArgs};
use crate::config::{window_kind_name, FileConfig, RunConfig};
use crate::estimator::{corruption_name, corruption_seed, EstimatorSpec};
use crate::manifest::{flag, RunManifest};
use crate::run::{oracle_estimators, run_separation, RunOutcome};
use crate::UsageError;

pub fn dispatch(command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Separate(a) => separate(a),
        Command::Bench(a) => bench(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| posm_core::Error::io(dir, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| posm_core::Error::io(path, e))?;
    Ok(())
}

fn write_float_wav(signal: &TimeSignal, path: &Path) -> anyhow::Result<()> {
    let clipped = write_wav(signal, WavSpec::float32(signal), path)?;
    if clipped > 0 {
        log::warn!("{}: {clipped} samples clipped", path.display());
    }
    Ok(())
}

fn layered_config(config: Option<&PathBuf>, flags: FileConfig) -> anyhow::Result<RunConfig> {
    let base = match config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    RunConfig::resolve(&base.overlay(flags))
}

/// Flags reproducing every key set in `cfg`.
fn config_argv(cfg: &FileConfig, argv: &mut Vec<String>) {
    let opt = |argv: &mut Vec<String>, name: &str, v: Option<String>| {
        if let Some(v) = v {
            flag(argv, name, v);
        }
    };
    opt(argv, "mode", cfg.mode.clone());
    opt(argv, "alpha", cfg.alpha.map(|v| v.to_string()));
    opt(argv, "k", cfg.k.map(|v| v.to_string()));
    opt(argv, "outer", cfg.outer.map(|v| v.to_string()));
    opt(argv, "inner", cfg.inner.map(|v| v.to_string()));
    opt(argv, "eps", cfg.eps.map(|v| v.to_string()));
    opt(argv, "ref-channel", cfg.ref_channel.map(|v| v.to_string()));
    opt(argv, "seed", cfg.seed.map(|v| v.to_string()));
    opt(argv, "window", cfg.window.map(|v| v.to_string()));
    opt(argv, "hop", cfg.hop.map(|v| v.to_string()));
    opt(argv, "window-kind", cfg.window_kind.clone());
    opt(argv, "input", cfg.input.as_ref().map(|p| p.display().to_string()));
    opt(argv, "scene", cfg.scene.as_ref().map(|p| p.display().to_string()));
    opt(argv, "estimator", cfg.estimator.clone());
}

fn scene_argv(scene: &SceneArgs, kinds: &[DryKind], argv: &mut Vec<String>) {
    flag(argv, "duration", scene.duration);
    flag(argv, "t60", scene.t60);
    flag(argv, "angle-spread", scene.angle_spread);
    flag(argv, "sample-rate", scene.sample_rate);
    let names: Vec<String> = kinds.iter().map(|k| kind_name(*k).to_string()).collect();
    flag(argv, "kinds", names.join(","));
}

fn kind_name(kind: DryKind) -> &'static str {
    match kind {
        DryKind::Tonal => "tonal",
        DryKind::Percussive => "percussive",
        DryKind::NoiseBand => "noise_band",
        DryKind::SynthSweep => "synth_sweep",
    }
}

fn resolve_kinds(scene: &SceneArgs, sources: usize) -> anyhow::Result<Vec<DryKind>> {
    const CYCLE: [DryKind; 4] = [DryKind::Tonal, DryKind::Percussive, DryKind::NoiseBand, DryKind::SynthSweep];
    match &scene.kinds {
        Some(names) => {
            let kinds = names
                .iter()
                .map(|n| DryKind::from_str(n).map_err(|e| usage(e.to_string())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            if kinds.len() != sources {
                return Err(usage(format!("{} kinds given for {sources} sources", kinds.len())));
            }
            Ok(kinds)
        }
        None => Ok(CYCLE.iter().cycle().take(sources).copied().collect()),
    }
}

fn scene_params(scene: &SceneArgs, kinds: Vec<DryKind>, sources: usize, seed: u64) -> SceneParams {
    SceneParams {
        sources,
        channels: sources,
        sample_rate_hz: scene.sample_rate,
        duration_s: scene.duration,
        t60_ms: scene.t60,
        angle_spread_deg: scene.angle_spread,
        kinds,
        seed,
    }
}

pub fn separate(args: &SeparateArgs) -> anyhow::Result<()> {
    let mut flags = args.solver.as_file_config();
    flags.input = args.input.clone();
    flags.scene = args.scene.clone();
    flags.estimator = args.estimator.clone();
    let mut run = layered_config(args.solver.config.as_ref(), flags)?;
    let (observed, scene) = match (&run.input, &run.scene) {
        (Some(path), None) => (read_wav(path)?, None),
        (None, Some(manifest)) => {
            let (_, scene) = load_scene(manifest)?;
            (scene.observed.clone(), Some(scene))
        }
        _ => return Err(usage("give exactly one of --input and --scene")),
    };
    run.stft.sample_rate_hz = observed.sample_rate_hz();
    let n = observed.channel_count();
    let m_ref = run.solver.reference_channel;
    if m_ref >= n {
        return Err(usage(format!("reference channel {m_ref} out of range for {n} channels")));
    }
    let estimators = if run.solver.uses_estimators() {
        let text = run.estimator.as_deref().ok_or_else(|| usage(format!("{} mode needs --estimator", run.solver.mode)))?;
        let spec: EstimatorSpec = text.parse()?;
        spec.build(&run.stft, m_ref, n, run.solver.seed)?
    } else {
        if run.estimator.is_some() {
            log::warn!("--estimator is ignored in ilrma mode");
        }
        Vec::new()
    };
    let refs: Vec<&dyn VarianceEstimator> = estimators.iter().map(|e| e.as_ref()).collect();
    let outcome = run_separation(&observed, &run.solver, &run.stft, &refs, scene.as_ref())?;

    create_dir(&args.out)?;
    let file_config = run.to_file_config();
    let mut argv = vec!["separate".to_string()];
    config_argv(&FileConfig { alphas: None, ..file_config.clone() }, &mut argv);
    flag(&mut argv, "out", args.out.display());
    let mut manifest = RunManifest::new("separate", argv, Some(file_config));
    for (k, signal) in outcome.separated.iter().enumerate() {
        let name = format!("src_{}.wav", k + 1);
        write_float_wav(signal, &args.out.join(&name))?;
        manifest.outputs.push(name);
    }
    write_text(&args.out.join("trace.csv"), &trace_to_csv(&outcome.state, &outcome.reports)?)?;
    manifest.outputs.push("trace.csv".into());
    manifest.write(&args.out)?;
    if let Some(report) = outcome.final_report() {
        println!("mean SI-SDR improvement: {:.3} dB", report.mean_improvement());
    }
    Ok(())
}

/// Result of one mode on one bench scene.
struct BenchRun {
    mode: Mode,
    alpha: f64,
    outcome: RunOutcome,
}

fn bench_scene(
    scene: &MixtureScene,
    run: &RunConfig,
    stft_cfg: &StftConfig,
    corruption: Corruption,
    strength: f64,
    scene_seed: u64,
) -> anyhow::Result<Vec<BenchRun>> {
    let m_ref = run.solver.reference_channel;
    let clean = oracle_estimators(scene, stft_cfg, m_ref)?;
    let ests = match corruption {
        Corruption::None => clean,
        kind => clean
            .iter()
            .enumerate()
            .map(|(n, e)| corrupt_oracle(e, kind, strength, corruption_seed(scene_seed, n)))
            .collect::<posm_core::Result<_>>()?,
    };
    let refs: Vec<&dyn VarianceEstimator> = ests.iter().map(|e| e as &dyn VarianceEstimator).collect();
    let modes = [(Mode::Ilrma, 1.0), (Mode::Idlma, 0.0)]
        .into_iter()
        .chain(run.alphas.iter().map(|&a| (Mode::Posm, a)));
    modes
        .map(|(mode, alpha)| {
            let cfg = SolverConfig { mode, weights: PosmWeights::simplex(alpha)?, ..run.solver.clone() };
            let outcome = run_separation(&scene.observed, &cfg, stft_cfg, &refs, Some(scene))?;
            Ok(BenchRun { mode, alpha, outcome })
        })
        .collect()
}

pub fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let mut flags = args.solver.as_file_config();
    flags.alphas = args.alphas.clone();
    let run = layered_config(args.solver.config.as_ref(), flags)?;
    let corruption = Corruption::from_str(&args.corruption).map_err(|e| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&args.strength) {
        return Err(usage(format!("--strength must lie in [0, 1], got {}", args.strength)));
    }
    let kinds = resolve_kinds(&args.scene, 2)?;
    let scenes: Vec<(u64, MixtureScene)> = if args.manifests.is_empty() {
        if args.scenes == 0 {
            return Err(usage("--scenes must be positive"));
        }
        (0..args.scenes as u64)
            .into_par_iter()
            .map(|s| {
                let seed = run.solver.seed + s;
                Ok((seed, scene_params(&args.scene, kinds.clone(), 2, seed).generate()?))
            })
            .collect::<anyhow::Result<_>>()?
    } else {
        args.manifests
            .iter()
            .map(|m| {
                let (manifest, scene) = load_scene(m)?;
                Ok((manifest.scene.seed, scene))
            })
            .collect::<anyhow::Result<_>>()?
    };
    let results: Vec<Vec<BenchRun>> = scenes
        .par_iter()
        .map(|(seed, scene)| {
            let stft_cfg = StftConfig { sample_rate_hz: scene.observed.sample_rate_hz(), ..run.stft.clone() };
            bench_scene(scene, &run, &stft_cfg, corruption, args.strength, *seed)
        })
        .collect::<anyhow::Result<_>>()?;

    let mut long = String::from("scene,mode,alpha,iteration,cost,sdr_improvement\n");
    let mut summary = String::from("scene,mode,alpha,final_sdr_improvement,peak_sdr_improvement\n");
    for ((seed, _), runs) in scenes.iter().zip(&results) {
        for r in runs {
            let trace: Vec<f64> = r.outcome.reports.iter().map(|rep| rep.mean_improvement()).collect();
            for (it, (cost, sdr)) in r.outcome.state.cost_trace.iter().zip(&trace).enumerate() {
                writeln!(long, "{seed},{},{},{},{cost},{sdr}", r.mode, r.alpha, it + 1).unwrap();
            }
            let last = trace.last().copied().unwrap_or(f64::NAN);
            let peak = trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(summary, "{seed},{},{},{last},{peak}", r.mode, r.alpha).unwrap();
        }
    }
    create_dir(&args.out)?;
    write_text(&args.out.join("bench_long.csv"), &long)?;
    write_text(&args.out.join("bench_summary.csv"), &summary)?;

    let mut argv = vec!["bench".to_string()];
    let file_config = run.to_file_config();
    config_argv(&FileConfig { alpha: None, mode: None, ..file_config.clone() }, &mut argv);
    let alphas: Vec<String> = run.alphas.iter().map(f64::to_string).collect();
    flag(&mut argv, "alphas", alphas.join(","));
    if args.manifests.is_empty() {
        flag(&mut argv, "scenes", args.scenes);
        scene_argv(&args.scene, &kinds, &mut argv);
    } else {
        for m in &args.manifests {
            flag(&mut argv, "manifest", m.display());
        }
    }
    flag(&mut argv, "corruption", corruption_name(corruption));
    flag(&mut argv, "strength", args.strength);
    flag(&mut argv, "out", args.out.display());
    let mut manifest = RunManifest::new("bench", argv, Some(file_config));
    manifest.outputs = vec!["bench_long.csv".into(), "bench_summary.csv".into()];
    manifest.write(&args.out)?;

    println!("{:<6} {:>8} {:>12}", "mode", "alpha", "mean final");
    for (k, r) in results[0].iter().enumerate() {
        let mean = results
            .iter()
            .map(|runs| runs[k].outcome.final_report().map_or(f64::NAN, |rep| rep.mean_improvement()))
            .sum::<f64>()
            / results.len() as f64;
        println!("{:<6} {:>8} {:>12.3}", r.mode.to_string(), r.alpha, mean);
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    if args.sources != args.channels {
        return Err(usage(format!(
            "only the determined case is supported: --sources ({}) must equal --channels ({})",
            args.sources, args.channels
        )));
    }
    if args.sources == 0 {
        return Err(usage("--sources must be positive"));
    }
    let kinds = resolve_kinds(&args.scene, args.sources)?;
    let params = scene_params(&args.scene, kinds.clone(), args.sources, args.seed);
    let scene = params.generate().map_err(|e| usage(e.to_string()))?;
    let path = save_scene(&scene, &params, &args.out)?;

    let mut argv = vec!["simulate".to_string()];
    scene_argv(&args.scene, &kinds, &mut argv);
    flag(&mut argv, "sources", args.sources);
    flag(&mut argv, "channels", args.channels);
    flag(&mut argv, "seed", args.seed);
    flag(&mut argv, "out", args.out.display());
    let mut manifest = RunManifest::new("simulate", argv, None);
    manifest.outputs = vec![posm_core::simulate::MANIFEST_FILE.into()];
    manifest.write(&args.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let window_kind = WindowKind::from_str(&args.window_kind).map_err(|e| usage(e.to_string()))?;
    let kinds = resolve_kinds(&args.scene, args.sources)?;
    let scenes: Vec<MixtureScene> = if args.manifests.is_empty() {
        (0..args.scenes as u64)
            .into_par_iter()
            .map(|s| scene_params(&args.scene, kinds.clone(), args.sources, args.seed + s).generate())
            .collect::<posm_core::Result<_>>()?
    } else {
        args.manifests.iter().map(|m| Ok(load_scene(m)?.1)).collect::<anyhow::Result<_>>()?
    };
    if scenes.is_empty() {
        return Err(usage("no training scenes"));
    }
    let n_src = scenes[0].n_sources();
    if scenes.iter().any(|s| s.n_sources() != n_src) {
        return Err(usage("training scenes differ in source count"));
    }
    if args.ref_channel >= scenes[0].observed.channel_count() {
        return Err(usage(format!("reference channel {} out of range", args.ref_channel)));
    }
    let stft_cfg = StftConfig::new(args.window, args.hop, window_kind, scenes[0].observed.sample_rate_hz())
        .map_err(|e| usage(e.to_string()))?;
    let m_ref = args.ref_channel;
    let mixtures = scenes
        .iter()
        .map(|s| Ok(stft(&s.observed.extract(m_ref), &stft_cfg)?.magnitude(0)))
        .collect::<posm_core::Result<Vec<_>>>()?;
    let cleans = scenes
        .iter()
        .map(|s| crate::run::oracle_magnitudes(s, &stft_cfg, m_ref))
        .collect::<posm_core::Result<Vec<_>>>()?;

    create_dir(&args.out)?;
    let reports = (0..n_src)
        .into_par_iter()
        .map(|n| {
            let pairs: Vec<_> = mixtures.iter().zip(&cleans).map(|(x, c)| (x.clone(), c[n].clone())).collect();
            let init = ToyEstimator::random(stft_cfg.n_freq(), args.hidden, args.seed + n as u64);
            let cfg = TrainConfig {
                delta: args.delta,
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate,
                seed: args.seed + n as u64,
            };
            train_toy(&init, &pairs, &cfg).with_context(|| format!("training estimator {}", n + 1))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut manifest_outputs = Vec::new();
    for (n, report) in reports.iter().enumerate() {
        let name = format!("est_{}.psm2", n + 1);
        report.estimator.save(args.out.join(&name))?;
        manifest_outputs.push(name);
    }
    let mut csv = String::from("epoch");
    for n in 1..=n_src {
        write!(csv, ",loss_src{n}").unwrap();
    }
    csv.push('\n');
    for epoch in 0..=args.epochs {
        write!(csv, "{epoch}").unwrap();
        for r in &reports {
            write!(csv, ",{}", r.epoch_losses[epoch]).unwrap();
        }
        csv.push('\n');
    }
    write_text(&args.out.join("loss.csv"), &csv)?;
    manifest_outputs.push("loss.csv".into());

    let mut argv = vec!["train".to_string()];
    if args.manifests.is_empty() {
        scene_argv(&args.scene, &kinds, &mut argv);
        flag(&mut argv, "scenes", args.scenes);
        flag(&mut argv, "sources", args.sources);
    } else {
        for m in &args.manifests {
            flag(&mut argv, "manifest", m.display());
        }
    }
    flag(&mut argv, "hidden", args.hidden);
    flag(&mut argv, "epochs", args.epochs);
    flag(&mut argv, "batch-size", args.batch_size);
    flag(&mut argv, "learning-rate", args.learning_rate);
    flag(&mut argv, "delta", args.delta);
    flag(&mut argv, "seed", args.seed);
    flag(&mut argv, "window", args.window);
    flag(&mut argv, "hop", args.hop);
    flag(&mut argv, "window-kind", window_kind_name(window_kind));
    flag(&mut argv, "ref-channel", args.ref_channel);
    flag(&mut argv, "out", args.out.display());
    let mut manifest = RunManifest::new("train", argv, None);
    manifest.outputs = manifest_outputs;
    manifest.write(&args.out)?;
    Ok(())
}
