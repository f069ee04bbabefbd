//! Layered run configuration: built-in defaults, then a `key = value` file,
//! then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use posm_core::{Mode, PosmWeights, SolverConfig, StftConfig, WindowKind};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::UsageError;

pub const DEFAULT_ALPHAS: [f64; 6] = [5e-1, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

/// Every setting that may appear in a config file. Unset keys fall through
/// to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<String>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub outer: Option<usize>,
    pub inner: Option<usize>,
    pub eps: Option<f64>,
    pub ref_channel: Option<usize>,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub hop: Option<usize>,
    pub window_kind: Option<String>,
    pub alphas: Option<Vec<f64>>,
    pub input: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub estimator: Option<String>,
}

macro_rules! overlay_fields {
    ($base:expr, $top:expr, $($f:ident),*) => {
        FileConfig { $($f: $top.$f.or($base.$f),)* }
    };
}

impl FileConfig {
    /// Reads a config file, or the settings recorded in a run manifest.
    pub fn load(path: &Path) -> anyhow::Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| posm_core::Error::io(path, e))?;
        let malformed = |e: toml::de::Error| posm_core::Error::Malformed { path: path.into(), reason: e.message().to_string() };
        let table: toml::Table = toml::from_str(&text).map_err(malformed)?;
        if table.contains_key("command") {
            let manifest: RunManifest = toml::from_str(&text).map_err(malformed)?;
            return Ok(manifest.config.unwrap_or_default());
        }
        Ok(toml::from_str(&text).map_err(malformed)?)
    }

    /// Values set in `top` win.
    pub fn overlay(self, top: FileConfig) -> FileConfig {
        overlay_fields!(
            self, top, mode, alpha, k, outer, inner, eps, ref_channel, seed, window, hop, window_kind, alphas,
            input, scene, estimator
        )
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub stft: StftConfig,
    pub alphas: Vec<f64>,
    pub input: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub estimator: Option<String>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn resolve(cfg: &FileConfig) -> anyhow::Result<RunConfig> {
        let defaults = SolverConfig::default();
        let mode = match &cfg.mode {
            Some(m) => Mode::from_str(m).map_err(|e| usage(e.to_string()))?,
            None => defaults.mode,
        };
        let weights = match cfg.alpha {
            Some(a) => PosmWeights::simplex(a).map_err(|e| usage(format!("--alpha: {e}")))?,
            None => defaults.weights,
        };
        let solver = SolverConfig {
            outer_iters: cfg.outer.unwrap_or(defaults.outer_iters),
            inner_iters: cfg.inner.unwrap_or(defaults.inner_iters),
            n_bases: cfg.k.unwrap_or(defaults.n_bases),
            eps: cfg.eps.unwrap_or(defaults.eps),
            weights,
            reference_channel: cfg.ref_channel.unwrap_or(defaults.reference_channel),
            seed: cfg.seed.unwrap_or(defaults.seed),
            mode,
        };
        solver.validate().map_err(|e| usage(e.to_string()))?;
        let sd = StftConfig::default();
        let window_kind = match &cfg.window_kind {
            Some(w) => WindowKind::from_str(w).map_err(|e| usage(e.to_string()))?,
            None => sd.window_kind,
        };
        let stft = StftConfig {
            window_length_samples: cfg.window.unwrap_or(sd.window_length_samples),
            hop_samples: cfg.hop.unwrap_or(sd.hop_samples),
            window_kind,
            sample_rate_hz: sd.sample_rate_hz,
        };
        stft.validate().map_err(|e| usage(e.to_string()))?;
        let alphas = cfg.alphas.clone().unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
        if alphas.is_empty() {
            return Err(usage("alpha sweep is empty"));
        }
        for &a in &alphas {
            PosmWeights::simplex(a).map_err(|e| usage(format!("alpha sweep: {e}")))?;
        }
        Ok(RunConfig {
            solver,
            stft,
            alphas,
            input: cfg.input.clone(),
            scene: cfg.scene.clone(),
            estimator: cfg.estimator.clone(),
        })
    }

    /// Inverse of [`RunConfig::resolve`] with every key populated.
    pub fn to_file_config(&self) -> FileConfig {
        let s = &self.solver;
        FileConfig {
            mode: Some(s.mode.to_string()),
            alpha: Some(s.weights.alpha),
            k: Some(s.n_bases),
            outer: Some(s.outer_iters),
            inner: Some(s.inner_iters),
            eps: Some(s.eps),
            ref_channel: Some(s.reference_channel),
            seed: Some(s.seed),
            window: Some(self.stft.window_length_samples),
            hop: Some(self.stft.hop_samples),
            window_kind: Some(window_kind_name(self.stft.window_kind).into()),
            alphas: Some(self.alphas.clone()),
            input: self.input.clone(),
            scene: self.scene.clone(),
            estimator: self.estimator.clone(),
        }
    }
}

pub fn window_kind_name(kind: WindowKind) -> &'static str {
    match kind {
        WindowKind::Hamming => "hamming",
        WindowKind::Hann => "hann",
    }
}
