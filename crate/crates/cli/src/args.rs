//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "posm", version, about = "Determined multichannel source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separate a mixture WAV or a simulated scene.
    Separate(SeparateArgs),
    /// Compare ILRMA, IDLMA and an alpha sweep of PoSM on seeded scenes.
    Bench(BenchArgs),
    /// Generate a synthetic convolutive scene.
    Simulate(SimulateArgs),
    /// Train one toy estimator per source on simulated scenes.
    Train(TrainArgs),
}

/// Solver and STFT settings shared by `separate` and `bench`.
#[derive(Debug, Clone, Default, Args)]
pub struct SolverArgs {
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ilrma, idlma or posm.
    #[arg(long)]
    pub mode: Option<String>,
    /// NMF weight; the estimator weight is 1 - alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// NMF bases per source.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub outer: Option<usize>,
    #[arg(long)]
    pub inner: Option<usize>,
    /// Floor on estimator variances.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Zero-based reference microphone.
    #[arg(long)]
    pub ref_channel: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// STFT window length in samples.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    /// hamming or hann.
    #[arg(long)]
    pub window_kind: Option<String>,
}

impl SolverArgs {
    pub fn as_file_config(&self) -> FileConfig {
        FileConfig {
            mode: self.mode.clone(),
            alpha: self.alpha,
            k: self.k,
            outer: self.outer,
            inner: self.inner,
            eps: self.eps,
            ref_channel: self.ref_channel,
            seed: self.seed,
            window: self.window,
            hop: self.hop,
            window_kind: self.window_kind.clone(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SeparateArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Multichannel mixture WAV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Scene manifest; its observation is separated and scored.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// oracle:<manifest>, oracle-corrupt:<manifest>:<kind>:<strength>,
    /// file:<path.psm1> or mlp:<a.psm2,b.psm2,...>.
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parameters of generated scenes.
#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 20.0)]
    pub duration: f64,
    /// Reverberation time in milliseconds.
    #[arg(long, default_value_t = 150.0)]
    pub t60: f64,
    /// Azimuth spread of the sources in degrees.
    #[arg(long, default_value_t = 60.0)]
    pub angle_spread: f64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    /// Comma-separated source kinds: tonal, percussive, noise_band, synth_sweep.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Existing scene manifests; replaces generated scenes when given.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Number of generated scenes, seeded from --seed upward.
    #[arg(long, default_value_t = 5)]
    pub scenes: usize,
    /// Comma-separated alpha sweep for PoSM.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Oracle distortion: none, band_swap or smear.
    #[arg(long, default_value = "band_swap")]
    pub corruption: String,
    #[arg(long, default_value_t = 0.5)]
    pub strength: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Training scene manifests; replaces generated scenes when given.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Stabilizer inside the loss ratio.
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub window: usize,
    #[arg(long, default_value_t = 2048)]
    pub hop: usize,
    #[arg(long, default_value = "hamming")]
    pub window_kind: String,
    #[arg(long, default_value_t = 0)]
    pub ref_channel: usize,
    #[arg(long)]
    pub out: PathBuf,
}
