//! Synthetic dry sources, room impulse responses and convolutive mixtures.
//!
//! The array is a line of cardioid microphones with orientations fanned over
//! +-45 degrees. Each impulse response is a fractionally delayed direct path
//! scaled by the cardioid gain, followed by exponentially decaying noise taps
//! that fall by 60 dB over the requested reverberation time.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{read_wav, write_wav, WavSpec};
use crate::dsp::TimeSignal;
use crate::error::{Error, Result};

const SPEED_OF_SOUND: f64 = 343.0;
const MIC_SPACING_M: f64 = 0.2;
/// Bulk delay of every direct path, in samples.
const BASE_DELAY: usize = 16;
/// Half-length of the windowed-sinc fractional delay kernel.
const SINC_HALF: usize = 8;
const LATE_GAIN: f64 = 0.1;
/// Late reverberation is generated for this multiple of t60.
const TAIL_FACTOR: f64 = 1.5;
const DRY_PEAK: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DryKind {
    Tonal,
    Percussive,
    NoiseBand,
    SynthSweep,
}

impl FromStr for DryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tonal" => Ok(DryKind::Tonal),
            "percussive" => Ok(DryKind::Percussive),
            "noise_band" | "noise-band" => Ok(DryKind::NoiseBand),
            "synth_sweep" | "synth-sweep" => Ok(DryKind::SynthSweep),
            other => Err(Error::InvalidArgument(format!("unknown source kind '{other}'"))),
        }
    }
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let p = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if p > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / p);
    }
    x
}

/// Deterministic synthetic source of `duration_s` seconds, peak-normalized below 1.
pub fn synth_dry(kind: DryKind, duration_s: f64, sample_rate_hz: u32, seed: u64) -> Result<TimeSignal> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration_s}")));
    }
    let fs = sample_rate_hz as f64;
    let len = (duration_s * fs).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match kind {
        DryKind::Tonal => tonal(len, fs, &mut rng),
        DryKind::Percussive => percussive(len, fs, &mut rng),
        DryKind::NoiseBand => noise_band(len, fs, &mut rng),
        DryKind::SynthSweep => synth_sweep(len, fs, &mut rng),
    };
    TimeSignal::mono(normalize_peak(x, DRY_PEAK), sample_rate_hz)
}

/// Notes of decaying harmonics with vibrato.
fn tonal(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const SCALE: [f64; 5] = [0.0, 2.0, 4.0, 7.0, 9.0];
    let mut out = vec![0.0; len];
    let mut start = 0usize;
    while start < len {
        let note_len = (rng.random_range(0.3..0.8) * fs) as usize;
        let octave = rng.random_range(0..2) as f64;
        let step = SCALE[rng.random_range(0..SCALE.len())];
        let f0 = 130.81 * 2f64.powf(octave + step / 12.0);
        let amp = rng.random_range(0.5..1.0);
        let vib_rate = rng.random_range(4.0..6.0);
        let mut phase = 0.0;
        for t in 0..note_len.min(len - start) {
            let time = t as f64 / fs;
            let f = f0 * (1.0 + 0.005 * (2.0 * PI * vib_rate * time).sin());
            phase += 2.0 * PI * f / fs;
            let attack = (time / 0.01).min(1.0);
            let mut s = 0.0;
            for h in 1..=8 {
                let hf = h as f64;
                if f0 * hf >= fs / 2.0 {
                    break;
                }
                s += (hf * phase).sin() / hf * (-time * (1.5 + hf)).exp();
            }
            out[start + t] += amp * attack * s;
        }
        start += note_len;
    }
    out
}

/// Sparse noise bursts with exponential decay.
fn percussive(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let tau = 0.01 * fs;
    let burst_len = (8.0 * tau) as usize;
    let mut onset = (rng.random_range(0.0..0.2) * fs) as usize;
    while onset < len {
        let amp = rng.random_range(0.6..1.0);
        for t in 0..burst_len.min(len - onset) {
            out[onset + t] += amp * rng.random_range(-1.0..1.0) * (-(t as f64) / tau).exp();
        }
        onset += (rng.random_range(0.2..0.6) * fs) as usize;
    }
    out
}

/// White noise through a resonant band-pass, slowly amplitude modulated.
fn noise_band(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fc = rng.random_range(300.0_f64..1500.0).min(0.4 * fs);
    let q = 2.0;
    let w0 = 2.0 * PI * fc / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let lfo = rng.random_range(0.5..2.0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    (0..len)
        .map(|t| {
            let x0 = rng.random_range(-1.0..1.0);
            let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y0 * (0.6 + 0.4 * (2.0 * PI * lfo * t as f64 / fs).sin())
        })
        .collect()
}

/// Band-limited sawtooth whose pitch sweeps exponentially up and down.
fn synth_sweep(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = rng.random_range(1.5..3.0);
    let (lo, hi): (f64, f64) = (60.0, 600.0_f64.min(0.2 * fs));
    let mut phase = 0.0;
    (0..len)
        .map(|t| {
            let time = t as f64 / fs;
            let tri = 1.0 - (2.0 * ((time / period).fract()) - 1.0).abs();
            let f = lo * (hi / lo).powf(tri);
            phase += 2.0 * PI * f / fs;
            (1..=10)
                .take_while(|&h| f * (h as f64) < fs / 2.0)
                .map(|h| (h as f64 * phase).sin() / h as f64)
                .sum::<f64>()
        })
        .collect()
}

/// FIR per (source, channel) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponseSet {
    /// `taps[n][m]` is the response from source n to channel m.
    pub taps: Vec<Vec<Vec<f64>>>,
    pub sample_rate_hz: u32,
}

impl ImpulseResponseSet {
    pub fn n_sources(&self) -> usize {
        self.taps.len()
    }

    pub fn n_channels(&self) -> usize {
        self.taps.first().map_or(0, Vec::len)
    }

    /// Index range holding the direct-path kernel.
    pub fn direct_path_range() -> std::ops::Range<usize> {
        BASE_DELAY - SINC_HALF..BASE_DELAY + SINC_HALF + 4
    }
}

/// Source azimuths (degrees) spread symmetrically about broadside, with jitter.
fn source_angles(n: usize, spread_deg: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let base = if n == 1 { 0.0 } else { -spread_deg / 2.0 + spread_deg * k as f64 / (n - 1) as f64 };
            base + rng.random_range(-3.0..3.0)
        })
        .collect()
}

fn fractional_delay(delay: f64, gain: f64, taps: &mut [f64]) {
    let center = delay.floor() as isize;
    for k in center - SINC_HALF as isize + 1..=center + SINC_HALF as isize {
        let d = k as f64 - delay;
        let sinc = if d.abs() < 1e-12 { 1.0 } else { (PI * d).sin() / (PI * d) };
        let win = 0.5 + 0.5 * (PI * d / (SINC_HALF as f64 + 1.0)).cos();
        taps[k as usize] += gain * sinc * win;
    }
}

pub fn synth_irs(
    channels: usize,
    sources: usize,
    t60_ms: f64,
    angle_spread_deg: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<ImpulseResponseSet> {
    if !(t60_ms >= 0.0 && t60_ms.is_finite()) {
        return Err(Error::InvalidArgument(format!("t60 must be nonnegative, got {t60_ms}")));
    }
    if channels == 0 || sources == 0 {
        return Err(Error::InvalidArgument("need at least one source and one channel".into()));
    }
    let fs = sample_rate_hz as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles = source_angles(sources, angle_spread_deg, &mut rng);
    let t60_samples = t60_ms * 1e-3 * fs;
    let late_start = BASE_DELAY + SINC_HALF + 4;
    let late_len = (TAIL_FACTOR * t60_samples).ceil() as usize;
    let len = late_start + late_len;
    let taps = angles
        .iter()
        .map(|&theta_deg| {
            let theta = theta_deg.to_radians();
            (0..channels)
                .map(|m| {
                    let pos = (m as f64 - (channels - 1) as f64 / 2.0) * MIC_SPACING_M;
                    let orient = if channels == 1 {
                        0.0
                    } else {
                        (-45.0 + 90.0 * m as f64 / (channels - 1) as f64).to_radians()
                    };
                    let gain = 0.5 * (1.0 + (theta - orient).cos());
                    let delay = BASE_DELAY as f64 + pos * theta.sin() / SPEED_OF_SOUND * fs;
                    let mut h = vec![0.0; len];
                    fractional_delay(delay, gain, &mut h);
                    for t in 0..late_len {
                        let env = 10f64.powf(-3.0 * t as f64 / t60_samples);
                        h[late_start + t] += LATE_GAIN * gain * env * rng.random_range(-1.0..1.0);
                    }
                    h
                })
                .collect()
        })
        .collect();
    Ok(ImpulseResponseSet { taps, sample_rate_hz })
}

/// Dry sources, their spatial images and the observed mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScene {
    pub dry: Vec<TimeSignal>,
    pub irs: ImpulseResponseSet,
    pub observed: TimeSignal,
    /// Per-source M-channel images; the observation is their sum.
    pub images: Vec<TimeSignal>,
}

impl MixtureScene {
    pub fn n_sources(&self) -> usize {
        self.dry.len()
    }

    /// Image of every source at channel `m`.
    pub fn references(&self, m: usize) -> Vec<TimeSignal> {
        self.images.iter().map(|img| img.extract(m)).collect()
    }

    /// Copy with every sample rounded to `f32`, as stored on disk.
    pub fn quantized(&self) -> MixtureScene {
        let q = |s: &TimeSignal| {
            TimeSignal::new(
                s.channels().iter().map(|c| c.iter().map(|&v| v as f32 as f64).collect()).collect(),
                s.sample_rate_hz(),
            )
            .expect("same shape")
        };
        MixtureScene {
            dry: self.dry.iter().map(q).collect(),
            irs: ImpulseResponseSet {
                taps: self
                    .irs
                    .taps
                    .iter()
                    .map(|row| row.iter().map(|h| h.iter().map(|&v| v as f32 as f64).collect()).collect())
                    .collect(),
                sample_rate_hz: self.irs.sample_rate_hz,
            },
            observed: q(&self.observed),
            images: self.images.iter().map(q).collect(),
        }
    }
}

fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        for (yt, &xt) in y[k.min(x.len())..].iter_mut().zip(x) {
            *yt += hk * xt;
        }
    }
    y
}

/// Convolves each dry source with its responses; output keeps the dry length.
pub fn mix(dry: Vec<TimeSignal>, irs: ImpulseResponseSet) -> Result<MixtureScene> {
    if dry.is_empty() || dry.len() != irs.n_sources() {
        return Err(Error::Shape(format!("{} dry sources for {} response sets", dry.len(), irs.n_sources())));
    }
    let len = dry[0].len();
    let rate = dry[0].sample_rate_hz();
    if dry.iter().any(|d| d.len() != len || d.channel_count() != 1 || d.sample_rate_hz() != rate) {
        return Err(Error::Shape("dry sources must be mono with equal length and rate".into()));
    }
    let m = irs.n_channels();
    if m == 0 || irs.taps.iter().any(|row| row.len() != m) {
        return Err(Error::Shape("every source needs one response per channel".into()));
    }
    let images: Vec<TimeSignal> = dry
        .par_iter()
        .zip(irs.taps.par_iter())
        .map(|(d, row)| TimeSignal::new(row.iter().map(|h| convolve_truncated(d.channel(0), h)).collect(), rate))
        .collect::<Result<_>>()?;
    let observed = (0..m)
        .map(|c| {
            let mut acc = vec![0.0; len];
            for img in &images {
                acc.iter_mut().zip(img.channel(c)).for_each(|(a, v)| *a += v);
            }
            acc
        })
        .collect();
    Ok(MixtureScene { dry, irs, observed: TimeSignal::new(observed, rate)?, images })
}

/// Generator parameters of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub sources: usize,
    pub channels: usize,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub t60_ms: f64,
    pub angle_spread_deg: f64,
    pub kinds: Vec<DryKind>,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            sources: 2,
            channels: 2,
            sample_rate_hz: 8000,
            duration_s: 20.0,
            t60_ms: 150.0,
            angle_spread_deg: 60.0,
            kinds: vec![DryKind::Tonal, DryKind::Percussive],
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn generate(&self) -> Result<MixtureScene> {
        if self.kinds.len() != self.sources {
            return Err(Error::InvalidArgument(format!(
                "{} source kinds for {} sources",
                self.kinds.len(),
                self.sources
            )));
        }
        let dry = self
            .kinds
            .iter()
            .enumerate()
            .map(|(n, &kind)| synth_dry(kind, self.duration_s, self.sample_rate_hz, self.seed * 1000 + n as u64))
            .collect::<Result<Vec<_>>>()?;
        let irs = synth_irs(
            self.channels,
            self.sources,
            self.t60_ms,
            self.angle_spread_deg,
            self.sample_rate_hz,
            self.seed * 1000 + 999,
        )?;
        mix(dry, irs)
    }
}

/// On-disk description of a scene: generator parameters plus WAV paths
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene: SceneParams,
    pub observed: PathBuf,
    pub dry: Vec<PathBuf>,
    pub images: Vec<PathBuf>,
    pub irs: Vec<PathBuf>,
}

pub const MANIFEST_FILE: &str = "scene.toml";

fn write_f32(signal: &TimeSignal, path: &Path) -> Result<()> {
    let clipped = write_wav(signal, WavSpec::float32(signal), path)?;
    if clipped > 0 {
        log::warn!("{}: {clipped} samples clipped", path.display());
    }
    Ok(())
}

/// Writes the scene's WAV files and manifest into `dir`; returns the manifest path.
pub fn save_scene(scene: &MixtureScene, params: &SceneParams, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = scene.n_sources();
    let manifest = SceneManifest {
        scene: params.clone(),
        observed: "observed.wav".into(),
        dry: (1..=n).map(|k| format!("dry_{k}.wav").into()).collect(),
        images: (1..=n).map(|k| format!("image_{k}.wav").into()).collect(),
        irs: (1..=n).map(|k| format!("ir_{k}.wav").into()).collect(),
    };
    write_f32(&scene.observed, &dir.join(&manifest.observed))?;
    for k in 0..n {
        write_f32(&scene.dry[k], &dir.join(&manifest.dry[k]))?;
        write_f32(&scene.images[k], &dir.join(&manifest.images[k]))?;
        let ir = TimeSignal::new(scene.irs.taps[k].clone(), scene.irs.sample_rate_hz)?;
        write_f32(&ir, &dir.join(&manifest.irs[k]))?;
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Malformed { path: path.into(), reason: e.to_string() })
}

pub fn load_scene(manifest_path: impl AsRef<Path>) -> Result<(SceneManifest, MixtureScene)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let dry = manifest.dry.iter().map(|p| read_wav(dir.join(p))).collect::<Result<Vec<_>>>()?;
    let images = manifest.images.iter().map(|p| read_wav(dir.join(p))).collect::<Result<Vec<_>>>()?;
    let taps = manifest
        .irs
        .iter()
        .map(|p| read_wav(dir.join(p)).map(TimeSignal::into_channels))
        .collect::<Result<Vec<_>>>()?;
    let observed = read_wav(dir.join(&manifest.observed))?;
    let irs = ImpulseResponseSet { taps, sample_rate_hz: observed.sample_rate_hz() };
    if dry.len() != images.len() || dry.len() != irs.n_sources() {
        return Err(Error::Malformed { path: manifest_path.into(), reason: "inconsistent source counts".into() });
    }
    Ok((manifest, MixtureScene { dry, irs, observed, images }))
}
