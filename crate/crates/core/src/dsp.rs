//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Signals are zero-padded by one window length on both sides before framing,
//! so every input sample is covered by the same number of frames. Synthesis
//! reuses the analysis window and divides by the summed squared-window
//! envelope, which reconstructs the input exactly wherever that envelope is
//! nonzero.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SpectroTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
}

impl WindowKind {
    /// Periodic (DFT-even) window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|k| {
                let c = (2.0 * PI * k as f64 / n).cos();
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * c,
                    WindowKind::Hann => 0.5 - 0.5 * c,
                }
            })
            .collect()
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hamming" => Ok(WindowKind::Hamming),
            "hann" | "hanning" => Ok(WindowKind::Hann),
            other => Err(Error::InvalidArgument(format!("unknown window kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length_samples: usize,
    pub hop_samples: usize,
    pub window_kind: WindowKind,
    pub sample_rate_hz: u32,
}

impl Default for StftConfig {
    /// 512 ms Hamming window with a 256 ms hop at 8 kHz.
    fn default() -> Self {
        StftConfig {
            window_length_samples: 4096,
            hop_samples: 2048,
            window_kind: WindowKind::Hamming,
            sample_rate_hz: 8000,
        }
    }
}

impl StftConfig {
    pub fn new(
        window_length_samples: usize,
        hop_samples: usize,
        window_kind: WindowKind,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        let cfg = StftConfig { window_length_samples, hop_samples, window_kind, sample_rate_hz };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length_samples == 0 || self.hop_samples == 0 || self.sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("STFT parameters must be positive".into()));
        }
        if self.window_length_samples % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "window length {} must be even",
                self.window_length_samples
            )));
        }
        if self.hop_samples > self.window_length_samples {
            return Err(Error::InvalidArgument(format!(
                "hop {} exceeds window length {}",
                self.hop_samples, self.window_length_samples
            )));
        }
        Ok(())
    }

    pub fn n_freq(&self) -> usize {
        self.window_length_samples / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        (len + self.window_length_samples) / self.hop_samples + 1
    }
}

/// Multichannel real signal, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    channels: Vec<Vec<f64>>,
    sample_rate_hz: u32,
}

impl TimeSignal {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("signal needs at least one channel".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("all channels must have equal length".into()));
        }
        Ok(TimeSignal { channels, sample_rate_hz })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate_hz)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Single-channel copy of channel `m`.
    pub fn extract(&self, m: usize) -> TimeSignal {
        TimeSignal { channels: vec![self.channels[m].clone()], sample_rate_hz: self.sample_rate_hz }
    }

    pub fn truncated(&self, len: usize) -> TimeSignal {
        TimeSignal {
            channels: self.channels.iter().map(|c| c[..len.min(c.len())].to_vec()).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn peak(&self) -> f64 {
        self.channels.iter().flatten().fold(0.0_f64, |p, &x| p.max(x.abs()))
    }
}

/// Onesided STFT of every channel; output shape is (channels, I, J).
pub fn stft(signal: &TimeSignal, cfg: &StftConfig) -> Result<SpectroTensor> {
    cfg.validate()?;
    let win_len = cfg.window_length_samples;
    let len = signal.len();
    if len < win_len {
        return Err(Error::InputTooShort { len, needed: win_len });
    }
    let window = cfg.window_kind.coefficients(win_len);
    let n_freq = cfg.n_freq();
    let n_frames = cfg.n_frames(len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win_len);

    let per_channel: Vec<Array2<Complex64>> = signal
        .channels()
        .par_iter()
        .map(|samples| {
            let mut out = Array2::zeros((n_freq, n_frames));
            let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
            let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for j in 0..n_frames {
                let start = j * cfg.hop_samples;
                for (k, b) in buf.iter_mut().enumerate() {
                    // position in the padded signal; the original starts at `win_len`
                    let p = start + k;
                    let x = if p >= win_len && p - win_len < len { samples[p - win_len] } else { 0.0 };
                    *b = Complex64::new(x * window[k], 0.0);
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for i in 0..n_freq {
                    out[[i, j]] = buf[i];
                }
            }
            out
        })
        .collect();

    let mut data = Array3::zeros((signal.channel_count(), n_freq, n_frames));
    for (m, ch) in per_channel.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), m).assign(&ch);
    }
    SpectroTensor::new(data)
}

/// Weighted overlap-add inverse of [`stft`], returning `length_samples` samples per slot.
pub fn istft(spec: &SpectroTensor, cfg: &StftConfig, length_samples: usize) -> Result<TimeSignal> {
    cfg.validate()?;
    let win_len = cfg.window_length_samples;
    let n_freq = cfg.n_freq();
    let n_frames = cfg.n_frames(length_samples);
    if spec.n_freq() != n_freq || spec.n_frames() != n_frames {
        return Err(Error::Shape(format!(
            "spectrum is {}x{}, configuration implies {}x{} for {} samples",
            spec.n_freq(),
            spec.n_frames(),
            n_freq,
            n_frames,
            length_samples
        )));
    }
    let window = cfg.window_kind.coefficients(win_len);
    let padded_len = length_samples + 2 * win_len;
    let mut envelope = vec![0.0; padded_len];
    for j in 0..n_frames {
        let start = j * cfg.hop_samples;
        for k in 0..win_len {
            if start + k < padded_len {
                envelope[start + k] += window[k] * window[k];
            }
        }
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(win_len);
    let scale = 1.0 / win_len as f64;

    let channels: Vec<Vec<f64>> = (0..spec.n_slots())
        .into_par_iter()
        .map(|n| {
            let slot = spec.slot(n);
            let mut acc = vec![0.0; padded_len];
            let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
            let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
            for j in 0..n_frames {
                for i in 0..n_freq {
                    buf[i] = slot[[i, j]];
                }
                for i in n_freq..win_len {
                    buf[i] = slot[[win_len - i, j]].conj();
                }
                ifft.process_with_scratch(&mut buf, &mut scratch);
                let start = j * cfg.hop_samples;
                for k in 0..win_len {
                    if start + k < padded_len {
                        acc[start + k] += buf[k].re * scale * window[k];
                    }
                }
            }
            acc[win_len..win_len + length_samples]
                .iter()
                .zip(&envelope[win_len..win_len + length_samples])
                .map(|(&a, &e)| if e > 1e-10 { a / e } else { 0.0 })
                .collect()
        })
        .collect();
    TimeSignal::new(channels, cfg.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> StftConfig {
        StftConfig::new(64, 16, WindowKind::Hamming, 8000).unwrap()
    }

    /// Direct O(N^2) DFT of one windowed frame.
    fn dft_frame(frame: &[f64]) -> Vec<Complex64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(t, &x)| {
                        Complex64::from_polar(x, -2.0 * PI * (k * t) as f64 / n as f64)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn rejects_bad_config() {
        assert!(StftConfig::new(63, 16, WindowKind::Hann, 8000).is_err());
        assert!(StftConfig::new(64, 65, WindowKind::Hann, 8000).is_err());
        assert!(StftConfig::new(64, 0, WindowKind::Hann, 8000).is_err());
    }

    #[test]
    fn too_short_input() {
        let sig = TimeSignal::mono(vec![0.0; 10], 8000).unwrap();
        assert!(matches!(stft(&sig, &small_cfg()), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn zero_signal_gives_zero_spectrum() {
        let sig = TimeSignal::new(vec![vec![0.0; 300]; 2], 8000).unwrap();
        let spec = stft(&sig, &small_cfg()).unwrap();
        assert_eq!(spec.n_slots(), 2);
        assert_eq!(spec.n_freq(), 33);
        assert!(spec.data().iter().all(|z| z.norm() == 0.0));
        let back = istft(&SpectroTensor::zeros(1, 33, spec.n_frames()), &small_cfg(), 300).unwrap();
        assert!(back.channel(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frames_match_direct_dft() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = stft(&TimeSignal::mono(x.clone(), 8000).unwrap(), &cfg).unwrap();
        let w = cfg.window_kind.coefficients(64);
        // frame 5 starts at padded index 80, i.e. original sample 16
        let frame: Vec<f64> = (0..64).map(|k| x[16 + k] * w[k]).collect();
        let oracle = dft_frame(&frame);
        for (i, z) in oracle.iter().enumerate() {
            assert!((spec.slot(0)[[i, 5]] - z).norm() < 1e-10);
        }
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let cfg = small_cfg();
        let bin = 7;
        let x: Vec<f64> = (0..640).map(|t| (2.0 * PI * bin as f64 * t as f64 / 64.0).cos()).collect();
        let spec = stft(&TimeSignal::mono(x, 8000).unwrap(), &cfg).unwrap();
        // interior frames are those fully inside the original signal
        for j in 4..cfg.n_frames(640) - 4 {
            let col: Vec<f64> = (0..33).map(|i| spec.slot(0)[[i, j]].norm()).collect();
            let argmax = col.iter().enumerate().fold(0, |b, (i, &v)| if v > col[b] { i } else { b });
            assert_eq!(argmax, bin, "frame {j}");
            let w: f64 = cfg.window_kind.coefficients(64).iter().sum();
            assert!((col[bin] - w / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn impulse_gives_flat_window_scaled_spectrum() {
        let cfg = small_cfg();
        let mut x = vec![0.0; 128];
        x[0] = 1.0;
        let spec = stft(&TimeSignal::mono(x, 8000).unwrap(), &cfg).unwrap();
        // sample 0 sits at offset 64 - 4*16 = 0 of frame 4
        let w = cfg.window_kind.coefficients(64);
        for i in 0..33 {
            assert!((spec.slot(0)[[i, 4]].norm() - w[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        for kind in [WindowKind::Hamming, WindowKind::Hann] {
            for hop in [8, 16, 32] {
                let cfg = StftConfig::new(64, hop, kind, 8000).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(hop as u64);
                let x: Vec<f64> = (0..517).map(|_| rng.random_range(-1.0..1.0)).collect();
                let sig = TimeSignal::new(vec![x.clone(), x.iter().map(|v| -v).collect()], 8000).unwrap();
                let back = istft(&stft(&sig, &cfg).unwrap(), &cfg, 517).unwrap();
                let err = back
                    .channel(0)
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12, "{kind:?} hop {hop}: {err}");
                let single = istft(&stft(&sig.extract(1), &cfg).unwrap(), &cfg, 517).unwrap();
                assert_eq!(single.channel(0), back.channel(1));
            }
        }
    }

    #[test]
    fn istft_shape_mismatch() {
        let spec = SpectroTensor::zeros(1, 33, 3);
        assert!(matches!(istft(&spec, &small_cfg(), 500), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_roughly_preserved_for_noise() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..20000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = stft(&TimeSignal::mono(x.clone(), 8000).unwrap(), &cfg).unwrap();
        // two-sided energy of each frame is N * sum(|frame|^2)
        let mut spec_energy = 0.0;
        for j in 0..spec.n_frames() {
            for i in 0..33 {
                let e = spec.slot(0)[[i, j]].norm_sqr();
                spec_energy += if i == 0 || i == 32 { e } else { 2.0 * e };
            }
        }
        let w = cfg.window_kind.coefficients(64);
        let w2: f64 = w.iter().map(|v| v * v).sum();
        let expected = x.iter().map(|v| v * v).sum::<f64>() * w2 * 64.0 / cfg.hop_samples as f64;
        assert!((spec_energy / expected - 1.0).abs() < 0.01);
    }
}
