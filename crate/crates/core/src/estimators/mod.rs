//! Source standard-deviation estimators.
//!
//! The solver only needs a map from the magnitude spectrogram of a separated
//! source to an estimate of its standard deviation. Oracle estimators return
//! (optionally corrupted) ground truth, the file-backed estimator replays
//! precomputed variances, and [`ToyEstimator`] is a small trainable network.

mod toy;

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::read_variance_file;
use crate::error::{Error, Result};

pub use toy::{
    train_toy, training_loss, training_loss_grad_sigma, TrainConfig, TrainReport, ToyEstimator,
    TOY_PARAM_MAGIC,
};

pub trait VarianceEstimator: Send + Sync {
    /// Standard-deviation map with the same shape as `magnitude`.
    fn estimate(&self, magnitude: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl<E: VarianceEstimator + ?Sized> VarianceEstimator for Box<E> {
    fn estimate(&self, magnitude: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        (**self).estimate(magnitude)
    }
}

fn check_shape(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("estimator expects {expected:?} input, got {got:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    BandSwap,
    Smear,
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Corruption::None),
            "band_swap" | "band-swap" => Ok(Corruption::BandSwap),
            "smear" => Ok(Corruption::Smear),
            other => Err(Error::InvalidArgument(format!("unknown corruption kind '{other}'"))),
        }
    }
}

/// Returns a stored magnitude spectrogram regardless of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimator {
    ground_truth: Array2<f64>,
    corruption: Corruption,
    corruption_strength: f64,
}

impl OracleEstimator {
    pub fn new(ground_truth: Array2<f64>) -> Result<Self> {
        if ground_truth.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("oracle magnitudes must be finite and nonnegative".into()));
        }
        Ok(OracleEstimator { ground_truth, corruption: Corruption::None, corruption_strength: 0.0 })
    }

    pub fn ground_truth(&self) -> &Array2<f64> {
        &self.ground_truth
    }

    pub fn corruption(&self) -> (Corruption, f64) {
        (self.corruption, self.corruption_strength)
    }
}

impl VarianceEstimator for OracleEstimator {
    fn estimate(&self, magnitude: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_shape(self.ground_truth.dim(), magnitude.dim())?;
        Ok(self.ground_truth.clone())
    }
}

/// Largest triangular smearing half-width, as a fraction of the bin count.
const SMEAR_MAX_FRACTION: f64 = 1.0 / 32.0;

/// Emulates a mismatched estimator by distorting the stored spectrogram.
///
/// `BandSwap` cyclically permutes a `strength` fraction of randomly chosen
/// frequency rows. `Smear` spreads each frame's spectrum with a normalized
/// triangular kernel whose half-width grows with `strength`.
pub fn corrupt_oracle(
    est: &OracleEstimator,
    kind: Corruption,
    strength: f64,
    seed: u64,
) -> Result<OracleEstimator> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("corruption strength {strength} outside [0, 1]")));
    }
    let base = &est.ground_truth;
    let (n_freq, n_frames) = base.dim();
    let ground_truth = match kind {
        Corruption::None => base.clone(),
        Corruption::BandSwap => {
            let count = (strength * n_freq as f64).round() as usize;
            let mut rows: Vec<usize> = (0..n_freq).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            rows.truncate(count);
            let mut out = base.clone();
            if count >= 2 {
                for (k, &dst) in rows.iter().enumerate() {
                    let src = rows[(k + 1) % count];
                    out.row_mut(dst).assign(&base.row(src));
                }
            }
            out
        }
        Corruption::Smear => {
            let half = (strength * SMEAR_MAX_FRACTION * n_freq as f64).round() as isize;
            smear(base, half, n_frames)
        }
    };
    Ok(OracleEstimator { ground_truth, corruption: kind, corruption_strength: strength })
}

fn smear(base: &Array2<f64>, half: isize, n_frames: usize) -> Array2<f64> {
    if half <= 0 {
        return base.clone();
    }
    let n_freq = base.nrows() as isize;
    let mut out = Array2::zeros(base.dim());
    for i in 0..n_freq {
        let lo = (i - half).max(0);
        let hi = (i + half).min(n_freq - 1);
        let weight = |t: isize| (half + 1 - (t - i).abs()) as f64;
        let total: f64 = (lo..=hi).map(weight).sum();
        for t in lo..=hi {
            let w = weight(t) / total;
            for j in 0..n_frames {
                out[[t as usize, j]] += w * base[[i as usize, j]];
            }
        }
    }
    out
}

/// Replays precomputed variances: estimate = sqrt(stored variance).
#[derive(Debug, Clone, PartialEq)]
pub struct FileEstimator {
    sigma: Array2<f64>,
}

impl FileEstimator {
    pub fn from_variance(variance: &Array2<f64>) -> Self {
        FileEstimator { sigma: variance.mapv(f64::sqrt) }
    }

    /// One estimator per source stored in a variance file.
    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<FileEstimator>> {
        Ok(read_variance_file(path)?.iter().map(|f| Self::from_variance(&f.values)).collect())
    }
}

impl VarianceEstimator for FileEstimator {
    fn estimate(&self, magnitude: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_shape(self.sigma.dim(), magnitude.dim())?;
        Ok(self.sigma.clone())
    }
}
