//! Determined multichannel audio source separation.
//!
//! Three separation modes share one optimizer: blind separation with a
//! low-rank NMF source model (ILRMA), supervised separation with variances
//! from a source estimator (IDLMA), and a product of both source models whose
//! precision is the weighted sum of the two experts' precisions.
//!
//! ```no_run
//! use posm_core::{dsp, estimators::OracleEstimator, solver, VarianceEstimator};
//! # fn main() -> posm_core::Result<()> {
//! let mix = posm_core::audio_io::read_wav("mix.wav")?;
//! let cfg = dsp::StftConfig::default();
//! let x = dsp::stft(&mix, &cfg)?;
//! let state = solver::separate(&x, &solver::SolverConfig { mode: solver::Mode::Ilrma, ..Default::default() }, &[])?;
//! let sources = dsp::istft(&state.y, &cfg, mix.len())?;
//! # Ok(()) }
//! ```

pub mod audio_io;
pub mod dsp;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod simulate;
pub mod solver;

pub use dsp::{StftConfig, TimeSignal, WindowKind};
pub use error::{Error, Result};
pub use estimators::VarianceEstimator;
pub use model::{
    combine_posm, floor_variance, nmf_variance, DemixingStack, NmfModel, PosmWeights, SourceNmf, SpectroTensor,
    VarianceField, VarianceKind,
};
pub use solver::{separate, Mode, SeparationState, SolverConfig};
