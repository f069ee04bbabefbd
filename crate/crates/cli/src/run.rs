//! Running the solver on a signal or a simulated scene.

use ndarray::Array2;
use posm_core::dsp::{istft, stft};
use posm_core::estimators::OracleEstimator;
use posm_core::eval::{evaluate_scene, SdrReport};
use posm_core::simulate::MixtureScene;
use posm_core::solver::separate_with_observer;
use posm_core::{Result, SeparationState, SolverConfig, StftConfig, TimeSignal, VarianceEstimator};

/// Magnitude spectrograms of every source image at channel `m_ref`.
pub fn oracle_magnitudes(scene: &MixtureScene, stft_cfg: &StftConfig, m_ref: usize) -> Result<Vec<Array2<f64>>> {
    scene.references(m_ref).iter().map(|r| Ok(stft(r, stft_cfg)?.magnitude(0))).collect()
}

pub fn oracle_estimators(scene: &MixtureScene, stft_cfg: &StftConfig, m_ref: usize) -> Result<Vec<OracleEstimator>> {
    oracle_magnitudes(scene, stft_cfg, m_ref)?.into_iter().map(OracleEstimator::new).collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: SeparationState,
    pub separated: Vec<TimeSignal>,
    /// One report per inner iteration; empty without a reference scene.
    pub reports: Vec<SdrReport>,
}

impl RunOutcome {
    pub fn final_report(&self) -> Option<&SdrReport> {
        self.reports.last()
    }
}

fn resynthesize(state: &SeparationState, stft_cfg: &StftConfig, len: usize) -> Result<Vec<TimeSignal>> {
    Ok(istft(&state.y, stft_cfg, len)?.into_channels().into_iter().map(|c| TimeSignal::mono(c, stft_cfg.sample_rate_hz)).collect::<Result<_>>()?)
}

/// Separates `observed`; with a scene, scores the output after every iteration.
pub fn run_separation(
    observed: &TimeSignal,
    solver: &SolverConfig,
    stft_cfg: &StftConfig,
    estimators: &[&dyn VarianceEstimator],
    scene: Option<&MixtureScene>,
) -> Result<RunOutcome> {
    let x = stft(observed, stft_cfg)?;
    let len = observed.len();
    let mut reports = Vec::new();
    let state = separate_with_observer(&x, solver, estimators, |_, state| {
        if let Some(scene) = scene {
            let sep = resynthesize(state, stft_cfg, len)?;
            reports.push(evaluate_scene(scene, &sep, solver.reference_channel)?);
        }
        Ok(())
    })?;
    let separated = resynthesize(&state, stft_cfg, len)?;
    Ok(RunOutcome { state, separated, reports })
}
