//! `--estimator` specifications.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use posm_core::estimators::{corrupt_oracle, Corruption, FileEstimator, ToyEstimator};
use posm_core::simulate::load_scene;
use posm_core::{StftConfig, VarianceEstimator};

use crate::run::oracle_estimators;
use crate::UsageError;

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    /// Clean source images of a simulated scene.
    Oracle { manifest: PathBuf },
    OracleCorrupt { manifest: PathBuf, kind: Corruption, strength: f64 },
    /// Precomputed variances, one field per source.
    File { path: PathBuf },
    /// One trained network per source, comma separated.
    Mlp { paths: Vec<PathBuf> },
}

impl FromStr for EstimatorSpec {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        let bad = |why: &str| UsageError(format!("estimator '{s}': {why}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected <kind>:<argument>"))?;
        if rest.is_empty() {
            return Err(bad("missing argument"));
        }
        match kind {
            "oracle" => Ok(EstimatorSpec::Oracle { manifest: rest.into() }),
            "oracle-corrupt" => {
                let mut parts = rest.rsplitn(3, ':');
                let (strength, corruption, manifest) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(s), Some(k), Some(m)) if !m.is_empty() => (s, k, m),
                    _ => return Err(bad("expected oracle-corrupt:<manifest>:<kind>:<strength>")),
                };
                let kind = Corruption::from_str(corruption).map_err(|e| bad(&e.to_string()))?;
                let strength: f64 = strength.parse().map_err(|_| bad("strength is not a number"))?;
                if !(0.0..=1.0).contains(&strength) {
                    return Err(bad("strength must lie in [0, 1]"));
                }
                Ok(EstimatorSpec::OracleCorrupt { manifest: manifest.into(), kind, strength })
            }
            "file" => Ok(EstimatorSpec::File { path: rest.into() }),
            "mlp" => Ok(EstimatorSpec::Mlp { paths: rest.split(',').map(PathBuf::from).collect() }),
            _ => Err(bad("unknown kind; use oracle, oracle-corrupt, file or mlp")),
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorSpec::Oracle { manifest } => write!(f, "oracle:{}", manifest.display()),
            EstimatorSpec::OracleCorrupt { manifest, kind, strength } => {
                write!(f, "oracle-corrupt:{}:{}:{strength}", manifest.display(), corruption_name(*kind))
            }
            EstimatorSpec::File { path } => write!(f, "file:{}", path.display()),
            EstimatorSpec::Mlp { paths } => {
                let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                write!(f, "mlp:{}", joined.join(","))
            }
        }
    }
}

pub fn corruption_name(kind: Corruption) -> &'static str {
    match kind {
        Corruption::None => "none",
        Corruption::BandSwap => "band_swap",
        Corruption::Smear => "smear",
    }
}

/// Seed for the corruption of source `n` in a run seeded with `seed`.
pub fn corruption_seed(seed: u64, n: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(n as u64)
}

impl EstimatorSpec {
    /// Builds one estimator per source.
    pub fn build(
        &self,
        stft: &StftConfig,
        m_ref: usize,
        n_sources: usize,
        seed: u64,
    ) -> anyhow::Result<Vec<Box<dyn VarianceEstimator>>> {
        let oracle = |manifest: &Path| -> anyhow::Result<_> {
            let (_, scene) = load_scene(manifest)?;
            Ok(oracle_estimators(&scene, stft, m_ref)?)
        };
        let built: Vec<Box<dyn VarianceEstimator>> = match self {
            EstimatorSpec::Oracle { manifest } => {
                oracle(manifest)?.into_iter().map(|e| Box::new(e) as Box<dyn VarianceEstimator>).collect()
            }
            EstimatorSpec::OracleCorrupt { manifest, kind, strength } => oracle(manifest)?
                .iter()
                .enumerate()
                .map(|(n, e)| {
                    Ok(Box::new(corrupt_oracle(e, *kind, *strength, corruption_seed(seed, n))?)
                        as Box<dyn VarianceEstimator>)
                })
                .collect::<anyhow::Result<_>>()?,
            EstimatorSpec::File { path } => FileEstimator::load_all(path)?
                .into_iter()
                .map(|e| Box::new(e) as Box<dyn VarianceEstimator>)
                .collect(),
            EstimatorSpec::Mlp { paths } => paths
                .iter()
                .map(|p| Ok(Box::new(ToyEstimator::load(p)?) as Box<dyn VarianceEstimator>))
                .collect::<anyhow::Result<_>>()?,
        };
        if built.len() != n_sources {
            return Err(UsageError(format!("estimator '{self}' provides {} sources, need {n_sources}", built.len())).into());
        }
        Ok(built)
    }
}
