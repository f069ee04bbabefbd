//! Scale-invariant SDR, permutation-resolved scene scoring and trace CSVs.

use std::fmt::Write as _;

use itertools::Itertools;
use rayon::prelude::*;

use crate::dsp::TimeSignal;
use crate::error::{Error, Result};
use crate::simulate::MixtureScene;
use crate::solver::SeparationState;

pub const SDR_CAP_DB: f64 = 100.0;

fn si_sdr_slices(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidArgument("reference signal is all zeros".into()));
    }
    let scale = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let (mut target, mut err) = (0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        let t = scale * r;
        target += t * t;
        err += (e - t) * (e - t);
    }
    if err < 1e-20 * target {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (target / err).log10()).min(SDR_CAP_DB))
}

/// SI-SDR in dB of a mono estimate against a mono reference.
pub fn si_sdr(estimate: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    if estimate.channel_count() != 1 || reference.channel_count() != 1 {
        return Err(Error::Shape("si_sdr expects single-channel signals".into()));
    }
    si_sdr_slices(estimate.channel(0), reference.channel(0))
}

/// Scores indexed by reference source.
#[derive(Debug, Clone, PartialEq)]
pub struct SdrReport {
    pub si_sdr_db: Vec<f64>,
    pub si_sdr_improvement_db: Vec<f64>,
    /// `permutation[k]` is the estimate assigned to reference `k`.
    pub permutation: Vec<usize>,
    /// Samples dropped to equalize lengths.
    pub trimmed: usize,
}

impl SdrReport {
    pub fn mean_improvement(&self) -> f64 {
        self.si_sdr_improvement_db.iter().sum::<f64>() / self.si_sdr_improvement_db.len() as f64
    }
}

/// Scores `separated` against the scene's source images at channel `m_ref`.
pub fn evaluate_scene(scene: &MixtureScene, separated: &[TimeSignal], m_ref: usize) -> Result<SdrReport> {
    let n = scene.n_sources();
    if separated.len() != n {
        return Err(Error::Shape(format!("{} separated signals for {n} sources", separated.len())));
    }
    if n > 8 {
        return Err(Error::InvalidArgument(format!("exhaustive permutation search over {n} sources")));
    }
    if m_ref >= scene.observed.channel_count() {
        return Err(Error::InvalidArgument(format!("reference channel {m_ref} out of range")));
    }
    if separated.iter().any(|s| s.channel_count() != 1) {
        return Err(Error::Shape("separated signals must be mono".into()));
    }
    let refs = scene.references(m_ref);
    let longest = separated.iter().map(TimeSignal::len).chain([scene.observed.len()]).max().unwrap_or(0);
    let len = separated.iter().map(TimeSignal::len).chain([scene.observed.len()]).min().unwrap_or(0);
    let trimmed = longest - len;
    if trimmed > 0 {
        log::warn!("trimming {trimmed} samples to a common length of {len}");
    }
    if len == 0 {
        return Err(Error::Shape("empty signals".into()));
    }
    // sdr[k][e]: estimate e against reference k
    let sdr: Vec<Vec<f64>> = refs
        .par_iter()
        .map(|r| separated.iter().map(|e| si_sdr_slices(&e.channel(0)[..len], &r.channel(0)[..len])).collect())
        .collect::<Result<_>>()?;
    let baseline: Vec<f64> = refs
        .iter()
        .map(|r| si_sdr_slices(&scene.observed.channel(m_ref)[..len], &r.channel(0)[..len]))
        .collect::<Result<_>>()?;
    let permutation = (0..n)
        .permutations(n)
        .map(|p| {
            let total: f64 = p.iter().enumerate().map(|(k, &e)| sdr[k][e]).sum();
            (total, p)
        })
        .fold((f64::NEG_INFINITY, Vec::new()), |best, cand| if cand.0 > best.0 { cand } else { best })
        .1;
    let si_sdr_db: Vec<f64> = permutation.iter().enumerate().map(|(k, &e)| sdr[k][e]).collect();
    let si_sdr_improvement_db = si_sdr_db.iter().zip(&baseline).map(|(s, b)| s - b).collect();
    Ok(SdrReport { si_sdr_db, si_sdr_improvement_db, permutation, trimmed })
}

/// One parsed line of a trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub sdr_improvement: Vec<f64>,
}

/// Per-iteration cost and SDR improvements. Without reports the SDR columns are NaN.
pub fn trace_to_csv(state: &SeparationState, reports: &[SdrReport]) -> Result<String> {
    let trace = &state.cost_trace;
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty cost trace".into()));
    }
    if !reports.is_empty() && reports.len() != trace.len() {
        return Err(Error::Shape(format!("{} reports for {} iterations", reports.len(), trace.len())));
    }
    let n = state.nmf.sources.len();
    let mut out = String::from("iteration,cost");
    for k in 1..=n {
        write!(out, ",sdr_improvement_src{k}").unwrap();
    }
    out.push('\n');
    for (it, cost) in trace.iter().enumerate() {
        write!(out, "{},{}", it + 1, cost).unwrap();
        for k in 0..n {
            let v = reports.get(it).and_then(|r| r.si_sdr_improvement_db.get(k)).copied().unwrap_or(f64::NAN);
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let bad = |reason: String| Error::InvalidArgument(format!("trace csv: {reason}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
    let cols = header.split(',').count();
    if cols < 2 || !header.starts_with("iteration,cost") {
        return Err(bad(format!("unexpected header '{header}'")));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(bad(format!("row '{line}' has {} fields", fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
            Ok(TraceRow {
                iteration: fields[0].parse().map_err(|e| bad(format!("'{}': {e}", fields[0])))?,
                cost: num(fields[1])?,
                sdr_improvement: fields[2..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}
