//! Parameter estimation for ILRMA, IDLMA and product-of-source-models IDLMA.
//!
//! All three share the local Gaussian cost
//!
//! ```text
//! sum_{i,j,n} [ ln r~_ijn + |w_in^H x_ij|^2 / r~_ijn ] - 2 J sum_i ln |det W_i|
//! ```
//!
//! with 1/r~ = alpha / (T V) + beta / r_est. ILRMA is (1, 0), IDLMA is (0, 1).
//! The NMF updates are majorization-minimization steps on this cost and the
//! demixing update is iterative projection, so the cost never increases
//! while the estimator variances are held fixed.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::VarianceEstimator;
use crate::linalg;
use crate::model::{
    combine_values, floor_variance, DemixingStack, NmfModel, PosmWeights, SourceNmf, SpectroTensor,
    VarianceField, VarianceKind,
};

/// Determinants below this magnitude are treated as singular in the cost.
const DET_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ilrma,
    Idlma,
    Posm,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ilrma" => Ok(Mode::Ilrma),
            "idlma" => Ok(Mode::Idlma),
            "posm" => Ok(Mode::Posm),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ilrma => "ilrma",
            Mode::Idlma => "idlma",
            Mode::Posm => "posm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Estimator refreshes (L).
    pub outer_iters: usize,
    /// NMF and demixing updates per refresh (L').
    pub inner_iters: usize,
    pub n_bases: usize,
    /// Floor applied to squared estimator outputs.
    pub eps: f64,
    pub weights: PosmWeights,
    /// Zero-based reference channel for projection back.
    pub reference_channel: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            outer_iters: 10,
            inner_iters: 10,
            n_bases: 20,
            eps: 0.1,
            weights: PosmWeights { alpha: 0.5, beta: 0.5 },
            reference_channel: 0,
            seed: 0,
            mode: Mode::Posm,
        }
    }
}

impl SolverConfig {
    /// Weights actually used: ILRMA and IDLMA pin them to (1, 0) and (0, 1).
    pub fn effective_weights(&self) -> PosmWeights {
        match self.mode {
            Mode::Ilrma => PosmWeights::ILRMA,
            Mode::Idlma => PosmWeights::IDLMA,
            Mode::Posm => self.weights,
        }
    }

    pub fn uses_estimators(&self) -> bool {
        self.mode != Mode::Ilrma
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidArgument("iteration counts must be positive".into()));
        }
        if self.n_bases == 0 {
            return Err(Error::InvalidArgument("number of bases must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        PosmWeights::new(self.weights.alpha, self.weights.beta)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SeparationState {
    /// Separated sources after projection back.
    pub y: SpectroTensor,
    pub w: DemixingStack,
    pub nmf: NmfModel,
    /// Floored estimator variances; empty in ILRMA mode.
    pub r_dnn: Vec<VarianceField>,
    pub r_nmf: Vec<VarianceField>,
    pub r_tilde: Vec<VarianceField>,
    /// Cost after every inner iteration.
    pub cost_trace: Vec<f64>,
}

/// Position of the driver when the observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub outer: usize,
    pub inner: usize,
    /// One-based count of completed inner iterations.
    pub iteration: usize,
}

/// Source variance used by the cost for the current model.
fn source_variance(nmf: &SourceNmf, r_dnn: Option<&Array2<f64>>, weights: PosmWeights) -> Array2<f64> {
    let r_nmf = nmf.variance();
    match r_dnn {
        Some(r_dnn) => combine_values(&r_nmf, r_dnn, weights),
        None => r_nmf,
    }
}

/// Cost of demixed signals `y = W x` under per-source variances.
fn cost_of(y: &SpectroTensor, w: &DemixingStack, variances: &[Array2<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (n, r) in variances.iter().enumerate() {
        let ys = y.slot(n);
        Zip::from(&ys).and(r).for_each(|z, &r| {
            total += r.ln() + z.norm_sqr() / r;
        });
    }
    let n_frames = y.n_frames() as f64;
    for i in 0..w.n_freq() {
        let d = linalg::det(w.bin(i)).norm();
        if !(d >= DET_FLOOR) {
            return Err(Error::DegenerateDemixing { bin: i });
        }
        total -= 2.0 * n_frames * d.ln();
    }
    Ok(total)
}

/// Cost for explicit demixing matrices and source variances.
pub fn cost_with_variances(x: &SpectroTensor, w: &DemixingStack, variances: &[Array2<f64>]) -> Result<f64> {
    if variances.len() != w.n_sources() {
        return Err(Error::Shape(format!("{} variance maps for {} sources", variances.len(), w.n_sources())));
    }
    for r in variances {
        if r.dim() != (x.n_freq(), x.n_frames()) {
            return Err(Error::Shape(format!("variance map {:?} does not match observation", r.dim())));
        }
    }
    cost_of(&w.demix(x)?, w, variances)
}

/// Cost of `state` for observation `x`, with the variances rebuilt from the
/// NMF factors and estimator variances under `cfg`'s effective weights.
pub fn compute_cost(state: &SeparationState, x: &SpectroTensor, cfg: &SolverConfig) -> Result<f64> {
    let weights = cfg.effective_weights();
    let variances: Vec<Array2<f64>> = state
        .nmf
        .sources
        .iter()
        .enumerate()
        .map(|(n, nmf)| {
            let r_dnn = if cfg.uses_estimators() { state.r_dnn.get(n).map(|f| &f.values) } else { None };
            source_variance(nmf, r_dnn, weights)
        })
        .collect();
    cost_with_variances(x, &state.w, &variances)
}

fn check_power(nmf: &SourceNmf, power: &ArrayView2<'_, f64>) -> Result<()> {
    if power.dim() != (nmf.basis.nrows(), nmf.activation.ncols()) {
        return Err(Error::Shape(format!(
            "power spectrogram {:?} does not match NMF model {}x{}",
            power.dim(),
            nmf.basis.nrows(),
            nmf.activation.ncols()
        )));
    }
    Ok(())
}

/// Scales `factor` by sqrt(num / den) entrywise and floors it.
fn multiplicative_step(factor: &mut Array2<f64>, num: &Array2<f64>, den: &Array2<f64>) {
    Zip::from(factor).and(num).and(den).for_each(|f, &a, &b| {
        *f = (*f * (a / b).sqrt()).max(crate::model::NMF_FLOOR);
    });
}

/// One ILRMA sweep: bases first, then activations against the refreshed model.
pub fn update_nmf_ilrma(nmf: &mut SourceNmf, power: ArrayView2<'_, f64>) -> Result<()> {
    check_power(nmf, &power)?;
    for step in [Factor::Basis, Factor::Activation] {
        let r = nmf.variance();
        let p = Zip::from(&power).and(&r).map_collect(|&y, &r| y / (r * r));
        let q = r.mapv(|r| 1.0 / r);
        step.apply(nmf, &p, &q);
    }
    Ok(())
}

/// One sweep of the product-of-source-models NMF updates.
///
/// The bracket is sum (v / (TV)^2) |y|^2 over sum (v / (TV)^2) r~, with r~
/// recomputed from the current factors before each half-step.
pub fn update_nmf_posm(
    nmf: &mut SourceNmf,
    power: ArrayView2<'_, f64>,
    r_dnn: ArrayView2<'_, f64>,
    weights: PosmWeights,
) -> Result<()> {
    check_power(nmf, &power)?;
    if r_dnn.dim() != power.dim() {
        return Err(Error::Shape("estimator variance does not match power spectrogram".into()));
    }
    let weights = PosmWeights::new(weights.alpha, weights.beta)?;
    let r_dnn = r_dnn.to_owned();
    for step in [Factor::Basis, Factor::Activation] {
        let r = nmf.variance();
        let p = Zip::from(&power).and(&r).map_collect(|&y, &r| y / (r * r));
        let q = if weights.beta == 0.0 {
            // r~ = r / alpha, so r~ / r^2 = 1 / (alpha r)
            r.mapv(|r| 1.0 / (weights.alpha * r))
        } else {
            let r_tilde = combine_values(&r, &r_dnn, weights);
            Zip::from(&r_tilde).and(&r).map_collect(|&rt, &r| rt / (r * r))
        };
        step.apply(nmf, &p, &q);
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Factor {
    Basis,
    Activation,
}

impl Factor {
    fn apply(self, nmf: &mut SourceNmf, p: &Array2<f64>, q: &Array2<f64>) {
        match self {
            Factor::Basis => {
                let num = p.dot(&nmf.activation.t());
                let den = q.dot(&nmf.activation.t());
                multiplicative_step(&mut nmf.basis, &num, &den);
            }
            Factor::Activation => {
                let num = nmf.basis.t().dot(p);
                let den = nmf.basis.t().dot(q);
                multiplicative_step(&mut nmf.activation, &num, &den);
            }
        }
    }
}

/// Iterative-projection update of every demixing row, sources in order within each bin.
pub fn ip_update(w: &mut DemixingStack, x: &SpectroTensor, r_tilde: &[Array2<f64>]) -> Result<()> {
    let (m, n_freq, n_frames) = x.data().dim();
    if w.n_freq() != n_freq || w.n_sources() != m {
        return Err(Error::Shape("demixing stack does not match observation".into()));
    }
    if r_tilde.len() != m || r_tilde.iter().any(|r| r.dim() != (n_freq, n_frames)) {
        return Err(Error::Shape("variance maps do not match observation".into()));
    }
    let xd = x.data();
    let updated: Vec<Result<Array2<Complex64>>> = (0..n_freq)
        .into_par_iter()
        .map(|i| {
            let mut wi = w.bin(i).to_owned();
            for n in 0..m {
                let mut u = Array2::<Complex64>::zeros((m, m));
                for j in 0..n_frames {
                    let inv = 1.0 / r_tilde[n][[i, j]];
                    for a in 0..m {
                        let xa = xd[[a, i, j]] * inv;
                        for b in 0..m {
                            u[[a, b]] += xa * xd[[b, i, j]].conj();
                        }
                    }
                }
                u.mapv_inplace(|z| z / n_frames as f64);
                let e = linalg::unit(m, n);
                let mut step = ip_row(&wi, &u, &e);
                if step.is_none() {
                    let trace: f64 = (0..m).map(|k| u[[k, k]].re).sum();
                    let delta = 1e-12 * trace / m as f64;
                    for k in 0..m {
                        u[[k, k]] += delta;
                    }
                    step = ip_row(&wi, &u, &e);
                }
                let (mut wn, quad) = step.ok_or(Error::Singular { op: "ip_update", bin: i })?;
                wn.mapv_inplace(|z| z / quad.sqrt());
                for c in 0..m {
                    wi[[n, c]] = wn[c].conj();
                }
            }
            Ok(wi)
        })
        .collect();
    for (i, wi) in updated.into_iter().enumerate() {
        w.as_array_mut().index_axis_mut(Axis(0), i).assign(&wi?);
    }
    Ok(())
}

/// Solves (W U) w = e and returns w with w^H U w, or `None` when the system
/// is singular or the quadratic form is lost in rounding.
fn ip_row(wi: &Array2<Complex64>, u: &Array2<Complex64>, e: &Array1<Complex64>) -> Option<(Array1<Complex64>, f64)> {
    let w = linalg::solve(linalg::matmul(wi.view(), u.view()).view(), e)?;
    let quad = quadratic_form(&w, u);
    let u_norm = u.iter().fold(0.0_f64, |a, z| a.max(z.norm()));
    let w_norm: f64 = w.iter().map(|z| z.norm_sqr()).sum();
    let roundoff = 64.0 * f64::EPSILON * u_norm * w_norm * u.nrows() as f64;
    (quad > roundoff && quad.is_finite()).then_some((w, quad))
}

/// Real part of w^H U w.
pub fn quadratic_form(w: &Array1<Complex64>, u: &Array2<Complex64>) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for a in 0..w.len() {
        for b in 0..w.len() {
            acc += w[a].conj() * u[[a, b]] * w[b];
        }
    }
    acc.re
}

/// Weighted covariance U_in = (1/J) sum_j x_ij x_ij^H / r_ij.
pub fn weighted_covariance(x: &SpectroTensor, i: usize, r: ArrayView2<'_, f64>) -> Array2<Complex64> {
    let m = x.n_slots();
    let n_frames = x.n_frames();
    let mut u = Array2::<Complex64>::zeros((m, m));
    for j in 0..n_frames {
        for a in 0..m {
            for b in 0..m {
                u[[a, b]] += x.data()[[a, i, j]] * x.data()[[b, i, j]].conj() / r[[i, j]];
            }
        }
    }
    u.mapv(|z| z / n_frames as f64)
}

/// Projection-back scales d_i = (W_i^T)^{-1} e_ref for every bin.
pub fn projection_back_scales(w: &DemixingStack, m_ref: usize) -> Result<Array2<Complex64>> {
    let n = w.n_sources();
    if m_ref >= n {
        return Err(Error::InvalidArgument(format!("reference channel {m_ref} out of range for {n} channels")));
    }
    let e = linalg::unit(n, m_ref);
    let mut d = Array2::zeros((w.n_freq(), n));
    for i in 0..w.n_freq() {
        let wt = w.bin(i).t().to_owned();
        let load_ref = (0..n).map(|k| wt[[k, k]].norm()).sum::<f64>() / n as f64;
        let load_ref = if load_ref > 0.0 { load_ref } else { wt.iter().fold(0.0_f64, |a, z| a.max(z.norm())) };
        let di = linalg::solve_loaded(wt.view(), &e, load_ref)
            .ok_or(Error::Singular { op: "projection_back", bin: i })?;
        d.row_mut(i).assign(&di);
    }
    Ok(d)
}

/// Rescales separated signals so that they sum to the reference channel.
pub fn projection_back(y: &SpectroTensor, w: &DemixingStack, m_ref: usize) -> Result<SpectroTensor> {
    if y.n_slots() != w.n_sources() || y.n_freq() != w.n_freq() {
        return Err(Error::Shape("separated signals do not match demixing stack".into()));
    }
    let d = projection_back_scales(w, m_ref)?;
    let mut out = y.clone();
    for n in 0..y.n_slots() {
        for i in 0..y.n_freq() {
            let s = d[[i, n]];
            out.slot_mut(n).row_mut(i).mapv_inplace(|z| z * s);
        }
    }
    Ok(out)
}

/// Runs the full iterative algorithm.
pub fn separate(
    x: &SpectroTensor,
    cfg: &SolverConfig,
    estimators: &[&dyn VarianceEstimator],
) -> Result<SeparationState> {
    separate_with_observer(x, cfg, estimators, |_, _| Ok(()))
}

/// [`separate`], calling `observer` after every inner iteration.
pub fn separate_with_observer<F>(
    x: &SpectroTensor,
    cfg: &SolverConfig,
    estimators: &[&dyn VarianceEstimator],
    mut observer: F,
) -> Result<SeparationState>
where
    F: FnMut(&Progress, &SeparationState) -> Result<()>,
{
    cfg.validate()?;
    let (n_src, n_freq, n_frames) = x.data().dim();
    if cfg.reference_channel >= n_src {
        return Err(Error::InvalidArgument(format!(
            "reference channel {} out of range for {n_src} channels",
            cfg.reference_channel
        )));
    }
    if cfg.uses_estimators() && estimators.len() != n_src {
        return Err(Error::InvalidArgument(format!(
            "{} mode needs {n_src} estimators, got {}",
            cfg.mode,
            estimators.len()
        )));
    }
    let weights = cfg.effective_weights();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.n_bases;
    let sources = (0..n_src)
        .map(|_| {
            let basis = Array2::from_shape_simple_fn((n_freq, k), || rng.random_range(0.1..1.0));
            let activation = Array2::from_shape_simple_fn((k, n_frames), || rng.random_range(0.1..1.0));
            SourceNmf { basis, activation }
        })
        .collect();
    let nmf = NmfModel { sources };
    let w = DemixingStack::identity(n_freq, n_src);
    let demixed = w.demix(x)?;
    let r_nmf: Vec<VarianceField> = nmf
        .sources
        .iter()
        .map(|s| VarianceField { values: s.variance(), kind: VarianceKind::Nmf })
        .collect();
    let mut state = SeparationState {
        y: demixed.clone(),
        w,
        nmf,
        r_dnn: Vec::new(),
        r_tilde: r_nmf.clone(),
        r_nmf,
        cost_trace: Vec::with_capacity(cfg.outer_iters * cfg.inner_iters),
    };
    let mut demixed = demixed;
    let mut iteration = 0;

    for outer in 0..cfg.outer_iters {
        if cfg.uses_estimators() {
            let mut r_dnn = Vec::with_capacity(n_src);
            for (n, est) in estimators.iter().enumerate() {
                let mag = state.y.magnitude(n);
                let sigma = est.estimate(mag.view())?;
                if sigma.dim() != (n_freq, n_frames) {
                    return Err(Error::Shape(format!(
                        "estimator {n} returned {:?}, expected {:?}",
                        sigma.dim(),
                        (n_freq, n_frames)
                    )));
                }
                r_dnn.push(floor_variance(&sigma, cfg.eps)?);
            }
            state.r_tilde = r_dnn
                .iter()
                .zip(&state.r_nmf)
                .map(|(d, r)| VarianceField { values: combine_values(&r.values, &d.values, weights), kind: VarianceKind::Posm })
                .collect();
            state.r_dnn = r_dnn;
        }

        for inner in 0..cfg.inner_iters {
            if cfg.mode != Mode::Idlma {
                let powers: Vec<Array2<f64>> = (0..n_src).map(|n| demixed.power(n)).collect();
                state
                    .nmf
                    .sources
                    .par_iter_mut()
                    .zip(powers.par_iter())
                    .enumerate()
                    .map(|(n, (nmf, p))| match cfg.mode {
                        Mode::Ilrma => update_nmf_ilrma(nmf, p.view()),
                        _ => update_nmf_posm(nmf, p.view(), state.r_dnn[n].values.view(), weights),
                    })
                    .collect::<Result<Vec<()>>>()?;
                for n in 0..n_src {
                    let r = state.nmf.sources[n].variance();
                    state.r_tilde[n] = match cfg.mode {
                        Mode::Ilrma => VarianceField { values: r.clone(), kind: VarianceKind::Nmf },
                        _ => VarianceField {
                            values: combine_values(&r, &state.r_dnn[n].values, weights),
                            kind: VarianceKind::Posm,
                        },
                    };
                    state.r_nmf[n] = VarianceField { values: r, kind: VarianceKind::Nmf };
                }
            }

            let variances: Vec<Array2<f64>> = state.r_tilde.iter().map(|f| f.values.clone()).collect();
            ip_update(&mut state.w, x, &variances)?;
            demixed = state.w.demix(x)?;
            state.y = projection_back(&demixed, &state.w, cfg.reference_channel)?;
            state.cost_trace.push(cost_of(&demixed, &state.w, &variances)?);

            iteration += 1;
            observer(&Progress { outer, inner, iteration }, &state)?;
        }
    }
    Ok(state)
}
