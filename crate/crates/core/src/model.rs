//! Domain types shared by the solver, the estimators and the CLI.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound kept on every NMF factor entry.
pub const NMF_FLOOR: f64 = 1e-12;

/// Complex time-frequency data indexed (slot, frequency, frame). A slot is a
/// channel for observations and a source for separated signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroTensor {
    data: Array3<Complex64>,
}

impl SpectroTensor {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("spectrogram contains non-finite values".into()));
        }
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty spectrogram {:?}", data.shape())));
        }
        Ok(SpectroTensor { data })
    }

    pub fn zeros(n_slots: usize, n_freq: usize, n_frames: usize) -> Self {
        SpectroTensor { data: Array3::zeros((n_slots, n_freq, n_frames)) }
    }

    pub(crate) fn from_raw(data: Array3<Complex64>) -> Self {
        SpectroTensor { data }
    }

    pub fn n_slots(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_freq(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.data
    }

    pub fn slot(&self, n: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), n)
    }

    pub fn slot_mut(&mut self, n: usize) -> ArrayViewMut2<'_, Complex64> {
        self.data.index_axis_mut(Axis(0), n)
    }

    pub fn magnitude(&self, n: usize) -> Array2<f64> {
        self.slot(n).mapv(|z| z.norm())
    }

    pub fn power(&self, n: usize) -> Array2<f64> {
        self.slot(n).mapv(|z| z.norm_sqr())
    }
}

/// Basis (I x K) and activation (K x J) of one source's NMF model.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceNmf {
    pub basis: Array2<f64>,
    pub activation: Array2<f64>,
}

impl SourceNmf {
    pub fn new(basis: Array2<f64>, activation: Array2<f64>) -> Result<Self> {
        if basis.ncols() != activation.nrows() {
            return Err(Error::Shape(format!(
                "basis has {} columns but activation has {} rows",
                basis.ncols(),
                activation.nrows()
            )));
        }
        if basis.iter().chain(activation.iter()).any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::InvalidArgument("NMF factors must be finite and nonnegative".into()));
        }
        let mut nmf = SourceNmf { basis, activation };
        nmf.apply_floor();
        Ok(nmf)
    }

    pub fn n_bases(&self) -> usize {
        self.basis.ncols()
    }

    /// Low-rank variance T V.
    pub fn variance(&self) -> Array2<f64> {
        self.basis.dot(&self.activation)
    }

    pub(crate) fn apply_floor(&mut self) {
        self.basis.mapv_inplace(|x| x.max(NMF_FLOOR));
        self.activation.mapv_inplace(|x| x.max(NMF_FLOOR));
    }
}

/// Per-source NMF factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    pub sources: Vec<SourceNmf>,
}

impl NmfModel {
    pub fn n_bases(&self) -> usize {
        self.sources.first().map_or(0, SourceNmf::n_bases)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Nmf,
    Estimator,
    Posm,
}

/// Positive variance map (I x J) of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceField {
    pub values: Array2<f64>,
    pub kind: VarianceKind,
}

impl VarianceField {
    pub fn new(values: Array2<f64>, kind: VarianceKind) -> Result<Self> {
        if values.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::InvalidArgument("variances must be positive and finite".into()));
        }
        Ok(VarianceField { values, kind })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Exponents of the NMF and estimator experts in the product of source models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosmWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl PosmWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || beta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weights must be nonnegative, got alpha={alpha} beta={beta}"
            )));
        }
        if alpha + beta <= 0.0 {
            return Err(Error::InvalidArgument("alpha + beta must be positive".into()));
        }
        Ok(PosmWeights { alpha, beta })
    }

    /// Weights on the simplex, beta = 1 - alpha.
    pub fn simplex(alpha: f64) -> Result<Self> {
        Self::new(alpha, 1.0 - alpha)
    }

    pub const ILRMA: PosmWeights = PosmWeights { alpha: 1.0, beta: 0.0 };
    pub const IDLMA: PosmWeights = PosmWeights { alpha: 0.0, beta: 1.0 };
}

/// Per-frequency demixing matrices, stored (I, N, M). Row n of bin i is w_in^H.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixingStack {
    w: Array3<Complex64>,
}

impl DemixingStack {
    pub fn new(w: Array3<Complex64>) -> Result<Self> {
        let (_, n, m) = w.dim();
        if n != m {
            return Err(Error::Shape(format!("demixing matrices must be square, got {n}x{m}")));
        }
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("demixing matrix contains non-finite values".into()));
        }
        Ok(DemixingStack { w })
    }

    pub fn identity(n_freq: usize, n: usize) -> Self {
        let mut w = Array3::zeros((n_freq, n, n));
        for i in 0..n_freq {
            for k in 0..n {
                w[[i, k, k]] = Complex64::new(1.0, 0.0);
            }
        }
        DemixingStack { w }
    }

    pub fn n_freq(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_sources(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bin(&self, i: usize) -> ArrayView2<'_, Complex64> {
        self.w.index_axis(Axis(0), i)
    }

    pub fn bin_mut(&mut self, i: usize) -> ArrayViewMut2<'_, Complex64> {
        self.w.index_axis_mut(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array3<Complex64> {
        &self.w
    }

    pub(crate) fn as_array_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.w
    }

    /// y_ij = W_i x_ij for every bin and frame.
    pub fn demix(&self, x: &SpectroTensor) -> Result<SpectroTensor> {
        let (m, n_freq, n_frames) = x.data().dim();
        if n_freq != self.n_freq() || m != self.n_sources() {
            return Err(Error::Shape(format!(
                "observation is {m}x{n_freq}, demixing stack is {}x{}",
                self.n_sources(),
                self.n_freq()
            )));
        }
        let n = self.n_sources();
        let mut y = Array3::zeros((n, n_freq, n_frames));
        for i in 0..n_freq {
            let w = self.bin(i);
            for j in 0..n_frames {
                for s in 0..n {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for c in 0..m {
                        acc += w[[s, c]] * x.data()[[c, i, j]];
                    }
                    y[[s, i, j]] = acc;
                }
            }
        }
        Ok(SpectroTensor::from_raw(y))
    }
}

/// r_ijn = sum_k t_ik v_kj for source `n`.
pub fn nmf_variance(model: &NmfModel, n: usize) -> VarianceField {
    VarianceField { values: model.sources[n].variance(), kind: VarianceKind::Nmf }
}

/// Product-of-experts variance: 1/r = alpha/r_nmf + beta/r_dnn elementwise.
///
/// A zero weight drops its expert exactly, so (1, 0) returns `r_nmf` and
/// (0, 1) returns `r_dnn` bit for bit.
pub fn combine_posm(
    r_nmf: &VarianceField,
    r_dnn: &VarianceField,
    w: PosmWeights,
) -> Result<VarianceField> {
    let w = PosmWeights::new(w.alpha, w.beta)?;
    if r_nmf.shape() != r_dnn.shape() {
        return Err(Error::Shape(format!(
            "NMF variance is {:?}, estimator variance is {:?}",
            r_nmf.shape(),
            r_dnn.shape()
        )));
    }
    Ok(VarianceField { values: combine_values(&r_nmf.values, &r_dnn.values, w), kind: VarianceKind::Posm })
}

pub(crate) fn combine_values(r_nmf: &Array2<f64>, r_dnn: &Array2<f64>, w: PosmWeights) -> Array2<f64> {
    let PosmWeights { alpha, beta } = w;
    if beta == 0.0 {
        r_nmf.mapv(|r| r / alpha)
    } else if alpha == 0.0 {
        r_dnn.mapv(|r| r / beta)
    } else {
        let mut out = Array2::zeros(r_nmf.dim());
        Zip::from(&mut out).and(r_nmf).and(r_dnn).for_each(|o, &a, &b| {
            *o = 1.0 / (alpha / a + beta / b);
        });
        out
    }
}

/// r = max(sigma^2, eps) for an estimated standard-deviation map.
pub fn floor_variance(sigma: &Array2<f64>, eps: f64) -> Result<VarianceField> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("flooring value must be positive, got {eps}")));
    }
    if sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("standard deviations must be finite and nonnegative".into()));
    }
    Ok(VarianceField { values: sigma.mapv(|s| (s * s).max(eps)), kind: VarianceKind::Estimator })
}
