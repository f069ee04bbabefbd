//! A small feedforward standard-deviation estimator with hand-written
//! backpropagation.
//!
//! Input and output are single spectrogram frames (I bins). Two rectified
//! hidden layers of H units feed a softplus output layer, so estimates are
//! strictly positive.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VarianceEstimator;
use crate::error::{Error, Result};

pub const TOY_PARAM_MAGIC: &[u8; 4] = b"PSM2";

const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Dense {
    fn zeros(n_out: usize, n_in: usize) -> Self {
        Dense { weight: Array2::zeros((n_out, n_in)), bias: Array1::zeros(n_out) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.weight.dot(x) + &self.bias.view().insert_axis(Axis(1))
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEstimator {
    layers: [Dense; 3],
}

struct Activations {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    z3: Array2<f64>,
    out: Array2<f64>,
}

impl ToyEstimator {
    /// All weights and biases zero.
    pub fn zeros(n_freq: usize, hidden: usize) -> Self {
        ToyEstimator {
            layers: [Dense::zeros(hidden, n_freq), Dense::zeros(hidden, hidden), Dense::zeros(n_freq, hidden)],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn random(n_freq: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut est = Self::zeros(n_freq, hidden);
        for layer in est.layers.iter_mut() {
            let bound = (6.0 / layer.weight.ncols() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        est
    }

    pub fn n_freq(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// Flattened parameters: each layer's weight (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), params.len())));
        }
        let mut it = params.iter().copied();
        for l in self.layers.iter_mut() {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// Copy with every parameter rounded to `f32`, i.e. what a saved file reproduces.
    pub fn quantized(&self) -> Self {
        let mut q = self.clone();
        let p: Vec<f64> = self.params().iter().map(|&v| v as f32 as f64).collect();
        q.set_params(&p).expect("same layout");
        q
    }

    fn forward(&self, x: &Array2<f64>) -> Activations {
        let z1 = self.layers[0].forward(x);
        let h1 = z1.mapv(|v| v.max(0.0));
        let z2 = self.layers[1].forward(&h1);
        let h2 = z2.mapv(|v| v.max(0.0));
        let z3 = self.layers[2].forward(&h2);
        let out = z3.mapv(softplus);
        Activations { z1, h1, z2, h2, z3, out }
    }

    /// Mean per-frame training loss over the columns of `input`/`target`.
    pub fn batch_loss(&self, input: &Array2<f64>, target: &Array2<f64>, delta: f64) -> f64 {
        let sigma = self.forward(input).out;
        training_loss(sigma.view(), target.view(), delta) / input.ncols() as f64
    }

    /// Gradient of [`Self::batch_loss`] with respect to [`Self::params`].
    pub fn loss_gradient(&self, input: &Array2<f64>, target: &Array2<f64>, delta: f64) -> Vec<f64> {
        let act = self.forward(input);
        let scale = 1.0 / input.ncols() as f64;
        let mut g3 = training_loss_grad_sigma(act.out.view(), target.view(), delta);
        Zip::from(&mut g3).and(&act.z3).for_each(|g, &z| *g *= scale * sigmoid(z));

        let dw3 = g3.dot(&act.h2.t());
        let db3 = g3.sum_axis(Axis(1));
        let mut g2 = self.layers[2].weight.t().dot(&g3);
        Zip::from(&mut g2).and(&act.z2).for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
        let dw2 = g2.dot(&act.h1.t());
        let db2 = g2.sum_axis(Axis(1));
        let mut g1 = self.layers[1].weight.t().dot(&g2);
        Zip::from(&mut g1).and(&act.z1).for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
        let dw1 = g1.dot(&input.t());
        let db1 = g1.sum_axis(Axis(1));

        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in [(dw1, db1), (dw2, db2), (dw3, db3)] {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(TOY_PARAM_MAGIC)?;
            w.write_all(&(self.n_freq() as u32).to_le_bytes())?;
            w.write_all(&(self.hidden() as u32).to_le_bytes())?;
            for p in self.params() {
                w.write_all(&(p as f32).to_le_bytes())?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let malformed = |reason: String| Error::Malformed { path: path.into(), reason };
        if bytes.len() < 12 || &bytes[..4] != TOY_PARAM_MAGIC {
            return Err(malformed("missing PSM2 header".into()));
        }
        let n_freq = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if n_freq == 0 || hidden == 0 {
            return Err(malformed("zero layer size".into()));
        }
        let mut est = Self::zeros(n_freq, hidden);
        let payload = &bytes[12..];
        if payload.len() != est.n_params() * 4 {
            return Err(malformed(format!(
                "payload is {} bytes, layer sizes imply {}",
                payload.len(),
                est.n_params() * 4
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        est.set_params(&params)?;
        Ok(est)
    }
}

impl VarianceEstimator for ToyEstimator {
    fn estimate(&self, magnitude: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if magnitude.nrows() != self.n_freq() {
            return Err(Error::Shape(format!(
                "estimator expects {} frequency bins, got {}",
                self.n_freq(),
                magnitude.nrows()
            )));
        }
        Ok(self.forward(&magnitude.to_owned()).out)
    }
}

/// Sum over cells of q - ln q - 1 with q = (|s|^2 + delta) / (sigma^2 + delta).
pub fn training_loss(sigma_hat: ArrayView2<'_, f64>, target_mag: ArrayView2<'_, f64>, delta: f64) -> f64 {
    let mut total = 0.0;
    Zip::from(&sigma_hat).and(&target_mag).for_each(|&s, &t| {
        let q = (t * t + delta) / (s * s + delta);
        total += q - q.ln() - 1.0;
    });
    total
}

/// Elementwise derivative of [`training_loss`] with respect to `sigma_hat`.
pub fn training_loss_grad_sigma(
    sigma_hat: ArrayView2<'_, f64>,
    target_mag: ArrayView2<'_, f64>,
    delta: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(sigma_hat.dim());
    Zip::from(&mut out).and(&sigma_hat).and(&target_mag).for_each(|o, &s, &t| {
        let b = s * s + delta;
        let q = (t * t + delta) / b;
        *o = 2.0 * s * (1.0 - q) / b;
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { delta: 1e-5, epochs: 50, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub estimator: ToyEstimator,
    /// Mean per-frame loss over the training set, before training and after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch training with Adam steps and gradient-norm clipping.
pub fn train_toy(
    est: &ToyEstimator,
    pairs: &[(Array2<f64>, Array2<f64>)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !(cfg.delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {}", cfg.delta)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n_freq = est.n_freq();
    let mut cols_in = Vec::new();
    let mut cols_out = Vec::new();
    for (noisy, clean) in pairs {
        if noisy.dim() != clean.dim() || noisy.nrows() != n_freq {
            return Err(Error::Shape(format!(
                "training pair shapes {:?}/{:?} do not match estimator input {n_freq}",
                noisy.dim(),
                clean.dim()
            )));
        }
        cols_in.extend(noisy.columns().into_iter().map(|c| c.to_owned()));
        cols_out.extend(clean.columns().into_iter().map(|c| c.to_owned()));
    }
    if cols_in.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let stack = |cols: &[Array1<f64>], idx: &[usize]| {
        let mut m = Array2::zeros((n_freq, idx.len()));
        for (c, &k) in idx.iter().enumerate() {
            m.column_mut(c).assign(&cols[k]);
        }
        m
    };
    let all: Vec<usize> = (0..cols_in.len()).collect();
    let full_in = stack(&cols_in, &all);
    let full_out = stack(&cols_out, &all);

    let mut model = est.clone();
    let mut params = model.params();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = all.clone();
    let mut epoch_losses = vec![model.batch_loss(&full_in, &full_out, cfg.delta)];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = stack(&cols_in, batch);
            let t = stack(&cols_out, batch);
            let mut g = model.loss_gradient(&x, &t, cfg.delta);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > GRAD_CLIP_NORM {
                g.iter_mut().for_each(|v| *v *= GRAD_CLIP_NORM / norm);
            }
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for k in 0..params.len() {
                m1[k] = b1 * m1[k] + (1.0 - b1) * g[k];
                m2[k] = b2 * m2[k] + (1.0 - b2) * g[k] * g[k];
                params[k] -= cfg.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + eps);
            }
            model.set_params(&params)?;
        }
        epoch_losses.push(model.batch_loss(&full_in, &full_out, cfg.delta));
    }
    Ok(TrainReport { estimator: model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(n_freq: usize, cols: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n_freq, cols), |_| rng.random_range(0.0..2.0));
        let t = Array2::from_shape_fn((n_freq, cols), |_| rng.random_range(0.0..2.0));
        (x, t)
    }

    #[test]
    fn zero_network_outputs_ln2() {
        let est = ToyEstimator::zeros(5, 4);
        let out = est.estimate(Array2::from_elem((5, 3), 7.0).view()).unwrap();
        assert!(out.iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        assert!((out[[0, 0]] - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn loss_zero_at_match() {
        let s = array![[0.5, 2.0], [0.0, 3.0]];
        assert_eq!(training_loss(s.view(), s.view(), 1e-5), 0.0);
    }

    #[test]
    fn loss_single_cell_value() {
        let l = training_loss(array![[0.0]].view(), array![[1.0]].view(), 1e-5);
        let q: f64 = (1.0 + 1e-5) / 1e-5;
        assert!((l - (q - q.ln() - 1.0)).abs() < 1e-9);
        assert!((l - 99988.487).abs() < 1e-2);
    }

    #[test]
    fn loss_vanishes_for_large_delta() {
        let l = training_loss(array![[0.1, 3.0]].view(), array![[2.0, 0.0]].view(), 1e6);
        assert!(l < 1e-9);
    }

    #[test]
    fn loss_matches_lgm_cost_up_to_constant() {
        // per-cell Gaussian cost ln r + |s|^2 / r with r = sigma^2 + delta and |s|^2 -> |s|^2 + delta
        let delta = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let s: f64 = rng.random_range(0.1..3.0);
            let t: f64 = rng.random_range(0.1..3.0);
            let lgm = |sig: f64| (sig * sig + delta).ln() + (t * t + delta) / (sig * sig + delta);
            let lgm_d = |sig: f64| 2.0 * sig / (sig * sig + delta) - 2.0 * sig * (t * t + delta) / (sig * sig + delta).powi(2);
            let loss = |sig: f64| training_loss(array![[sig]].view(), array![[t]].view(), delta);
            let c = lgm(s) - loss(s);
            let s2 = s * 1.7;
            assert!(((lgm(s2) - loss(s2)) - c).abs() <= 1e-8 * c.abs().max(1.0));
            let d = training_loss_grad_sigma(array![[s]].view(), array![[t]].view(), delta)[[0, 0]];
            assert!((d - lgm_d(s)).abs() <= 1e-8 * d.abs().max(1e-12));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let est = ToyEstimator::random(6, 5, 4);
        let (x, t) = random_batch(6, 7, 5);
        let g = est.loss_gradient(&x, &t, 1e-5);
        let p0 = est.params();
        let h = 1e-4;
        for k in 0..p0.len() {
            let mut e = est.clone();
            let mut p = p0.clone();
            p[k] += h;
            e.set_params(&p).unwrap();
            let up = e.batch_loss(&x, &t, 1e-5);
            p[k] -= 2.0 * h;
            e.set_params(&p).unwrap();
            let down = e.batch_loss(&x, &t, 1e-5);
            let fd = (up - down) / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: analytic {} fd {fd}", g[k]);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (x, _) = random_batch(8, 40, 1);
        let est = ToyEstimator::random(8, 16, 2);
        let cfg = TrainConfig { epochs: 30, batch_size: 8, learning_rate: 1e-2, ..Default::default() };
        let report = train_toy(&est, &[(x.clone(), x)], &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 31);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    }

    #[test]
    fn training_errors() {
        let est = ToyEstimator::random(4, 3, 0);
        assert!(train_toy(&est, &[], &TrainConfig::default()).is_err());
        let bad = (Array2::zeros((5, 2)), Array2::zeros((5, 2)));
        assert!(matches!(train_toy(&est, &[bad], &TrainConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let est = ToyEstimator::random(9, 4, 8);
        let p = dir.path().join("e.psm2");
        est.save(&p).unwrap();
        let loaded = ToyEstimator::load(&p).unwrap();
        assert_eq!(loaded, est.quantized());
        let (x, _) = random_batch(9, 3, 0);
        assert_eq!(loaded.estimate(x.view()).unwrap(), est.quantized().estimate(x.view()).unwrap());

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PSM2");
        assert_eq!(bytes.len(), 12 + 4 * est.n_params());
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(ToyEstimator::load(&p).is_err());
    }

    #[test]
    fn estimate_is_deterministic() {
        let est = ToyEstimator::random(6, 5, 1);
        let (x, _) = random_batch(6, 4, 2);
        let a = est.estimate(x.view()).unwrap();
        let b = est.estimate(x.view()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0));
        assert!(est.estimate(Array2::zeros((5, 2)).view()).is_err());
    }
}
