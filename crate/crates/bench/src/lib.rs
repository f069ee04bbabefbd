//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use posm_core::simulate::SceneParams;
use posm_core::{dsp, DemixingStack, SourceNmf, SpectroTensor, StftConfig};

/// Observed STFT of a default two-source scene of `duration_s` seconds.
pub fn scene_stft(duration_s: f64) -> (posm_core::TimeSignal, SpectroTensor) {
    let scene = SceneParams { duration_s, ..Default::default() }.generate().expect("scene");
    let x = dsp::stft(&scene.observed, &StftConfig::default()).expect("stft");
    (scene.observed, x)
}

/// Identity demixing, flat NMF factors and the matching variance maps.
pub fn solver_inputs(x: &SpectroTensor, n_bases: usize) -> (DemixingStack, Vec<SourceNmf>, Vec<Array2<f64>>) {
    let (n, i, j) = x.data().dim();
    let w = DemixingStack::identity(i, n);
    let nmf: Vec<SourceNmf> = (0..n)
        .map(|s| {
            let t = Array2::from_shape_fn((i, n_bases), |(a, b)| 0.5 + ((a * 7 + b * 3 + s) % 5) as f64 * 0.1);
            let v = Array2::from_shape_fn((n_bases, j), |(a, b)| 0.5 + ((a * 5 + b * 11 + s) % 7) as f64 * 0.1);
            SourceNmf::new(t, v).expect("factors")
        })
        .collect();
    let r = nmf.iter().map(SourceNmf::variance).collect();
    (w, nmf, r)
}
