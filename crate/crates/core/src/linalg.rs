//! Dense complex linear algebra for the small (N <= 4) per-bin systems.

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;

/// Pivots smaller than this fraction of the largest entry count as singular.
const PIVOT_TOLERANCE: f64 = 1e-14;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when the matrix is numerically singular.
pub fn solve(a: ArrayView2<'_, Complex64>, b: &Array1<Complex64>) -> Option<Array1<Complex64>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    let mut m = a.to_owned();
    let mut x = b.clone();
    let scale = m.iter().fold(0.0_f64, |s, z| s.max(z.norm()));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, m[[r, col]].norm()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= PIVOT_TOLERANCE * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([piv, c], [col, c]);
            }
            x.swap(piv, col);
        }
        let p = m[[col, col]];
        for r in col + 1..n {
            let f = m[[r, col]] / p;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for c in col..n {
                let v = m[[col, c]];
                m[[r, c]] -= f * v;
            }
            let v = x[col];
            x[r] -= f * v;
        }
    }
    for r in (0..n).rev() {
        let mut acc = x[r];
        for c in r + 1..n {
            acc -= m[[r, c]] * x[c];
        }
        x[r] = acc / m[[r, r]];
    }
    Some(x)
}

/// Solves `a x = b`, retrying once with diagonal loading `1e-12 * load_ref` if singular.
pub fn solve_loaded(
    a: ArrayView2<'_, Complex64>,
    b: &Array1<Complex64>,
    load_ref: f64,
) -> Option<Array1<Complex64>> {
    solve(a, b).or_else(|| {
        let mut loaded = a.to_owned();
        let delta = 1e-12 * load_ref;
        for k in 0..loaded.nrows() {
            loaded[[k, k]] += delta;
        }
        solve(loaded.view(), b)
    })
}

/// Determinant via elimination with partial pivoting.
pub fn det(a: ArrayView2<'_, Complex64>) -> Complex64 {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut d = Complex64::new(1.0, 0.0);
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, m[[r, col]].norm()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        if piv != col {
            for c in 0..n {
                m.swap([piv, c], [col, c]);
            }
            d = -d;
        }
        let p = m[[col, col]];
        d *= p;
        for r in col + 1..n {
            let f = m[[r, col]] / p;
            for c in col..n {
                let v = m[[col, c]];
                m[[r, c]] -= f * v;
            }
        }
    }
    d
}

pub fn matmul(a: ArrayView2<'_, Complex64>, b: ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut out = Array2::zeros((n, m));
    for r in 0..n {
        for c in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..k {
                acc += a[[r, t]] * b[[t, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

pub fn unit(n: usize, k: usize) -> Array1<Complex64> {
    let mut e = Array1::zeros(n);
    e[k] = Complex64::new(1.0, 0.0);
    e
}
