//! One-dimensional building blocks for the tensor trig bases.
//!
//! Axis conventions: a cavity edge of length `l` is parameterized by
//! zeta in (0, l) with the centered coordinate x = zeta - l/2. The two
//! mode families per axis are
//!
//!   sigma_k(zeta) = sin(k pi zeta / l),   k >= 1   (vanishes at both ends)
//!   chi_k(zeta)   = cos(k pi zeta / l),   k >= 0   (zero end slope)
//!
//! The collocation grid is the p midpoints zeta_j = (j + 1/2) l / p. On
//! that grid distinct sigma modes with 1 <= k <= p-1 and distinct chi
//! modes with 0 <= k <= p-1 are exactly orthogonal under the midpoint
//! rule, so analysis of any band-limited function is exact. Mixed
//! sigma/chi integrals are NOT reproduced by the midpoint rule; those
//! always go through the closed forms below.

use ndarray::{Array2, Array3, Axis};

/// Per-axis trig family of a scalar field factor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Parity {
    Sin,
    Cos,
}

/// Polynomial weight attached to one axis of an integral.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Weight {
    One,
    X,
    X2,
}

/// integral over (0,l) of w(x) * chi_m, even in m.
fn mom_cos(m: i64, w: Weight, l: f64) -> f64 {
    let m = m.unsigned_abs();
    let pi = std::f64::consts::PI;
    match w {
        Weight::One => {
            if m == 0 {
                l
            } else {
                0.0
            }
        }
        Weight::X => {
            if m % 2 == 1 {
                let mf = m as f64;
                -2.0 * l * l / (mf * mf * pi * pi)
            } else {
                0.0
            }
        }
        Weight::X2 => {
            if m == 0 {
                l * l * l / 12.0
            } else if m % 2 == 0 {
                let mf = m as f64;
                2.0 * l * l * l / (mf * mf * pi * pi)
            } else {
                0.0
            }
        }
    }
}

/// integral over (0,l) of w(x) * sigma_m, odd in m.
fn mom_sin(m: i64, w: Weight, l: f64) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let s = if m < 0 { -1.0 } else { 1.0 };
    let m = m.unsigned_abs();
    let mf = m as f64;
    let pi = std::f64::consts::PI;
    s * match w {
        Weight::One => {
            if m % 2 == 1 {
                2.0 * l / (mf * pi)
            } else {
                0.0
            }
        }
        Weight::X => {
            if m % 2 == 0 {
                -l * l / (mf * pi)
            } else {
                0.0
            }
        }
        Weight::X2 => {
            if m % 2 == 1 {
                l * l * l / (2.0 * mf * pi) - 4.0 * l * l * l / (mf * mf * mf * pi * pi * pi)
            } else {
                0.0
            }
        }
    }
}

/// Exact integral over (0,l) of w(x) * f_a * f_b where f is sigma or chi
/// according to the parity arguments. Degenerate indices (sin with k = 0)
/// fall out as zero automatically.
pub fn gram1d(pa: Parity, ka: usize, pb: Parity, kb: usize, w: Weight, l: f64) -> f64 {
    let (ka, kb) = (ka as i64, kb as i64);
    match (pa, pb) {
        // sigma_a sigma_b = (chi_{a-b} - chi_{a+b}) / 2
        (Parity::Sin, Parity::Sin) => 0.5 * (mom_cos(ka - kb, w, l) - mom_cos(ka + kb, w, l)),
        // sigma_a chi_b = (sigma_{a+b} + sigma_{a-b}) / 2
        (Parity::Sin, Parity::Cos) => 0.5 * (mom_sin(ka + kb, w, l) + mom_sin(ka - kb, w, l)),
        (Parity::Cos, Parity::Sin) => 0.5 * (mom_sin(ka + kb, w, l) + mom_sin(kb - ka, w, l)),
        // chi_a chi_b = (chi_{a+b} + chi_{a-b}) / 2
        (Parity::Cos, Parity::Cos) => 0.5 * (mom_cos(ka + kb, w, l) + mom_cos(ka - kb, w, l)),
    }
}

/// Exact integral over (0,l) of w(x) times a single mode (against 1).
pub fn moment1d(p: Parity, k: usize, w: Weight, l: f64) -> f64 {
    gram1d(p, k, Parity::Cos, 0, w, l)
}

/// Trig index of the mode stored at array position `i`.
pub fn index_of(par: Parity, i: usize) -> usize {
    match par {
        Parity::Sin => i + 1,
        Parity::Cos => i,
    }
}

/// Number of stored coefficients for modes with trig index <= cap.
pub fn len_for_cap(par: Parity, cap: usize) -> usize {
    match par {
        Parity::Sin => cap,
        Parity::Cos => cap + 1,
    }
}

/// Synthesis matrix, shape (p, len): column i evaluates mode i at the
/// p midpoint nodes. Entries depend only on p, not on the edge length.
pub fn synthesis(par: Parity, p: usize, len: usize) -> Array2<f64> {
    let pi = std::f64::consts::PI;
    Array2::from_shape_fn((p, len), |(j, i)| {
        let k = index_of(par, i) as f64;
        let t = k * pi * (j as f64 + 0.5) / p as f64;
        match par {
            Parity::Sin => t.sin(),
            Parity::Cos => t.cos(),
        }
    })
}

/// Analysis matrix, shape (len, p): recovers coefficients of a function
/// band-limited to trig index <= p-1 exactly from its node values.
pub fn analysis(par: Parity, p: usize, len: usize) -> Array2<f64> {
    let pi = std::f64::consts::PI;
    Array2::from_shape_fn((len, p), |(i, j)| {
        let k = index_of(par, i) as f64;
        let t = k * pi * (j as f64 + 0.5) / p as f64;
        match par {
            Parity::Sin => 2.0 / p as f64 * t.sin(),
            Parity::Cos => {
                if k == 0.0 {
                    1.0 / p as f64
                } else {
                    2.0 / p as f64 * t.cos()
                }
            }
        }
    })
}

/// Contract one axis of a rank-3 array with a matrix:
/// out[.., i, ..] = sum_j m[i, j] a[.., j, ..] along `axis`.
pub fn apply_axis(a: &Array3<f64>, axis: usize, m: ndarray::ArrayView2<f64>) -> Array3<f64> {
    debug_assert_eq!(a.shape()[axis], m.ncols());
    let perm = match axis {
        0 => [1, 2, 0],
        1 => [0, 2, 1],
        _ => [0, 1, 2],
    };
    let inv = match axis {
        0 => [2, 0, 1],
        1 => [0, 2, 1],
        _ => [0, 1, 2],
    };
    let moved = a.view().permuted_axes(perm);
    let std = moved.as_standard_layout().into_owned();
    let (d0, d1, d2) = std.dim();
    let flat = std.into_shape_with_order((d0 * d1, d2)).unwrap();
    let out2 = flat.dot(&m.t());
    let out3 = out2.into_shape_with_order((d0, d1, m.nrows())).unwrap();
    out3.permuted_axes(inv).as_standard_layout().into_owned()
}

/// Sum of a rank-3 array contracted against per-axis weight vectors.
pub fn contract_full(a: &Array3<f64>, w0: &[f64], w1: &[f64], w2: &[f64]) -> f64 {
    debug_assert_eq!(a.shape(), &[w0.len(), w1.len(), w2.len()]);
    let mut total = 0.0;
    for (i0, a0) in a.axis_iter(Axis(0)).enumerate() {
        let mut s0 = 0.0;
        for (i1, a1) in a0.axis_iter(Axis(0)).enumerate() {
            let mut s1 = 0.0;
            for (i2, v) in a1.iter().enumerate() {
                s1 += v * w2[i2];
            }
            s0 += s1 * w1[i1];
        }
        total += s0 * w0[i0];
    }
    total
}
