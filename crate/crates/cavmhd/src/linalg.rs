//! Small fixed-size vector/matrix helpers shared across the crate.
//!
//! Everything here is 3-vectors, 3x3 matrices and tiny dense systems;
//! field-sized linear algebra lives with the spectral engine.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const ZERO3: Vec3 = [0.0; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn axpy(y: Vec3, a: f64, x: Vec3) -> Vec3 {
    [y[0] + a * x[0], y[1] + a * x[1], y[2] + a * x[2]]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                c[i][j] += a[i][k] * bk[j];
            }
        }
    }
    c
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] + b[i][j];
        }
    }
    c
}

pub fn mat_scale(a: &Mat3, s: f64) -> Mat3 {
    let mut c = *a;
    for row in c.iter_mut() {
        for x in row.iter_mut() {
            *x *= s;
        }
    }
    c
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inv3(m: &Mat3) -> Mat3 {
    let d = det3(m);
    assert!(d.abs() > 1e-300, "singular 3x3 matrix");
    let inv_d = 1.0 / d;
    let mut c = [[0.0; 3]; 3];
    c[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d;
    c[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d;
    c[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d;
    c[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d;
    c[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d;
    c[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d;
    c[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d;
    c[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d;
    c[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d;
    c
}

/// Frobenius norm of Q^T Q - I, the orthonormality defect.
pub fn orthonormality_defect(q: &Mat3) -> f64 {
    let qtq = mat_mul(&transpose(q), q);
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = qtq[i][j] - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}

/// Nearest-rotation polish: Newton iteration Q <- (Q + Q^-T)/2.
///
/// Converges quadratically to the polar factor for matrices near SO(3),
/// which is the only regime the integrator produces.
pub fn polar_orthonormalize(q: &Mat3) -> Mat3 {
    let mut cur = *q;
    for _ in 0..20 {
        let qinv_t = transpose(&inv3(&cur));
        let next = mat_scale(&mat_add(&cur, &qinv_t), 0.5);
        let mut delta: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                delta = delta.max((next[i][j] - cur[i][j]).abs());
            }
        }
        cur = next;
        if delta < 1e-15 {
            break;
        }
    }
    cur
}

/// Solve a small dense symmetric-positive or general system in place by
/// Gaussian elimination with partial pivoting. Panics on (numerically)
/// singular input; callers only feed SPD mass/Schur blocks.
pub fn solve_dense(a: &mut Vec<Vec<f64>>, b: &mut [f64]) {
    let n = b.len();
    assert_eq!(a.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col][col].abs();
        for (r, row) in a.iter().enumerate().skip(col + 1) {
            if row[col].abs() > best {
                best = row[col].abs();
                piv = r;
            }
        }
        assert!(best > 1e-300, "singular dense system");
        if piv != col {
            a.swap(col, piv);
            b.swap(col, piv);
        }
        let d = a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                let v = a[col][c];
                a[r][c] -= f * v;
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col][c] * b[c];
        }
        b[col] = s / a[col][col];
    }
}
