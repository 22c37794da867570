//! Rotation bookkeeping between the body frame and the lab frame.
//!
//! The dynamics is integrated entirely in the body frame; the rotation
//! matrix Q is carried along only so output can be mapped back to the
//! lab frame. Columns of Q are the body axes expressed in lab
//! coordinates, so lab = Q body + translation.

use crate::error::{CavError, Result};
use crate::linalg::{
    det3, mat_mul, mat_vec, orthonormality_defect, polar_orthonormalize, sub, transpose, Mat3,
    Vec3, IDENTITY3,
};

/// Attitude of the body at time t.
#[derive(Clone, Copy, Debug)]
pub struct RotationState {
    pub q: Mat3,
    pub t: f64,
}

/// Allowed orthonormality/determinant defect on construction.
pub const ROTATION_DEFECT_TOL: f64 = 1e-10;

impl RotationState {
    pub fn identity() -> Self {
        RotationState {
            q: IDENTITY3,
            t: 0.0,
        }
    }

    pub fn new(q: Mat3, t: f64) -> Result<Self> {
        let defect = orthonormality_defect(&q);
        let ddet = (det3(&q) - 1.0).abs();
        if defect > ROTATION_DEFECT_TOL || ddet > ROTATION_DEFECT_TOL {
            return Err(CavError::Config(format!(
                "matrix is not a rotation: orthonormality defect {defect:.3e}, det defect {ddet:.3e}"
            )));
        }
        Ok(RotationState { q, t })
    }

    pub fn orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.q)
    }
}

/// Inertial data of the body/fluid pair. The inertia tensor is taken
/// about the common center of mass, which the cavity is centered on.
#[derive(Clone, Copy, Debug)]
pub struct RigidParams {
    pub m_body: f64,
    pub i_body: Mat3,
    pub m_fluid: f64,
}

impl RigidParams {
    pub fn new(m_body: f64, i_body: Mat3, m_fluid: f64) -> Result<Self> {
        if !(m_body > 0.0) || !(m_fluid > 0.0) {
            return Err(CavError::Config(format!(
                "masses must be positive: body {m_body}, fluid {m_fluid}"
            )));
        }
        // symmetry
        for i in 0..3 {
            for j in 0..3 {
                if (i_body[i][j] - i_body[j][i]).abs() > 1e-12 * (1.0 + i_body[i][j].abs()) {
                    return Err(CavError::Config("inertia tensor must be symmetric".into()));
                }
            }
        }
        // positive definiteness via leading principal minors
        let m1 = i_body[0][0];
        let m2 = i_body[0][0] * i_body[1][1] - i_body[0][1] * i_body[1][0];
        let m3 = det3(&i_body);
        if !(m1 > 0.0 && m2 > 0.0 && m3 > 0.0) {
            return Err(CavError::Config(
                "inertia tensor must be positive definite".into(),
            ));
        }
        Ok(RigidParams {
            m_body,
            i_body,
            m_fluid,
        })
    }
}

/// Cross-product matrix: skew(w) v = w x v.
pub fn skew(w: Vec3) -> Mat3 {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

/// Exact exponential of dt * skew(w) (Rodrigues form), series-expanded
/// near zero angle to avoid cancellation.
fn rotation_exp(w: Vec3, dt: f64) -> Mat3 {
    let v = [w[0] * dt, w[1] * dt, w[2] * dt];
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut out = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Advance the attitude under a body-frame angular velocity held
/// constant over the step: Q <- Q exp(dt skew(w)), then polish back
/// onto the rotation group. Two half steps compose to one full step
/// exactly (same axis), up to roundoff.
pub fn advance_rotation(state: &RotationState, w: Vec3, dt: f64) -> RotationState {
    let stepped = mat_mul(&state.q, &rotation_exp(w, dt));
    RotationState {
        q: polar_orthonormalize(&stepped),
        t: state.t + dt,
    }
}

/// Lab point -> body point: x = Q^T (y - y_c).
pub fn to_body_frame(state: &RotationState, y: Vec3, y_center: Vec3) -> Vec3 {
    mat_vec(&transpose(&state.q), sub(y, y_center))
}

/// Body point -> lab point: y = Q x + y_c.
pub fn to_inertial_frame(state: &RotationState, x: Vec3, y_center: Vec3) -> Vec3 {
    let mut y = mat_vec(&state.q, x);
    for i in 0..3 {
        y[i] += y_center[i];
    }
    y
}

/// Lab vector -> body vector (no shift).
pub fn to_body_frame_vector(state: &RotationState, w: Vec3) -> Vec3 {
    mat_vec(&transpose(&state.q), w)
}

/// Body vector -> lab vector (no shift).
pub fn to_inertial_frame_vector(state: &RotationState, w: Vec3) -> Vec3 {
    mat_vec(&state.q, w)
}
