//! Rigid-side dynamics and the residuals that tie the body to the
//! fluid: Euler equations for the angular velocity under a fluid
//! torque, the body-frame form of angular momentum conservation, and
//! the zero-total-momentum constraint.

use crate::cavity_basis::BasisSet;
use crate::error::{CavError, Result};
use crate::linalg::{add, cross, inv3, mat_vec, norm, scale, Mat3, Vec3};
use crate::system_state::SystemState;

/// Torque on the body at a given instant, in body coordinates.
#[derive(Clone, Copy, Debug)]
pub struct TorqueSample {
    pub t: f64,
    pub torque: Vec3,
}

/// One RK4 step of the rigid Euler equations
/// I omega' + omega x (I omega) = tau with tau frozen over the step.
pub fn euler_rigid_step(omega: Vec3, i_c: &Mat3, torque: Vec3, dt: f64) -> Vec3 {
    let i_inv = inv3(i_c);
    let f = |w: Vec3| -> Vec3 {
        let iw = mat_vec(i_c, w);
        let rhs = [
            torque[0] - (w[1] * iw[2] - w[2] * iw[1]),
            torque[1] - (w[2] * iw[0] - w[0] * iw[2]),
            torque[2] - (w[0] * iw[1] - w[1] * iw[0]),
        ];
        mat_vec(&i_inv, rhs)
    };
    let k1 = f(omega);
    let k2 = f(add(omega, scale(k1, dt / 2.0)));
    let k3 = f(add(omega, scale(k2, dt / 2.0)));
    let k4 = f(add(omega, scale(k3, dt)));
    let mut out = omega;
    for c in 0..3 {
        out[c] += dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
    }
    out
}

/// Second moment matrix of the body mass distribution, recovered from
/// its inertia tensor: R2 = tr(I)/2 - I with I = tr(R2) - R2. Needed
/// when body and fluid moments are combined in the coupled mass
/// operator.
pub fn second_moment_from_inertia(i_c: &Mat3) -> Mat3 {
    let tr = i_c[0][0] + i_c[1][1] + i_c[2][2];
    let mut j = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            j[a][b] = if a == b { 0.5 * tr } else { 0.0 } - i_c[a][b];
        }
    }
    j
}

/// Snapshot of the angular state used by the conservation residual.
#[derive(Clone, Copy, Debug)]
pub struct MomentumSample {
    pub t: f64,
    pub omega: Vec3,
    /// total angular momentum in body coordinates
    pub m: Vec3,
}

/// How well a trajectory satisfies dM/dt + omega x M = 0, the
/// body-frame statement that the lab-frame angular momentum is
/// constant. Finite differences at interval midpoints, plus the drift
/// of |M| (frame-independent, so it must hold exactly in either frame).
#[derive(Clone, Copy, Debug)]
pub struct MomentumFormReport {
    /// max over midpoints of |(M_{i+1}-M_i)/dt + omega x M| at midpoint
    pub max_residual: f64,
    /// max |  |M_i| - |M_0|  | over the trajectory
    pub norm_drift: f64,
}

pub fn momentum_form_residual(traj: &[MomentumSample]) -> Result<MomentumFormReport> {
    if traj.len() < 2 {
        return Err(CavError::TooFewSnapshots {
            need: 2,
            got: traj.len(),
        });
    }
    let m0 = norm(traj[0].m);
    let mut max_residual = 0.0f64;
    let mut norm_drift = 0.0f64;
    for w in traj.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dt = b.t - a.t;
        let mdot = [0, 1, 2].map(|c| (b.m[c] - a.m[c]) / dt);
        let omega_mid = [0, 1, 2].map(|c| 0.5 * (a.omega[c] + b.omega[c]));
        let m_mid = [0, 1, 2].map(|c| 0.5 * (a.m[c] + b.m[c]));
        let r = add(mdot, cross(omega_mid, m_mid));
        max_residual = max_residual.max(norm(r));
        norm_drift = norm_drift.max((norm(b.m) - m0).abs());
    }
    Ok(MomentumFormReport {
        max_residual,
        norm_drift,
    })
}

/// Residual of the zero-total-momentum constraint,
/// m_body xi + integral rho u. Zero when xi is slaved to the rest of
/// the state.
pub fn linear_constraint_residual(basis: &BasisSet, state: &SystemState) -> Vec3 {
    state.total_linear_momentum(basis)
}
