//! Parameter and state containers plus the global invariants that are
//! cheap enough to evaluate anywhere: total mass, linear momentum,
//! angular momentum, density positivity.

use ndarray::Array3;

use crate::cavity_basis::{BasisSet, TaggedField, Weight};
use crate::error::{CavError, Result};
use crate::frame_kinematics::{RigidParams, RotationState};
use crate::linalg::{add, cross, mat_vec, scale, Mat3, Vec3};

/// Fluid material constants. The magnetic resistivity is fixed at one
/// by the nondimensionalization and is not a parameter.
#[derive(Clone, Copy, Debug)]
pub struct PhysParams {
    /// isentropic pressure coefficient, p = a rho^gamma + delta rho^beta
    pub a: f64,
    pub gamma: f64,
    /// shear viscosity
    pub mu: f64,
    /// second (dilatational) viscosity coefficient
    pub lambda: f64,
}

impl PhysParams {
    pub fn new(a: f64, gamma: f64, mu: f64, lambda: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(CavError::Config(format!("pressure coefficient a must be positive, got {a}")));
        }
        if !(gamma > 1.0) {
            return Err(CavError::Config(format!(
                "adiabatic exponent must exceed 1, got gamma = {gamma}"
            )));
        }
        if !(mu > 0.0) {
            return Err(CavError::Config(format!("shear viscosity must be positive, got {mu}")));
        }
        if !(lambda >= 0.0) {
            return Err(CavError::Config(format!(
                "second viscosity must be nonnegative, got {lambda}"
            )));
        }
        Ok(PhysParams { a, gamma, mu, lambda })
    }

    /// Below gamma = 3/2 the long-time/weak-solution diagnostics lose
    /// their footing; runs are allowed but reports flag it.
    pub fn weak_regime_ok(&self) -> bool {
        self.gamma > 1.5
    }
}

/// Regularization knobs: artificial mass diffusion eps and the stiff
/// pressure augmentation delta rho^beta.
#[derive(Clone, Copy, Debug)]
pub struct RegParams {
    pub eps: f64,
    pub delta: f64,
    pub beta: f64,
}

impl RegParams {
    pub fn new(eps: f64, delta: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(CavError::Config(format!("eps must be nonnegative, got {eps}")));
        }
        if !(delta >= 0.0) {
            return Err(CavError::Config(format!("delta must be nonnegative, got {delta}")));
        }
        if delta > 0.0 {
            let floor = gamma.max(4.0);
            if !(beta > floor) {
                return Err(CavError::Config(format!(
                    "with delta > 0 the augmentation exponent must satisfy beta > max(gamma, 4) = {floor}, got beta = {beta}"
                )));
            }
        }
        Ok(RegParams { eps, delta, beta })
    }

    /// Exponent floor for vanishing-delta studies. The sharper bound
    /// 6 gamma / (2 gamma - 3) only bites for gamma > 3/2; below that
    /// the generic floor of 4 is all that can be asked.
    pub fn beta_floor_for_delta_study(gamma: f64) -> f64 {
        if 2.0 * gamma - 3.0 > 0.0 {
            4.0f64.max(6.0 * gamma / (2.0 * gamma - 3.0))
        } else {
            4.0
        }
    }
}

/// Modal fluid fields.
#[derive(Clone, Debug)]
pub struct FluidState {
    pub rho: TaggedField,
    pub v: [TaggedField; 3],
    pub b: [TaggedField; 3],
}

impl FluidState {
    pub fn rest(basis: &BasisSet, mean_density: f64) -> Self {
        let mut rho = basis.zeros_density();
        rho.c[[0, 0, 0]] = mean_density;
        FluidState {
            rho,
            v: basis.zeros_velocity(),
            b: basis.zeros_magnetic(),
        }
    }

    /// Mean density = constant-mode coefficient.
    pub fn mean_density(&self) -> f64 {
        self.rho.c[[0, 0, 0]]
    }
}

/// Rigid part of the state in body coordinates: angular velocity and
/// the velocity of the common center of mass.
#[derive(Clone, Copy, Debug, Default)]
pub struct RigidState {
    pub omega: Vec3,
    pub xi: Vec3,
}

/// Everything that evolves, plus the constants needed to evolve it.
#[derive(Clone, Debug)]
pub struct SystemState {
    pub fluid: FluidState,
    pub rigid: RigidState,
    pub rotation: RotationState,
    pub phys: PhysParams,
    pub reg: RegParams,
    pub rigid_params: RigidParams,
}

/// Nodal density below this fraction of the mean is treated as a
/// positivity failure and rejects the step.
pub const POSITIVITY_FLOOR_FRACTION: f64 = 1e-8;

/// First and second x-weighted moments of a density field.
#[derive(Clone, Copy, Debug)]
pub struct DensityMoments {
    /// integral of rho
    pub r0: f64,
    /// integral of rho x
    pub r1: Vec3,
    /// integral of rho x (x) x
    pub r2: Mat3,
}

impl DensityMoments {
    /// Rotational inertia contribution: integral of rho (|x|^2 I - x x).
    pub fn inertia(&self) -> Mat3 {
        let tr = self.r2[0][0] + self.r2[1][1] + self.r2[2][2];
        let mut j = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                j[i][k] = if i == k { tr } else { 0.0 } - self.r2[i][k];
            }
        }
        j
    }
}

pub fn density_moments(basis: &BasisSet, rho: &TaggedField) -> DensityMoments {
    let w_of = |axis: usize, order: usize| -> [Weight; 3] {
        let mut w = [Weight::One; 3];
        w[axis] = if order == 2 { Weight::X2 } else { Weight::X };
        w
    };
    let r0 = basis.integral(rho, [Weight::One; 3]);
    let r1 = [0, 1, 2].map(|a| basis.integral(rho, w_of(a, 1)));
    let mut r2 = [[0.0; 3]; 3];
    for p in 0..3 {
        for e in p..3 {
            let val = if p == e {
                basis.integral(rho, w_of(p, 2))
            } else {
                let mut w = [Weight::One; 3];
                w[p] = Weight::X;
                w[e] = Weight::X;
                basis.integral(rho, w)
            };
            r2[p][e] = val;
            r2[e][p] = val;
        }
    }
    DensityMoments { r0, r1, r2 }
}

impl SystemState {
    pub fn time(&self) -> f64 {
        self.rotation.t
    }

    /// Total fluid mass, exactly vol * mean density.
    pub fn total_mass(&self, basis: &BasisSet) -> f64 {
        basis.integral(&self.fluid.rho, [Weight::One; 3])
    }

    /// Relative defect between the modal fluid mass and the configured
    /// fluid mass.
    pub fn mass_consistency_defect(&self, basis: &BasisSet) -> f64 {
        (self.total_mass(basis) - self.rigid_params.m_fluid).abs() / self.rigid_params.m_fluid
    }

    /// Full material velocity u = v + omega x x + xi on the grid.
    pub fn assemble_u(&self, basis: &BasisSet) -> [Array3<f64>; 3] {
        let dims = basis.grid_dims();
        let xc: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..dims[a])
                    .map(|j| basis.axis(a).node(j) - 0.5 * basis.cavity.lengths[a])
                    .collect()
            })
            .collect();
        let w = self.rigid.omega;
        let xi = self.rigid.xi;
        [0, 1, 2].map(|c| {
            let mut out = basis.inverse_transform(&self.fluid.v[c]);
            let (cp, cq) = ((c + 1) % 3, (c + 2) % 3);
            for ((i, j, k), val) in out.indexed_iter_mut() {
                let x = [xc[0][i], xc[1][j], xc[2][k]];
                *val += w[cp] * x[cq] - w[cq] * x[cp] + xi[c];
            }
            out
        })
    }

    /// Linear momentum of fluid plus body:
    /// P = integral rho u + m_body xi, evaluated exactly.
    pub fn total_linear_momentum(&self, basis: &BasisSet) -> Vec3 {
        let rho = &self.fluid.rho;
        let mom = density_moments(basis, rho);
        let mut p = [0.0; 3];
        for c in 0..3 {
            p[c] = basis.pair(&self.fluid.v[c], rho, [Weight::One; 3]);
        }
        p = add(p, cross(self.rigid.omega, mom.r1));
        p = add(p, scale(self.rigid.xi, mom.r0 + self.rigid_params.m_body));
        p
    }

    /// Angular momentum about the origin:
    /// M = I_body omega + integral rho x cross u.
    pub fn total_angular_momentum(&self, basis: &BasisSet) -> Vec3 {
        let rho = &self.fluid.rho;
        let mom = density_moments(basis, rho);
        let mut m = mat_vec(&self.rigid_params.i_body, self.rigid.omega);
        // integral rho x cross v
        for c in 0..3 {
            let (p, e) = ((c + 1) % 3, (c + 2) % 3);
            let mut wp = [Weight::One; 3];
            wp[p] = Weight::X;
            let mut we = [Weight::One; 3];
            we[e] = Weight::X;
            m[c] += basis.pair(&self.fluid.v[e], rho, wp) - basis.pair(&self.fluid.v[p], rho, we);
        }
        // integral rho x cross (omega cross x) = (tr R2 - R2) omega
        m = add(m, mat_vec(&mom.inertia(), self.rigid.omega));
        // integral rho x cross xi
        m = add(m, cross(mom.r1, self.rigid.xi));
        m
    }

    /// Choose xi so the total linear momentum vanishes.
    pub fn enforce_linear_constraint(&mut self, basis: &BasisSet) {
        let rho = &self.fluid.rho;
        let mom = density_moments(basis, rho);
        let mut p = [0.0; 3];
        for c in 0..3 {
            p[c] = basis.pair(&self.fluid.v[c], rho, [Weight::One; 3]);
        }
        p = add(p, cross(self.rigid.omega, mom.r1));
        self.rigid.xi = scale(p, -1.0 / (mom.r0 + self.rigid_params.m_body));
    }

    pub fn min_nodal_density(&self, basis: &BasisSet) -> f64 {
        basis
            .inverse_transform(&self.fluid.rho)
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// Err when any density node sits below the positivity floor.
    pub fn check_positivity(&self, basis: &BasisSet) -> Result<f64> {
        let min = self.min_nodal_density(basis);
        let floor = POSITIVITY_FLOOR_FRACTION * self.fluid.mean_density();
        if min < floor {
            Err(CavError::Positivity { min, floor })
        } else {
            Ok(min)
        }
    }
}
