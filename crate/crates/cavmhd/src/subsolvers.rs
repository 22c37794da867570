//! Time stepping: the implicit Galerkin momentum solve over the
//! coupled rigid + fluid velocity space, the continuity and induction
//! updates, and the Picard / Gauss-Seidel sweep tying them together.
//!
//! Conventions used throughout:
//!
//! * The momentum unknown is U = (omega, xi, v-hat) in Y_n. Rows of the
//!   discrete system are functional values against the basis tests
//!   (rigid motions and sine modes); `YnVec` stores both primal
//!   coefficients and such dual rows.
//! * The time term is conservative: M_new U_new = M_old U_old
//!   + dt * forces, with the mass operator built from the full
//!   (non-dealiased) density frozen per Picard sweep. Forces use the
//!   dealiased copy.
//! * Only the mu Laplacian is implicit in momentum. The bulk viscous
//!   part couples parities and stays explicit; `bulk_stable_dt` bounds
//!   the step for it.
//! * Translation rows of pressure, viscous stress, Lorentz force and
//!   transport vanish identically in the gradient-form pairing (the
//!   gradient of a translation is zero, and internal stresses cannot
//!   move the coupled system), so they are never assembled.

use ndarray::Array3;

use crate::cavity_basis::{BasisSet, TaggedField, Weight, VELOCITY_PARITY};
use crate::error::{CavError, Result};
use crate::field_operators::{
    divergence, induction_transport, laplacian, lorentz_force, mass_flux, pressure_modal,
    solenoidal_project, FieldSum,
};
use crate::frame_kinematics::{advance_rotation, RigidParams};
use crate::linalg::{add, cross, dot, mat_add, mat_vec, norm, scale, solve_dense, sub, Vec3};
use crate::rigid_coupling::second_moment_from_inertia;
use crate::system_state::{density_moments, DensityMoments, PhysParams, RegParams, SystemState};

/// Element of the coupled momentum space (or of its dual; the layout
/// is the same and the code keeps track of which is which).
#[derive(Clone, Debug)]
pub struct YnVec {
    pub omega: Vec3,
    pub xi: Vec3,
    pub v: [TaggedField; 3],
}

impl YnVec {
    pub fn zeros(basis: &BasisSet) -> Self {
        YnVec {
            omega: [0.0; 3],
            xi: [0.0; 3],
            v: basis.zeros_velocity(),
        }
    }

    pub fn from_state(state: &SystemState) -> Self {
        YnVec {
            omega: state.rigid.omega,
            xi: state.rigid.xi,
            v: state.fluid.v.clone(),
        }
    }

    pub fn dot(&self, other: &YnVec) -> f64 {
        let mut s = 0.0;
        for c in 0..3 {
            s += self.omega[c] * other.omega[c] + self.xi[c] * other.xi[c];
        }
        for c in 0..3 {
            s += self.v[c]
                .c
                .iter()
                .zip(other.v[c].c.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn axpy(&mut self, a: f64, other: &YnVec) {
        for c in 0..3 {
            self.omega[c] += a * other.omega[c];
            self.xi[c] += a * other.xi[c];
            self.v[c].c.zip_mut_with(&other.v[c].c, |x, y| *x += a * y);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for c in 0..3 {
            self.omega[c] *= a;
            self.xi[c] *= a;
            self.v[c].c.mapv_inplace(|x| a * x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().all(|x| x.is_finite())
            && self.xi.iter().all(|x| x.is_finite())
            && self.v.iter().all(|f| f.c.iter().all(|x| x.is_finite()))
    }
}

/// Implicit-explicit splitting flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImexScheme {
    /// first order; explicit terms at the current Picard iterate
    BackwardEuler,
    /// trapezoid rule, second order; explicit terms at the average of
    /// the old state and the iterate
    Trapezoid,
}

impl ImexScheme {
    /// Weight of the implicit diffusion on the new time level.
    pub fn theta(self) -> f64 {
        match self {
            ImexScheme::BackwardEuler => 1.0,
            ImexScheme::Trapezoid => 0.5,
        }
    }

    pub fn order(self) -> usize {
        match self {
            ImexScheme::BackwardEuler => 1,
            ImexScheme::Trapezoid => 2,
        }
    }
}

/// One balance law inside the Gauss-Seidel sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Equation {
    Continuity,
    Induction,
    Momentum,
}

/// Knobs of the coupled time step.
#[derive(Clone, Copy, Debug)]
pub struct StepConfig {
    pub dt: f64,
    pub scheme: ImexScheme,
    pub picard_max: usize,
    pub picard_tol: f64,
    pub ordering: [Equation; 3],
    /// re-slave xi to the zero-momentum constraint after the sweep
    pub enforce_constraint: bool,
    pub pcg_tol: f64,
    pub pcg_maxiter: usize,
}

impl StepConfig {
    pub fn new(dt: f64, scheme: ImexScheme) -> Self {
        StepConfig {
            dt,
            scheme,
            picard_max: 2,
            picard_tol: 1e-10,
            ordering: [Equation::Continuity, Equation::Induction, Equation::Momentum],
            enforce_constraint: false,
            pcg_tol: 1e-11,
            pcg_maxiter: 400,
        }
    }
}

/// What one coupled step did.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    pub picard_sweeps: usize,
    pub picard_change: f64,
    pub pcg_iters: usize,
    pub pcg_residual: f64,
}

/// The operator of the implicit momentum solve,
/// A = M_rho + shift * (grad, grad), where M_rho is the mass pairing of
/// the density-weighted velocity u = v + omega x x + xi over Y_n
/// (including the body inertia) and the Laplacian term only touches
/// fluid rows.
pub struct GalerkinMomentumSystem<'a> {
    basis: &'a BasisSet,
    rigid: RigidParams,
    /// dt * theta * mu
    pub shift: f64,
    rho: TaggedField,
    rho_nodal: Array3<f64>,
    moments: DensityMoments,
    /// <rho, psi_k> per velocity mode
    t0: Array3<f64>,
    /// <rho x_q, psi_k> per velocity mode
    t1: [Array3<f64>; 3],
    vel_symbol: Array3<f64>,
    vel_norms: Array3<f64>,
}

impl<'a> GalerkinMomentumSystem<'a> {
    pub fn new(
        basis: &'a BasisSet,
        rho: &TaggedField,
        rigid: RigidParams,
        shift: f64,
    ) -> Self {
        let dims = basis.velocity_dims();
        let t0 = basis.pair_tests(rho, VELOCITY_PARITY, dims, [Weight::One; 3]);
        let t1 = [0, 1, 2].map(|q| {
            let mut w = [Weight::One; 3];
            w[q] = Weight::X;
            basis.pair_tests(rho, VELOCITY_PARITY, dims, w)
        });
        GalerkinMomentumSystem {
            basis,
            rigid,
            shift,
            rho: rho.clone(),
            rho_nodal: basis.inverse_transform(rho),
            moments: density_moments(basis, rho),
            t0,
            t1,
            vel_symbol: basis.laplacian_symbol(VELOCITY_PARITY, dims),
            vel_norms: basis.mode_norms(VELOCITY_PARITY, dims),
        }
    }

    pub fn basis(&self) -> &BasisSet {
        self.basis
    }

    /// Mass rows only: dual values of <rho_S u, phi> for all tests.
    pub fn mass_apply(&self, u: &YnVec) -> YnVec {
        let mut out = YnVec::zeros(self.basis);
        let mom = &self.moments;

        // fluid rows: <rho v_c, psi> + sum_pq eps_cpq omega_p t1_q
        //             + xi_c t0
        for c in 0..3 {
            let prod = self.basis.forward_full(
                &(&self.rho_nodal * &self.basis.inverse_transform(&u.v[c])),
                VELOCITY_PARITY,
            );
            let dims = self.basis.velocity_dims();
            let mut rows =
                self.basis
                    .pair_tests(&prod, VELOCITY_PARITY, dims, [Weight::One; 3]);
            let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
            // eps_{c, c+1, c+2} = +1
            rows.scaled_add(u.omega[p1], &self.t1[p2]);
            rows.scaled_add(-u.omega[p2], &self.t1[p1]);
            rows.scaled_add(u.xi[c], &self.t0);
            out.v[c].c = rows;
        }

        // omega rows: int rho x cross v + (I_body + fluid inertia) omega
        //             + R1 cross xi
        let mut mw = [0.0; 3];
        for p in 0..3 {
            let (q1, q2) = ((p + 1) % 3, (p + 2) % 3);
            mw[p] += (&self.t1[q1] * &u.v[q2].c).sum() - (&self.t1[q2] * &u.v[q1].c).sum();
        }
        let inertia = mat_add(&mom.inertia(), &self.rigid.i_body);
        mw = add(mw, mat_vec(&inertia, u.omega));
        mw = add(mw, cross(mom.r1, u.xi));
        out.omega = mw;

        // xi rows: int rho v + omega cross R1 + (m_F + m_B) xi
        let mut px = [0.0; 3];
        for d in 0..3 {
            px[d] = (&self.t0 * &u.v[d].c).sum();
        }
        px = add(px, cross(u.omega, mom.r1));
        px = add(px, scale(u.xi, mom.r0 + self.rigid.m_body));
        out.xi = px;

        out
    }

    /// Full operator A = M + shift * stiffness (fluid rows only).
    pub fn apply(&self, u: &YnVec) -> YnVec {
        let mut out = self.mass_apply(u);
        if self.shift != 0.0 {
            for c in 0..3 {
                let visc = &u.v[c].c * &self.vel_symbol * &self.vel_norms * self.shift;
                out.v[c].c += &visc;
            }
        }
        out
    }

    /// Dual rows of the mu-Laplacian bilinear form alone,
    /// mu <grad v, grad psi> (used by the trapezoid right-hand side).
    pub fn laplace_rows(&self, v: &[TaggedField; 3], mu: f64) -> YnVec {
        let mut out = YnVec::zeros(self.basis);
        for c in 0..3 {
            out.v[c].c = &v[c].c * &self.vel_symbol * &self.vel_norms * mu;
        }
        out
    }

    /// Exact inverse of the operator frozen at the mean density.
    pub fn preconditioner(&self) -> MeanDensityPreconditioner {
        MeanDensityPreconditioner::new(self)
    }
}

/// Exact solver for A at uniform density rho-bar: the fluid block is
/// diagonal there and the rigid-fluid coupling is a rank-6 arrow,
/// eliminated through a 6x6 Schur complement. At uniform density the
/// rigid block itself is block diagonal (the first moment vanishes).
pub struct MeanDensityPreconditioner {
    diag: Array3<f64>,
    t0: Array3<f64>,
    t1: [Array3<f64>; 3],
    schur: [[f64; 6]; 6],
}

impl MeanDensityPreconditioner {
    fn new(sys: &GalerkinMomentumSystem) -> Self {
        let basis = sys.basis;
        let dims = basis.velocity_dims();
        let rho_bar = sys.rho.c[[0, 0, 0]];
        let diag = &sys.vel_norms * rho_bar + &sys.vel_norms * &sys.vel_symbol * sys.shift;

        // coupling moments of the uniform density
        let mut flat = basis.zeros_density();
        flat.c[[0, 0, 0]] = rho_bar;
        let t0 = basis.pair_tests(&flat, VELOCITY_PARITY, dims, [Weight::One; 3]);
        let t1 = [0, 1, 2].map(|q| {
            let mut w = [Weight::One; 3];
            w[q] = Weight::X;
            basis.pair_tests(&flat, VELOCITY_PARITY, dims, w)
        });

        // rigid block at uniform density
        let mom = density_moments(basis, &flat);
        let inertia = mat_add(&mom.inertia(), &sys.rigid.i_body);
        let mass = mom.r0 + sys.rigid.m_body;
        let mut r = [[0.0f64; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = inertia[i][j];
            }
            r[3 + i][3 + i] = mass;
        }

        let mut pc = MeanDensityPreconditioner {
            diag,
            t0,
            t1,
            schur: r,
        };
        // S = R - B D^-1 B^T, built by pushing rigid unit vectors
        // through the coupling
        for col in 0..6 {
            let mut e = [0.0; 6];
            e[col] = 1.0;
            let mut z = pc.coupling_transpose(basis, e);
            for c in 0..3 {
                z[c].c /= &pc.diag;
            }
            let bz = pc.coupling(&z);
            for row in 0..6 {
                pc.schur[row][col] -= bz[row];
            }
        }
        pc
    }

    /// B w: rigid rows of the coupling applied to fluid coefficients.
    fn coupling(&self, v: &[TaggedField; 3]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for p in 0..3 {
            let (q1, q2) = ((p + 1) % 3, (p + 2) % 3);
            out[p] = (&self.t1[q1] * &v[q2].c).sum() - (&self.t1[q2] * &v[q1].c).sum();
        }
        for d in 0..3 {
            out[3 + d] = (&self.t0 * &v[d].c).sum();
        }
        out
    }

    /// B^T r: fluid rows of the coupling from rigid values.
    fn coupling_transpose(&self, basis: &BasisSet, r: [f64; 6]) -> [TaggedField; 3] {
        let mut out = basis.zeros_velocity();
        for c in 0..3 {
            let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
            out[c].c.scaled_add(r[p1], &self.t1[p2]);
            out[c].c.scaled_add(-r[p2], &self.t1[p1]);
            out[c].c.scaled_add(r[3 + c], &self.t0);
        }
        out
    }

    pub fn apply(&self, basis: &BasisSet, rhs: &YnVec) -> YnVec {
        // w1 = D^-1 f
        let mut w1 = [0, 1, 2].map(|c| rhs.v[c].clone());
        for c in 0..3 {
            w1[c].c /= &self.diag;
        }
        // solve S r = g - B w1
        let bw = self.coupling(&w1);
        let g = [
            rhs.omega[0] - bw[0],
            rhs.omega[1] - bw[1],
            rhs.omega[2] - bw[2],
            rhs.xi[0] - bw[3],
            rhs.xi[1] - bw[4],
            rhs.xi[2] - bw[5],
        ];
        let mut mat: Vec<Vec<f64>> = (0..6)
            .map(|i| self.schur[i].to_vec())
            .collect();
        let mut sol = g;
        solve_dense(&mut mat, &mut sol);
        // w = D^-1 (f - B^T r)
        let bt = self.coupling_transpose(basis, sol);
        let mut v = [0, 1, 2].map(|c| rhs.v[c].clone());
        for c in 0..3 {
            v[c].c -= &bt[c].c;
            v[c].c /= &self.diag;
        }
        YnVec {
            omega: [sol[0], sol[1], sol[2]],
            xi: [sol[3], sol[4], sol[5]],
            v,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PcgStats {
    pub iters: usize,
    pub rel_residual: f64,
}

/// Preconditioned conjugate gradients on the momentum system.
pub fn momentum_step(
    sys: &GalerkinMomentumSystem,
    precond: &MeanDensityPreconditioner,
    rhs: &YnVec,
    x0: &YnVec,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(YnVec, PcgStats)> {
    let basis = sys.basis();
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok((YnVec::zeros(basis), PcgStats::default()));
    }
    let mut x = x0.clone();
    let ax = sys.apply(&x);
    let mut r = rhs.clone();
    r.axpy(-1.0, &ax);
    let mut z = precond.apply(basis, &r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut stats = PcgStats {
        iters: 0,
        rel_residual: r.norm() / rhs_norm,
    };
    if stats.rel_residual <= rel_tol {
        return Ok((x, stats));
    }
    for it in 1..=max_iter {
        let ap = sys.apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(CavError::SolverDiverged {
                solver: "momentum-pcg",
                residual: stats.rel_residual,
                iters: it,
            });
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        stats.iters = it;
        stats.rel_residual = r.norm() / rhs_norm;
        if !x.is_finite() {
            return Err(CavError::NonFinite("momentum iterate"));
        }
        if stats.rel_residual <= rel_tol {
            return Ok((x, stats));
        }
        z = precond.apply(basis, &r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.axpy(beta, &p);
        p = p_new;
    }
    Err(CavError::SolverDiverged {
        solver: "momentum-pcg",
        residual: stats.rel_residual,
        iters: max_iter,
    })
}

/// Density update: (1 + theta eps dt |kappa|^2) rho_new =
/// (1 - (1-theta) eps dt |kappa|^2) rho_old - dt proj(div(rho v)).
/// The flux divergence is evaluated once per sweep by the caller at
/// the scheme's evaluation fields. The constant mode is untouched by
/// construction: mass conservation is termwise exact.
pub fn continuity_step(
    basis: &BasisSet,
    rho_old: &TaggedField,
    flux_div: &FieldSum,
    eps: f64,
    dt: f64,
    scheme: ImexScheme,
) -> TaggedField {
    let dims = basis.density_dims();
    let proj = flux_div.l2_project(basis, rho_old.par, dims);
    let sym = basis.laplacian_symbol(rho_old.par, dims);
    let th = scheme.theta();
    let mut c = Array3::zeros(dims);
    ndarray::Zip::from(&mut c)
        .and(&rho_old.c)
        .and(&proj.c)
        .and(&sym)
        .for_each(|out, &old, &p, &k2| {
            let explicit = 1.0 - (1.0 - th) * eps * dt * k2;
            *out = (explicit * old - dt * p) / (1.0 + th * eps * dt * k2);
        });
    TaggedField { par: rho_old.par, c }
}

/// Induction update with implicit resistive diffusion (resistivity is
/// one by nondimensionalization) and explicit transport at the caller's
/// evaluation fields; finishes with the solenoidal projection, which
/// commutes with the diagonal resistive solve.
pub fn induction_step(
    basis: &BasisSet,
    b_old: &[TaggedField; 3],
    v_eval: &[TaggedField; 3],
    b_eval: &[TaggedField; 3],
    dt: f64,
    scheme: ImexScheme,
) -> [TaggedField; 3] {
    let transport = induction_transport(basis, v_eval, b_eval);
    let th = scheme.theta();
    let mut out = [0, 1, 2].map(|i| {
        let dims = [
            b_old[i].c.shape()[0],
            b_old[i].c.shape()[1],
            b_old[i].c.shape()[2],
        ];
        let proj = transport[i].l2_project(basis, b_old[i].par, dims);
        let sym = basis.laplacian_symbol(b_old[i].par, dims);
        let mut c = Array3::zeros(dims);
        ndarray::Zip::from(&mut c)
            .and(&b_old[i].c)
            .and(&proj.c)
            .and(&sym)
            .for_each(|o, &old, &p, &k2| {
                let explicit = 1.0 - (1.0 - th) * dt * k2;
                *o = (explicit * old - dt * p) / (1.0 + th * dt * k2);
            });
        TaggedField {
            par: b_old[i].par,
            c,
        }
    });
    solenoidal_project(basis, &mut out);
    out
}

/// Explicit momentum forces as dual rows over Y_n: transport and frame
/// rotation, pressure gradient, bulk viscous stress, Lorentz force and
/// the mass-diffusion momentum correction. The implicit mu-Laplacian is
/// NOT included. Translation rows receive only the rotation force
/// (-omega x P structure); all stress-like translation rows vanish
/// identically in the gradient form.
pub fn explicit_forces(
    basis: &BasisSet,
    rho: &TaggedField,
    v: &[TaggedField; 3],
    b: &[TaggedField; 3],
    omega: Vec3,
    xi: Vec3,
    phys: &PhysParams,
    reg: &RegParams,
    rigid: &RigidParams,
) -> Result<YnVec> {
    let dims = basis.velocity_dims();
    let mut out = YnVec::zeros(basis);
    let rho_t = basis.nonlinear_copy(rho);
    let mom_t = density_moments(basis, &rho_t);
    let vt = [0, 1, 2].map(|c| basis.nonlinear_copy(&v[c]));

    // ---- transport: force functional +<T, grad phi> with
    //      T_ac = m~_a u_c, m = dealiased rho v ----
    let m_raw = mass_flux(basis, rho, v);
    let m = [0, 1, 2].map(|a| basis.nonlinear_copy(&m_raw[a]));
    let m_div = divergence(basis, &m);
    let m_int = [0, 1, 2].map(|a| basis.integral(&m[a], [Weight::One; 3]));
    // fluid rows, direct form -<div T, psi> (equivalent for tests that
    // vanish on the boundary)
    for c in 0..3 {
        let mut rows = Array3::zeros(dims);
        for a in 0..3 {
            let part = basis.deriv(&basis.product(&m[a], &vt[c]), a);
            rows -= &basis.pair_tests(&part, VELOCITY_PARITY, dims, [Weight::One; 3]);
        }
        // sweep part: -<div(m) W_c + (omega x m)_c, psi>
        let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
        for part in &m_div.parts {
            // W_c = (omega x x)_c + xi_c = omega_p1 x_p2 - omega_p2 x_p1 + xi_c
            let mut w = [Weight::One; 3];
            w[p2] = Weight::X;
            rows.scaled_add(
                -omega[p1],
                &basis.pair_tests(part, VELOCITY_PARITY, dims, w),
            );
            let mut w = [Weight::One; 3];
            w[p1] = Weight::X;
            rows.scaled_add(
                omega[p2],
                &basis.pair_tests(part, VELOCITY_PARITY, dims, w),
            );
            rows.scaled_add(
                -xi[c],
                &basis.pair_tests(part, VELOCITY_PARITY, dims, [Weight::One; 3]),
            );
        }
        rows.scaled_add(
            -omega[p1],
            &basis.pair_tests(&m[p2], VELOCITY_PARITY, dims, [Weight::One; 3]),
        );
        rows.scaled_add(
            omega[p2],
            &basis.pair_tests(&m[p1], VELOCITY_PARITY, dims, [Weight::One; 3]),
        );
        out.v[c].c += &rows;
    }
    // rotation rows of transport: torque_p = sum_ac eps_cpa int T_ac
    for p in 0..3 {
        let mut tq = 0.0;
        for a in 0..3 {
            for c in 0..3 {
                let eps = levi(c, p, a);
                if eps == 0.0 {
                    continue;
                }
                // int m~_a u_c = int m_a v_c + int m_a W_c
                let mut t_ac = basis.pair(&m[a], &vt[c], [Weight::One; 3]);
                let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
                let mut w = [Weight::One; 3];
                w[p2] = Weight::X;
                t_ac += omega[p1] * basis.integral(&m[a], w);
                let mut w = [Weight::One; 3];
                w[p1] = Weight::X;
                t_ac -= omega[p2] * basis.integral(&m[a], w);
                t_ac += xi[c] * m_int[a];
                tq += eps * t_ac;
            }
        }
        out.omega[p] += tq;
    }

    // ---- frame rotation force -rho_S omega x u ----
    // fluid rows: -(omega x m)_c - rho (omega x (omega x x + xi))_c
    let rho_rows = basis.pair_tests(&rho_t, VELOCITY_PARITY, dims, [Weight::One; 3]);
    let rho_xrows = [0, 1, 2].map(|q| {
        let mut w = [Weight::One; 3];
        w[q] = Weight::X;
        basis.pair_tests(&rho_t, VELOCITY_PARITY, dims, w)
    });
    let wxx_coef = |c: usize, q: usize| -> f64 {
        // (omega x (omega x x))_c = omega_c (omega . x) - |omega|^2 x_c
        omega[c] * omega[q] - if c == q { dot(omega, omega) } else { 0.0 }
    };
    let wxxi = cross(omega, xi);
    for c in 0..3 {
        let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
        let mut rows = Array3::zeros(dims);
        rows.scaled_add(
            -omega[p1],
            &basis.pair_tests(&m[p2], VELOCITY_PARITY, dims, [Weight::One; 3]),
        );
        rows.scaled_add(
            omega[p2],
            &basis.pair_tests(&m[p1], VELOCITY_PARITY, dims, [Weight::One; 3]),
        );
        for q in 0..3 {
            let coef = wxx_coef(c, q);
            if coef != 0.0 {
                rows.scaled_add(-coef, &rho_xrows[q]);
            }
        }
        rows.scaled_add(-wxxi[c], &rho_rows);
        out.v[c].c += &rows;
    }
    // translation rows: -omega x P at the evaluation fields (body
    // included); this is what makes |P| invariant under pure rotation
    let mut p_eval = [0.0; 3];
    for c in 0..3 {
        p_eval[c] = m_int[c];
    }
    p_eval = add(p_eval, cross(omega, mom_t.r1));
    p_eval = add(p_eval, scale(xi, mom_t.r0 + rigid.m_body));
    out.xi = sub(out.xi, cross(omega, p_eval));
    // rotation rows: -int rho_S x cross (omega x u), fluid + body
    {
        // fluid x cross (omega x v): sum over eps with first moments of m
        let mut j_mom = [[0.0; 3]; 3]; // j_mom[q][e] = int m_e x_q
        for q in 0..3 {
            for e in 0..3 {
                let mut w = [Weight::One; 3];
                w[q] = Weight::X;
                j_mom[q][e] = basis.integral(&m[e], w);
            }
        }
        let mut torque = [0.0; 3];
        for p in 0..3 {
            let mut s = 0.0;
            for q in 0..3 {
                for c in 0..3 {
                    let eps = levi(p, q, c);
                    if eps == 0.0 {
                        continue;
                    }
                    // (omega x m-moment)_c with moment vector j_mom[q][.]
                    let (a1, a2) = ((c + 1) % 3, (c + 2) % 3);
                    s += eps * (omega[a1] * j_mom[q][a2] - omega[a2] * j_mom[q][a1]);
                }
            }
            torque[p] = s;
        }
        // centrifugal part: int rho x cross (omega x (omega x x)) =
        // (R2 omega) x omega, fluid (dealiased moments) + body; the
        // body's xi part vanishes (center of mass at the origin)
        let r2_total = mat_add(&mom_t.r2, &second_moment_from_inertia(&rigid.i_body));
        let centri = cross(mat_vec(&r2_total, omega), omega);
        // fluid xi part: int rho x cross (omega x xi) = R1 x (omega x xi)
        let xi_part = cross(mom_t.r1, cross(omega, xi));
        out.omega = sub(out.omega, add(torque, add(centri, xi_part)));
    }

    // ---- pressure: fluid rows -<grad p, psi>; rigid rows vanish ----
    let p_hat = pressure_modal(basis, rho, phys.a, phys.gamma, reg.delta, reg.beta)?;
    for c in 0..3 {
        let gp = basis.deriv(&p_hat, c);
        out.v[c].c -= &basis.pair_tests(&gp, VELOCITY_PARITY, dims, [Weight::One; 3]);
    }

    // ---- explicit bulk viscous force +(lambda + mu/3) grad div v ----
    let bulk = phys.lambda + phys.mu / 3.0;
    if bulk != 0.0 {
        let div_v = divergence(basis, v);
        for c in 0..3 {
            for part in &div_v.parts {
                let dp = basis.deriv(part, c);
                out.v[c].c.scaled_add(
                    bulk,
                    &basis.pair_tests(&dp, VELOCITY_PARITY, dims, [Weight::One; 3]),
                );
            }
        }
    }

    // ---- Lorentz force (curl b) x b; rigid rows vanish in the
    //      gradient form (internal Maxwell stresses move nothing) ----
    let lor = lorentz_force(basis, b);
    for c in 0..3 {
        out.v[c].c += &basis.pair_tests(&lor[c], VELOCITY_PARITY, dims, [Weight::One; 3]);
    }

    // ---- mass-diffusion momentum correction eps div(u (x) grad rho):
    //      fluid rows direct, translation rows vanish (grad rho has
    //      zero normal trace termwise), rotation row -eps int grad rho
    //      x u ----
    if reg.eps > 0.0 {
        let grho = [0, 1, 2].map(|a| basis.deriv(&rho_t, a));
        let lap_rho = laplacian(basis, &rho_t);
        for c in 0..3 {
            let mut rows = Array3::zeros(dims);
            for a in 0..3 {
                // modal part d_a(d_a rho v_c)
                let part = basis.deriv(&basis.product(&grho[a], &vt[c]), a);
                rows += &basis.pair_tests(&part, VELOCITY_PARITY, dims, [Weight::One; 3]);
            }
            // sweep part: d_a(d_a rho W_c) = (lap rho) W_c + (grad rho . grad W_c)
            let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
            let mut w = [Weight::One; 3];
            w[p2] = Weight::X;
            rows.scaled_add(
                omega[p1],
                &basis.pair_tests(&lap_rho, VELOCITY_PARITY, dims, w),
            );
            let mut w = [Weight::One; 3];
            w[p1] = Weight::X;
            rows.scaled_add(
                -omega[p2],
                &basis.pair_tests(&lap_rho, VELOCITY_PARITY, dims, w),
            );
            rows.scaled_add(
                xi[c],
                &basis.pair_tests(&lap_rho, VELOCITY_PARITY, dims, [Weight::One; 3]),
            );
            // grad rho . grad (omega x x)_c = (omega x grad rho)_c
            rows.scaled_add(
                omega[p1],
                &basis.pair_tests(&grho[p2], VELOCITY_PARITY, dims, [Weight::One; 3]),
            );
            rows.scaled_add(
                -omega[p2],
                &basis.pair_tests(&grho[p1], VELOCITY_PARITY, dims, [Weight::One; 3]),
            );
            out.v[c].c.scaled_add(reg.eps, &rows);
        }
        // rotation rows: -eps sum_ac eps_cpa int u_c d_a rho
        for p in 0..3 {
            let mut s = 0.0;
            for a in 0..3 {
                for c in 0..3 {
                    let e = levi(c, p, a);
                    if e == 0.0 {
                        continue;
                    }
                    let mut val = basis.pair(&grho[a], &vt[c], [Weight::One; 3]);
                    let (p1, p2) = ((c + 1) % 3, (c + 2) % 3);
                    let mut w = [Weight::One; 3];
                    w[p2] = Weight::X;
                    val += omega[p1] * basis.integral(&grho[a], w);
                    let mut w = [Weight::One; 3];
                    w[p1] = Weight::X;
                    val -= omega[p2] * basis.integral(&grho[a], w);
                    val += xi[c] * basis.integral(&grho[a], [Weight::One; 3]);
                    s += e * val;
                }
            }
            out.omega[p] -= reg.eps * s;
        }
    }

    if !out.is_finite() {
        return Err(CavError::NonFinite("explicit momentum forces"));
    }
    Ok(out)
}

fn levi(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// Evaluation fields of the explicit terms for one sweep.
struct EvalFields {
    rho: TaggedField,
    v: [TaggedField; 3],
    b: [TaggedField; 3],
    omega: Vec3,
    xi: Vec3,
}

fn eval_fields(old: &SystemState, iterate: &SystemState, scheme: ImexScheme) -> EvalFields {
    match scheme {
        ImexScheme::BackwardEuler => EvalFields {
            rho: iterate.fluid.rho.clone(),
            v: iterate.fluid.v.clone(),
            b: iterate.fluid.b.clone(),
            omega: iterate.rigid.omega,
            xi: iterate.rigid.xi,
        },
        ImexScheme::Trapezoid => {
            let avg = |a: &TaggedField, b: &TaggedField| TaggedField {
                par: a.par,
                c: (&a.c + &b.c) * 0.5,
            };
            EvalFields {
                rho: avg(&old.fluid.rho, &iterate.fluid.rho),
                v: [0, 1, 2].map(|c| avg(&old.fluid.v[c], &iterate.fluid.v[c])),
                b: [0, 1, 2].map(|c| avg(&old.fluid.b[c], &iterate.fluid.b[c])),
                omega: [0, 1, 2].map(|c| 0.5 * (old.rigid.omega[c] + iterate.rigid.omega[c])),
                xi: [0, 1, 2].map(|c| 0.5 * (old.rigid.xi[c] + iterate.rigid.xi[c])),
            }
        }
    }
}

/// Relative change between two iterates, the Picard stopping measure.
fn iterate_change(a: &SystemState, b: &SystemState) -> f64 {
    let field_change = |x: &TaggedField, y: &TaggedField| -> f64 {
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (p, q) in x.c.iter().zip(y.c.iter()) {
            diff += (p - q) * (p - q);
            scale += q * q;
        }
        (diff / scale.max(1e-300)).sqrt().min(diff.sqrt())
    };
    let mut ch = field_change(&a.fluid.rho, &b.fluid.rho);
    for c in 0..3 {
        ch = ch.max(field_change(&a.fluid.v[c], &b.fluid.v[c]));
        ch = ch.max(field_change(&a.fluid.b[c], &b.fluid.b[c]));
        ch = ch.max((a.rigid.omega[c] - b.rigid.omega[c]).abs());
        ch = ch.max((a.rigid.xi[c] - b.rigid.xi[c]).abs());
    }
    ch
}

/// One coupled time step: Gauss-Seidel over the balances in the
/// configured order, wrapped in a Picard loop, followed by the
/// positivity guard, the optional momentum constraint, and the
/// rotation update. The returned state is at t + dt; the input is not
/// modified (rejected steps leave no trace).
pub fn coupled_step(
    basis: &BasisSet,
    state: &SystemState,
    cfg: &StepConfig,
) -> Result<(SystemState, StepReport)> {
    let dt = cfg.dt;
    let theta = cfg.scheme.theta();
    let mut report = StepReport::default();

    let old = state;
    let mut iterate = state.clone();

    // conservative time term: M at the old density applied to the old
    // velocity state, fixed for the whole step
    let old_sys = GalerkinMomentumSystem::new(basis, &old.fluid.rho, old.rigid_params, 0.0);
    let u_old = YnVec::from_state(old);
    let mut rhs_base = old_sys.mass_apply(&u_old);
    if cfg.scheme == ImexScheme::Trapezoid {
        let lap_old = old_sys.laplace_rows(&old.fluid.v, old.phys.mu);
        rhs_base.axpy(-0.5 * dt, &lap_old);
    }

    for sweep in 0..cfg.picard_max.max(1) {
        let prev = iterate.clone();
        for eq in cfg.ordering {
            let eval = eval_fields(old, &iterate, cfg.scheme);
            match eq {
                Equation::Continuity => {
                    let flux =
                        crate::field_operators::mass_flux_div(basis, &eval.rho, &eval.v);
                    iterate.fluid.rho = continuity_step(
                        basis,
                        &old.fluid.rho,
                        &flux,
                        old.reg.eps,
                        dt,
                        cfg.scheme,
                    );
                }
                Equation::Induction => {
                    iterate.fluid.b = induction_step(
                        basis,
                        &old.fluid.b,
                        &eval.v,
                        &eval.b,
                        dt,
                        cfg.scheme,
                    );
                }
                Equation::Momentum => {
                    let sys = GalerkinMomentumSystem::new(
                        basis,
                        &iterate.fluid.rho,
                        old.rigid_params,
                        dt * theta * old.phys.mu,
                    );
                    let forces = explicit_forces(
                        basis,
                        &eval.rho,
                        &eval.v,
                        &eval.b,
                        eval.omega,
                        eval.xi,
                        &old.phys,
                        &old.reg,
                        &old.rigid_params,
                    )?;
                    let mut rhs = rhs_base.clone();
                    rhs.axpy(dt, &forces);
                    let precond = sys.preconditioner();
                    let x0 = YnVec::from_state(&iterate);
                    let (u_new, stats) =
                        momentum_step(&sys, &precond, &rhs, &x0, cfg.pcg_tol, cfg.pcg_maxiter)?;
                    report.pcg_iters = report.pcg_iters.max(stats.iters);
                    report.pcg_residual = report.pcg_residual.max(stats.rel_residual);
                    iterate.rigid.omega = u_new.omega;
                    iterate.rigid.xi = u_new.xi;
                    iterate.fluid.v = u_new.v;
                }
            }
        }
        report.picard_sweeps = sweep + 1;
        report.picard_change = iterate_change(&iterate, &prev);
        if report.picard_change < cfg.picard_tol {
            break;
        }
    }

    iterate.check_positivity(basis)?;
    if cfg.enforce_constraint {
        iterate.enforce_linear_constraint(basis);
    }
    let omega_rot = match cfg.scheme {
        ImexScheme::BackwardEuler => iterate.rigid.omega,
        ImexScheme::Trapezoid => [0, 1, 2]
            .map(|c| 0.5 * (old.rigid.omega[c] + iterate.rigid.omega[c])),
    };
    iterate.rotation = advance_rotation(&old.rotation, omega_rot, dt);
    Ok((iterate, report))
}

/// Advective step bound: cfl * min spacing over the fastest signal,
/// counting material speed, magnetic amplitude, sound speed, and the
/// rigid sweep.
pub fn stable_dt(basis: &BasisSet, state: &SystemState, cfl: f64) -> f64 {
    let u = state.assemble_u(basis);
    let mut max_u = 0.0f64;
    for idx in ndarray::indices(u[0].raw_dim()) {
        let s = u[0][idx].powi(2) + u[1][idx].powi(2) + u[2][idx].powi(2);
        max_u = max_u.max(s);
    }
    let max_u = max_u.sqrt();
    let mut max_b = 0.0f64;
    let bn = [0, 1, 2].map(|c| basis.inverse_transform(&state.fluid.b[c]));
    for idx in ndarray::indices(bn[0].raw_dim()) {
        let s = bn[0][idx].powi(2) + bn[1][idx].powi(2) + bn[2][idx].powi(2);
        max_b = max_b.max(s);
    }
    let max_b = max_b.sqrt();
    let rho_n = basis.inverse_transform(&state.fluid.rho);
    let g = state.phys.gamma;
    let mut max_c = 0.0f64;
    for &r in rho_n.iter() {
        if r > 0.0 {
            max_c = max_c.max(g * state.phys.a * r.powf(g - 1.0));
        }
    }
    let max_c = max_c.sqrt();
    let sweep = norm(state.rigid.omega) * basis.cavity.diameter() + norm(state.rigid.xi);
    let h_min = (0..3)
        .map(|a| basis.axis(a).spacing())
        .fold(f64::INFINITY, f64::min);
    let speed = (max_u + max_b + max_c + sweep).max(1e-12);
    cfl * h_min / speed
}

/// Step bound for the explicit bulk viscous term,
/// dt <= 2 rho_min / ((lambda + mu/3) max kappa_c^2), with a safety
/// factor. Infinite when the bulk coefficient vanishes.
pub fn bulk_stable_dt(basis: &BasisSet, state: &SystemState, safety: f64) -> f64 {
    let bulk = state.phys.lambda + state.phys.mu / 3.0;
    if bulk <= 0.0 {
        return f64::INFINITY;
    }
    let rho_min = state.min_nodal_density(basis).max(0.0);
    let kap_max = (0..3)
        .map(|a| basis.axis(a).kappa(basis.res.n[a] - 1))
        .fold(0.0f64, f64::max);
    safety * 2.0 * rho_min / (bulk * kap_max * kap_max)
}
