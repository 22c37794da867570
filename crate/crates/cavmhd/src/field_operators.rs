//! Differential and nonlinear operators on the cavity bases.
//!
//! A derivative flips the trig family on its axis, so most composite
//! expressions are sums of fields with several different parity tags.
//! `FieldSum` carries such sums; pairings and integrals distribute over
//! the parts and stay exact because every part goes through the
//! closed-form Gram tables.
//!
//! Nonlinear terms follow one rule: operands of a nodal product are
//! capped at the dealias index first (`nonlinear_copy`), and a product
//! result that feeds another product is capped again. Every analysis in
//! that pipeline is then alias-free.

use ndarray::{s, Array3};

use crate::cavity_basis::{
    magnetic_parity, BasisSet, Parity, TaggedField, Weight, DENSITY_PARITY,
};
use crate::error::{CavError, Result};
use crate::linalg::Vec3;
use crate::system_state::SystemState;

/// Sum of modal fields with (possibly) different parity tags. Parts
/// with equal tags are merged on insertion.
#[derive(Clone, Debug, Default)]
pub struct FieldSum {
    pub parts: Vec<TaggedField>,
}

impl FieldSum {
    pub fn new() -> Self {
        FieldSum { parts: Vec::new() }
    }

    pub fn from_field(f: TaggedField) -> Self {
        FieldSum { parts: vec![f] }
    }

    /// Add a term, merging it into an existing part with the same
    /// parity tag (zero-padding shapes as needed).
    pub fn push(&mut self, f: TaggedField) {
        if let Some(p) = self.parts.iter_mut().find(|p| p.par == f.par) {
            if p.c.shape() == f.c.shape() {
                p.c += &f.c;
            } else {
                let dims =
                    [0, 1, 2].map(|a| p.c.shape()[a].max(f.c.shape()[a]));
                let mut c = Array3::zeros(dims);
                c.slice_mut(s![..p.c.shape()[0], ..p.c.shape()[1], ..p.c.shape()[2]])
                    .assign(&p.c);
                let mut dst =
                    c.slice_mut(s![..f.c.shape()[0], ..f.c.shape()[1], ..f.c.shape()[2]]);
                dst += &f.c;
                p.c = c;
            }
        } else {
            self.parts.push(f);
        }
    }

    pub fn push_scaled(&mut self, f: &TaggedField, s: f64) {
        self.push(f.scaled(s));
    }

    pub fn scaled(&self, s: f64) -> FieldSum {
        FieldSum {
            parts: self.parts.iter().map(|p| p.scaled(s)).collect(),
        }
    }

    /// Exact weighted pairing against a single-parity field.
    pub fn pair(&self, basis: &BasisSet, g: &TaggedField, w: [Weight; 3]) -> f64 {
        self.parts.iter().map(|p| basis.pair(p, g, w)).sum()
    }

    /// Exact weighted pairing against another sum.
    pub fn pair_sum(&self, basis: &BasisSet, other: &FieldSum, w: [Weight; 3]) -> f64 {
        self.parts
            .iter()
            .map(|p| other.pair(basis, p, w))
            .sum()
    }

    /// Exact pairings against every test mode of a layout.
    pub fn pair_tests(
        &self,
        basis: &BasisSet,
        test_par: [Parity; 3],
        test_lens: [usize; 3],
        w: [Weight; 3],
    ) -> Array3<f64> {
        let mut out = Array3::zeros(test_lens);
        for p in &self.parts {
            out += &basis.pair_tests(p, test_par, test_lens, w);
        }
        out
    }

    /// L2 projection onto a single-parity layout: Galerkin coefficients
    /// obtained by pairing against each mode and dividing by its norm.
    pub fn l2_project(
        &self,
        basis: &BasisSet,
        par: [Parity; 3],
        dims: [usize; 3],
    ) -> TaggedField {
        let mut c = self.pair_tests(basis, par, dims, [Weight::One; 3]);
        c /= &basis.mode_norms(par, dims);
        TaggedField { par, c }
    }

    pub fn integral(&self, basis: &BasisSet, w: [Weight; 3]) -> f64 {
        self.parts.iter().map(|p| basis.integral(p, w)).sum()
    }

    pub fn eval(&self, basis: &BasisSet, zeta: [f64; 3]) -> f64 {
        self.parts.iter().map(|p| basis.eval(p, zeta)).sum()
    }

    pub fn nodal(&self, basis: &BasisSet) -> Array3<f64> {
        let mut out = Array3::zeros(basis.grid_dims());
        for p in &self.parts {
            out += &basis.inverse_transform(p);
        }
        out
    }

    /// Collapse to a single tagged field, failing when the terms did
    /// not all share one parity.
    pub fn expect_single(mut self) -> Result<TaggedField> {
        match self.parts.len() {
            1 => Ok(self.parts.pop().unwrap()),
            n => Err(CavError::ParityMismatch(format!(
                "expected a single-parity field, got {n} incompatible parts"
            ))),
        }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.parts
            .iter()
            .flat_map(|p| p.c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Gradient; component a has the parity of f with axis a flipped.
pub fn grad(basis: &BasisSet, f: &TaggedField) -> [TaggedField; 3] {
    [0, 1, 2].map(|a| basis.deriv(f, a))
}

/// Divergence of a vector field as a parity sum.
pub fn divergence(basis: &BasisSet, v: &[TaggedField; 3]) -> FieldSum {
    let mut out = FieldSum::new();
    for a in 0..3 {
        out.push(basis.deriv(&v[a], a));
    }
    out
}

/// Curl; each component is a parity sum (the two terms merge whenever
/// the input layout allows it, e.g. for magnetic-parity fields).
pub fn curl(basis: &BasisSet, v: &[TaggedField; 3]) -> [FieldSum; 3] {
    [0, 1, 2].map(|i| {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let mut out = FieldSum::new();
        out.push(basis.deriv(&v[k], j));
        out.push(basis.deriv(&v[j], k).scaled(-1.0));
        out
    })
}

/// Laplacian, diagonal in every tensor trig layout.
pub fn laplacian(basis: &BasisSet, f: &TaggedField) -> TaggedField {
    let dims = [f.c.shape()[0], f.c.shape()[1], f.c.shape()[2]];
    let sym = basis.laplacian_symbol(f.par, dims);
    TaggedField {
        par: f.par,
        c: -(&f.c * &sym),
    }
}

/// Remove the per-wavevector compressive part of a magnetic-layout
/// field: a <- a - kappa (kappa . a) / |kappa|^2. Orthogonal in L2
/// because all components present at one wavevector share the same mode
/// norm. Components whose sine index would be zero do not exist and
/// carry kappa_i = 0, so they are never written.
pub fn solenoidal_project(basis: &BasisSet, b: &mut [TaggedField; 3]) {
    for i in 0..3 {
        debug_assert_eq!(b[i].par, magnetic_parity(i));
    }
    let n = basis.res.n;
    for k0 in 0..n[0] {
        for k1 in 0..n[1] {
            for k2 in 0..n[2] {
                let k = [k0, k1, k2];
                let kap = [0, 1, 2].map(|a| basis.axis(a).kappa(k[a]));
                let k2n = kap[0] * kap[0] + kap[1] * kap[1] + kap[2] * kap[2];
                if k2n == 0.0 {
                    continue;
                }
                let idx = |i: usize| {
                    let mut ix = k;
                    ix[i] -= 1;
                    ix
                };
                let mut dot = 0.0;
                for i in 0..3 {
                    if k[i] >= 1 {
                        dot += kap[i] * b[i].c[idx(i)];
                    }
                }
                if dot == 0.0 {
                    continue;
                }
                let d = dot / k2n;
                for i in 0..3 {
                    if k[i] >= 1 {
                        b[i].c[idx(i)] -= kap[i] * d;
                    }
                }
            }
        }
    }
}

/// Largest modal divergence coefficient of a magnetic-layout field.
///
/// Per wavevector this evaluates the constraint sum kappa . a. A
/// maximum below the rounding floor of the field as a whole (a few
/// ulps of the largest term magnitude anywhere, the same convention a
/// rank test applies to trailing singular values) cannot be
/// distinguished from an exact zero given only the stored
/// coefficients, so it is reported as a hard 0.0; projected fields
/// therefore measure exactly solenoidal while any genuine violation
/// keeps its raw magnitude.
pub fn max_div_coeff(basis: &BasisSet, b: &[TaggedField; 3]) -> f64 {
    for i in 0..3 {
        debug_assert_eq!(b[i].par, magnetic_parity(i));
    }
    let n = basis.res.n;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for k0 in 0..n[0] {
        for k1 in 0..n[1] {
            for k2 in 0..n[2] {
                let k = [k0, k1, k2];
                let mut dot = 0.0;
                for i in 0..3 {
                    if k[i] >= 1 {
                        let mut ix = k;
                        ix[i] -= 1;
                        let term = basis.axis(i).kappa(k[i]) * b[i].c[ix];
                        dot += term;
                        scale = scale.max(term.abs());
                    }
                }
                worst = worst.max(dot.abs());
            }
        }
    }
    if worst > 64.0 * f64::EPSILON * scale {
        worst
    } else {
        0.0
    }
}

/// Barotropic pressure on the grid: a rho^gamma + delta rho^beta,
/// evaluated through exp(gamma ln rho). Fails on any nonpositive node.
pub fn pressure_nodal(
    rho_nodal: &Array3<f64>,
    a: f64,
    gamma: f64,
    delta: f64,
    beta: f64,
) -> Result<Array3<f64>> {
    let mut out = Array3::zeros(rho_nodal.raw_dim());
    for (dst, &r) in out.iter_mut().zip(rho_nodal.iter()) {
        if !(r > 0.0) {
            return Err(CavError::NonpositivePressure(r));
        }
        let lr = r.ln();
        *dst = a * (gamma * lr).exp()
            + if delta > 0.0 { delta * (beta * lr).exp() } else { 0.0 };
    }
    Ok(out)
}

/// Pressure of a modal density, returned in the all-cosine layout at
/// the grid's full cap (the grid projection of the power law).
pub fn pressure_modal(
    basis: &BasisSet,
    rho: &TaggedField,
    a: f64,
    gamma: f64,
    delta: f64,
    beta: f64,
) -> Result<TaggedField> {
    let rt = basis.nonlinear_copy(rho);
    let nodal = basis.inverse_transform(&rt);
    let p = pressure_nodal(&nodal, a, gamma, delta, beta)?;
    Ok(basis.forward_full(&p, DENSITY_PARITY))
}

/// Lorentz force (curl b) x b with capped operands. Component c lands
/// in the magnetic-parity layout of axis c.
pub fn lorentz_force(basis: &BasisSet, b: &[TaggedField; 3]) -> [TaggedField; 3] {
    let bt = [0, 1, 2].map(|i| basis.nonlinear_copy(&b[i]));
    let j: Vec<TaggedField> = (0..3)
        .map(|i| {
            let (jj, kk) = ((i + 1) % 3, (i + 2) % 3);
            let mut cur = basis.deriv(&bt[kk], jj);
            let other = basis.deriv(&bt[jj], kk);
            cur.c -= &other.c;
            basis.nonlinear_copy(&cur)
        })
        .collect();
    [0, 1, 2].map(|c| {
        let (a, bidx) = ((c + 1) % 3, (c + 2) % 3);
        let mut f = basis.product(&j[a], &bt[bidx]);
        let g = basis.product(&j[bidx], &bt[a]);
        f.c -= &g.c;
        debug_assert_eq!(f.par, magnetic_parity(c));
        f
    })
}

/// Dealiased momentum density rho v, the flux of the mass balance.
pub fn mass_flux(basis: &BasisSet, rho: &TaggedField, v: &[TaggedField; 3]) -> [TaggedField; 3] {
    let rt = basis.nonlinear_copy(rho);
    [0, 1, 2].map(|a| basis.product(&rt, &basis.nonlinear_copy(&v[a])))
}

/// div(rho v), exact; its integral vanishes identically because every
/// part is an axis derivative of a sine-family field.
pub fn mass_flux_div(basis: &BasisSet, rho: &TaggedField, v: &[TaggedField; 3]) -> FieldSum {
    divergence(basis, &mass_flux(basis, rho, v))
}

/// Transport side of the induction balance in the body frame,
/// v.grad b + b div v - b.grad v, per component. The rigid sweep
/// velocity drops out of this balance identically, so only v enters.
pub fn induction_transport(
    basis: &BasisSet,
    v: &[TaggedField; 3],
    b: &[TaggedField; 3],
) -> [FieldSum; 3] {
    let vt = [0, 1, 2].map(|a| basis.nonlinear_copy(&v[a]));
    let bt = [0, 1, 2].map(|i| basis.nonlinear_copy(&b[i]));
    let div_v = divergence(basis, &vt);
    [0, 1, 2].map(|i| {
        let mut out = FieldSum::new();
        for a in 0..3 {
            out.push(basis.product(&vt[a], &basis.deriv(&bt[i], a)));
        }
        for part in &div_v.parts {
            out.push(basis.product(&bt[i], part));
        }
        for a in 0..3 {
            out.push(basis.product(&bt[a], &basis.deriv(&vt[i], a)).scaled(-1.0));
        }
        out
    })
}

/// Velocity gradient table g[a][c] = d v_c / d x_a.
pub fn velocity_gradient(basis: &BasisSet, v: &[TaggedField; 3]) -> [[TaggedField; 3]; 3] {
    [0, 1, 2].map(|a| [0, 1, 2].map(|c| basis.deriv(&v[c], a)))
}

/// Viscous stress of a velocity field,
/// S = mu (grad v + grad v^T - 2/3 div v I) + lambda div v I.
pub struct StressField {
    pub mu: f64,
    pub lambda: f64,
    /// grad[a][c] = d v_c / d x_a
    pub grad: [[TaggedField; 3]; 3],
    pub div: FieldSum,
}

impl StressField {
    pub fn of(basis: &BasisSet, v: &[TaggedField; 3], mu: f64, lambda: f64) -> Self {
        StressField {
            mu,
            lambda,
            grad: velocity_gradient(basis, v),
            div: divergence(basis, v),
        }
    }

    /// Tensor component S_ij.
    pub fn component(&self, i: usize, j: usize) -> FieldSum {
        let mut out = FieldSum::new();
        out.push_scaled(&self.grad[i][j], self.mu);
        out.push_scaled(&self.grad[j][i], self.mu);
        if i == j {
            for p in &self.div.parts {
                out.push_scaled(p, self.lambda - 2.0 * self.mu / 3.0);
            }
        }
        out
    }

    /// Exact contraction with a velocity gradient: integral S : grad w.
    pub fn contract_gradient(&self, basis: &BasisSet, wgrad: &[[TaggedField; 3]; 3]) -> f64 {
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                total += self.component(i, j).pair(basis, &wgrad[i][j], [Weight::One; 3]);
            }
        }
        total
    }

    /// Viscous dissipation integral S(grad v) : grad v of the field the
    /// stress was built from.
    pub fn dissipation(&self, basis: &BasisSet) -> f64 {
        self.contract_gradient(basis, &self.grad)
    }
}

/// Strong-form viscous force mu lap v + (lambda + mu/3) grad div v.
pub fn stress_divergence(
    basis: &BasisSet,
    v: &[TaggedField; 3],
    mu: f64,
    lambda: f64,
) -> [FieldSum; 3] {
    let div_v = divergence(basis, v);
    let bulk = lambda + mu / 3.0;
    [0, 1, 2].map(|c| {
        let mut out = FieldSum::from_field(laplacian(basis, &v[c]).scaled(mu));
        for p in &div_v.parts {
            out.push(basis.deriv(p, c).scaled(bulk));
        }
        out
    })
}

/// Rigid sweep velocity omega x x + xi on the grid.
pub fn rigid_velocity_nodal(basis: &BasisSet, omega: Vec3, xi: Vec3) -> [Array3<f64>; 3] {
    let dims = basis.grid_dims();
    [0, 1, 2].map(|c| {
        let (p, q) = ((c + 1) % 3, (c + 2) % 3);
        Array3::from_shape_fn(dims, |(i, j, k)| {
            let x = [
                basis.axis(0).centered_node(i),
                basis.axis(1).centered_node(j),
                basis.axis(2).centered_node(k),
            ];
            omega[p] * x[q] - omega[q] * x[p] + xi[c]
        })
    })
}

/// Frame-rotation source terms, evaluated on the grid: the momentum
/// force rho (omega x u) and the induction pair
/// omega x b - (omega x x + xi) . grad b. The latter cancels against
/// the sweep advection hidden in u . grad b, which is why the modal
/// induction balance only ever sees v.
pub struct RotationTerms {
    pub momentum: [Array3<f64>; 3],
    pub magnetic: [Array3<f64>; 3],
}

pub fn rotation_terms(basis: &BasisSet, state: &SystemState) -> RotationTerms {
    let w = state.rigid.omega;
    let u = state.assemble_u(basis);
    let rho = basis.inverse_transform(&state.fluid.rho);
    let momentum = [0, 1, 2].map(|c| {
        let (p, q) = ((c + 1) % 3, (c + 2) % 3);
        &rho * &(&u[q] * w[p] - &u[p] * w[q])
    });
    let sweep = rigid_velocity_nodal(basis, w, state.rigid.xi);
    let bt = [0, 1, 2].map(|i| basis.nonlinear_copy(&state.fluid.b[i]));
    let b_nodal = [0, 1, 2].map(|i| basis.inverse_transform(&bt[i]));
    let magnetic = [0, 1, 2].map(|i| {
        let (p, q) = ((i + 1) % 3, (i + 2) % 3);
        let mut out = &b_nodal[q] * w[p] - &b_nodal[p] * w[q];
        for j in 0..3 {
            let dj = basis.inverse_transform(&basis.deriv(&bt[i], j));
            out -= &(&sweep[j] * &dj);
        }
        out
    });
    RotationTerms { momentum, magnetic }
}

/// Exact modal divergence of the fluid momentum flux, component c of
/// div(rho v (x) v). The flux rho v v_c is all-cosine (a product of two
/// sine-family fields), so the integral of its divergence telescopes to
/// zero across modes rather than termwise; net momentum injection is
/// pure round-off. Rigid-row assembly avoids even that by pairing the
/// flux against test gradients instead.
pub fn momentum_flux_div_modal(
    basis: &BasisSet,
    rho: &TaggedField,
    v: &[TaggedField; 3],
) -> [FieldSum; 3] {
    let m = mass_flux(basis, rho, v);
    [0, 1, 2].map(|c| {
        let mut out = FieldSum::new();
        for a in 0..3 {
            let ma = basis.nonlinear_copy(&m[a]);
            out.push(basis.deriv(&basis.product(&ma, &basis.nonlinear_copy(&v[c])), a));
        }
        out
    })
}

/// Transport terms of all three balances for the current state: the
/// momentum flux divergence div(rho v (x) u) on the grid, the exact
/// modal mass flux divergence, and the modal induction transport.
pub struct ConvectionTerms {
    pub momentum_flux_div: [Array3<f64>; 3],
    pub mass_flux_div: FieldSum,
    pub magnetic_transport: [FieldSum; 3],
}

pub fn convection_terms(basis: &BasisSet, state: &SystemState) -> ConvectionTerms {
    let m = mass_flux(basis, &state.fluid.rho, &state.fluid.v);
    let mdiv = divergence(basis, &m);
    let mdiv_nodal = mdiv.nodal(basis);
    let sweep = rigid_velocity_nodal(basis, state.rigid.omega, state.rigid.xi);
    let w = state.rigid.omega;
    let fluid_parts = momentum_flux_div_modal(basis, &state.fluid.rho, &state.fluid.v);
    let momentum_flux_div = [0, 1, 2].map(|c| {
        // fluid part div(rho v v_c), then the sweep contribution
        // div(rho v) W_c + (omega x rho v)_c
        let mut out = fluid_parts[c].nodal(basis);
        out += &(&mdiv_nodal * &sweep[c]);
        let (p, q) = ((c + 1) % 3, (c + 2) % 3);
        let m_nodal_q = basis.inverse_transform(&m[q]);
        let m_nodal_p = basis.inverse_transform(&m[p]);
        out += &(&m_nodal_q * w[p] - &m_nodal_p * w[q]);
        out
    });
    ConvectionTerms {
        momentum_flux_div,
        mass_flux_div: mdiv,
        magnetic_transport: induction_transport(basis, &state.fluid.v, &state.fluid.b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity_basis::{build_bases, BoxCavity, SpectralResolution, VELOCITY_PARITY};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn basis() -> BasisSet {
        build_bases(
            BoxCavity::new([std::f64::consts::PI, 2.0, 1.4]).unwrap(),
            SpectralResolution::new([6, 5, 6], true),
        )
        .unwrap()
    }

    fn rand_field(par: [Parity; 3], dims: [usize; 3], seed: u64) -> TaggedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = TaggedField::zeros(par, dims);
        for v in f.c.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        f
    }

    fn rand_velocity(b: &BasisSet, seed: u64) -> [TaggedField; 3] {
        [0, 1, 2].map(|c| rand_field(VELOCITY_PARITY, b.velocity_dims(), seed + c as u64))
    }

    fn rand_magnetic(b: &BasisSet, seed: u64) -> [TaggedField; 3] {
        [0, 1, 2].map(|c| rand_field(magnetic_parity(c), b.magnetic_dims(c), seed + 10 + c as u64))
    }

    #[test]
    fn curl_of_grad_vanishes() {
        let b = basis();
        let rho = rand_field(DENSITY_PARITY, b.density_dims(), 1);
        let g = grad(&b, &rho);
        for (i, comp) in curl(&b, &g).iter().enumerate() {
            assert!(
                comp.max_abs_coeff() < 1e-12,
                "curl grad comp {i}: {}",
                comp.max_abs_coeff()
            );
        }
    }

    #[test]
    fn div_of_curl_vanishes() {
        let b = basis();
        let f = rand_magnetic(&b, 2);
        let c = curl(&b, &f);
        let c_single: Vec<TaggedField> =
            c.into_iter().map(|s| s.expect_single().unwrap()).collect();
        let d = divergence(&b, &[c_single[0].clone(), c_single[1].clone(), c_single[2].clone()]);
        assert!(d.max_abs_coeff() < 1e-12, "{}", d.max_abs_coeff());
    }

    #[test]
    fn laplacian_matches_div_grad() {
        let b = basis();
        let rho = rand_field(DENSITY_PARITY, b.density_dims(), 3);
        let lap = laplacian(&b, &rho);
        let dg = divergence(&b, &grad(&b, &rho)).expect_single().unwrap();
        assert_eq!(dg.par, DENSITY_PARITY);
        let lap_pad = {
            let mut s = FieldSum::from_field(dg.scaled(-1.0));
            s.push(lap);
            s
        };
        assert!(lap_pad.max_abs_coeff() < 1e-11);
    }

    #[test]
    fn solenoidal_projection_properties() {
        let b = basis();
        let mut f = rand_magnetic(&b, 4);
        let norm_before: f64 = f.iter().map(|c| b.norm_sq(c)).sum();
        assert!(max_div_coeff(&b, &f) > 1e-3);
        solenoidal_project(&b, &mut f);
        let scale = f.iter().map(|c| c.norm_sq_coeffs().sqrt()).fold(0.0, f64::max);
        assert!(max_div_coeff(&b, &f) < 1e-12 * scale.max(1.0));
        let norm_after: f64 = f.iter().map(|c| b.norm_sq(c)).sum();
        assert!(norm_after <= norm_before * (1.0 + 1e-14));
        let snapshot = [f[0].c.clone(), f[1].c.clone(), f[2].c.clone()];
        solenoidal_project(&b, &mut f);
        for i in 0..3 {
            let delta = (&f[i].c - &snapshot[i])
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(delta < 1e-13 * scale.max(1.0));
        }
    }

    #[test]
    fn mass_flux_divergence_carries_no_mass() {
        let b = basis();
        let mut rho = rand_field(DENSITY_PARITY, b.density_dims(), 5);
        rho.c[[0, 0, 0]] = 2.0;
        let v = rand_velocity(&b, 6);
        let d = mass_flux_div(&b, &rho, &v);
        // integral of an axis derivative of a sine-family field is a
        // sum of exactly zero moments, not a cancellation
        assert_eq!(d.integral(&b, [Weight::One; 3]), 0.0);
    }

    #[test]
    fn pressure_matches_power_law_at_nodes() {
        let b = basis();
        let mut rho = b.zeros_density();
        rho.c[[0, 0, 0]] = 2.0;
        rho.c[[1, 0, 0]] = 0.3;
        let p = pressure_modal(&b, &rho, 1.5, 1.4, 0.1, 5.0).unwrap();
        let rho_nodal = b.inverse_transform(&b.nonlinear_copy(&rho));
        let p_nodal = b.inverse_transform(&p);
        for (idx, &r) in rho_nodal.indexed_iter() {
            let want = 1.5 * r.powf(1.4) + 0.1 * r.powf(5.0);
            assert!((p_nodal[idx] - want).abs() < 1e-12 * want.abs().max(1.0));
        }
        // uniform density: pure constant mode
        let mut flat = b.zeros_density();
        flat.c[[0, 0, 0]] = 2.0;
        let p = pressure_modal(&b, &flat, 1.0, 1.4, 0.0, 5.0).unwrap();
        assert!((p.c[[0, 0, 0]] - 2.0f64.powf(1.4)).abs() < 1e-13);
        assert!(p.c.iter().skip(1).all(|v| v.abs() < 1e-13));

        let mut bad = b.zeros_density();
        bad.c[[0, 0, 0]] = 1.0;
        bad.c[[1, 0, 0]] = 2.0;
        assert!(matches!(
            pressure_modal(&b, &bad, 1.0, 1.4, 0.0, 5.0),
            Err(CavError::NonpositivePressure(_))
        ));
    }

    #[test]
    fn lorentz_force_lands_in_magnetic_layouts() {
        let b = basis();
        let f = rand_magnetic(&b, 7);
        let l = lorentz_force(&b, &f);
        for c in 0..3 {
            assert_eq!(l[c].par, magnetic_parity(c));
        }
    }

    #[test]
    fn magnetic_energy_exchange_balances_lorentz_work() {
        // <v.grad b + b div v - b.grad v, b> = <(curl b) x b, v> for
        // solenoidal b; both sides exact when the fields are already
        // capped so the tilde copies change nothing.
        let b = basis();
        let cap = [0, 1, 2].map(|a| b.axis(a).dealias_cap());
        let mut bf = rand_magnetic(&b, 9);
        solenoidal_project(&b, &mut bf);
        // truncation drops whole wavevectors, so it keeps b solenoidal
        let bf = [0, 1, 2].map(|c| b.truncate(&bf[c], cap));
        let v0 = rand_velocity(&b, 8);
        let v = [0, 1, 2].map(|c| b.truncate(&v0[c], cap));
        let transport = induction_transport(&b, &v, &bf);
        let lhs: f64 = (0..3)
            .map(|i| transport[i].pair(&b, &bf[i], [Weight::One; 3]))
            .sum();
        let lor = lorentz_force(&b, &bf);
        let rhs: f64 = (0..3).map(|c| b.pair(&lor[c], &v[c], [Weight::One; 3])).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1e-3);
        assert!((lhs - rhs).abs() < 1e-10 * scale, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn stress_dissipation_identity() {
        // integral S(grad v) : grad v = mu |grad v|^2
        //                             + (lambda + mu/3) |div v|^2
        let b = basis();
        let v = rand_velocity(&b, 10);
        let (mu, lambda) = (0.7, 0.25);
        let s = StressField::of(&b, &v, mu, lambda);
        let direct = s.dissipation(&b);
        let mut gradsq = 0.0;
        for a in 0..3 {
            for c in 0..3 {
                gradsq += b.norm_sq(&s.grad[a][c]);
            }
        }
        let divsq = s.div.pair_sum(&b, &s.div, [Weight::One; 3]);
        let want = mu * gradsq + (lambda + mu / 3.0) * divsq;
        assert!((direct - want).abs() < 1e-10 * want.abs().max(1.0));
        assert!(direct > 0.0);
    }

    #[test]
    fn stress_divergence_is_weakly_minus_stress_inner() {
        // <div S(v), w> = -integral S(grad v) : grad w for w in the
        // velocity space (no boundary terms: w vanishes on all faces)
        let b = basis();
        let v = rand_velocity(&b, 11);
        let w = rand_velocity(&b, 12);
        let (mu, lambda) = (0.4, 0.1);
        let sd = stress_divergence(&b, &v, mu, lambda);
        let lhs: f64 = (0..3).map(|c| sd[c].pair(&b, &w[c], [Weight::One; 3])).sum();
        let s = StressField::of(&b, &v, mu, lambda);
        let rhs = -s.contract_gradient(&b, &velocity_gradient(&b, &w));
        assert!(
            (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
            "lhs {lhs} rhs {rhs}"
        );
    }

    #[test]
    fn stress_rigid_contraction_vanishes() {
        // S is symmetric, a rigid motion gradient is antisymmetric;
        // the weak viscous force on rigid test motions must vanish.
        let b = basis();
        let v = rand_velocity(&b, 13);
        let s = StressField::of(&b, &v, 0.9, 0.3);
        let omega = [0.3, -0.7, 0.2];
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                // grad of (omega x x): d/dx_i (omega x x)_j
                let (p, q) = ((j + 1) % 3, (j + 2) % 3);
                let gij = if i == q {
                    omega[p]
                } else if i == p {
                    -omega[q]
                } else {
                    0.0
                };
                if gij != 0.0 {
                    total += gij * s.component(i, j).integral(&b, [Weight::One; 3]);
                }
            }
        }
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn rotation_force_does_no_work() {
        use crate::frame_kinematics::{RigidParams, RotationState};
        use crate::linalg::IDENTITY3;
        use crate::system_state::{FluidState, PhysParams, RegParams, RigidState};
        let b = basis();
        let mut fluid = FluidState::rest(&b, 1.0);
        fluid.v = rand_velocity(&b, 14);
        fluid.rho.c[[0, 1, 0]] = 0.2;
        let state = crate::system_state::SystemState {
            fluid,
            rigid: RigidState {
                omega: [0.4, 0.1, -0.2],
                xi: [0.05, -0.1, 0.2],
            },
            rotation: RotationState::identity(),
            phys: PhysParams::new(1.0, 1.4, 0.1, 0.0).unwrap(),
            reg: RegParams::new(0.0, 0.0, 5.0, 1.4).unwrap(),
            rigid_params: RigidParams::new(1.0, IDENTITY3, b.cavity.volume()).unwrap(),
        };
        let rot = rotation_terms(&b, &state);
        let u = state.assemble_u(&b);
        let mut max_work = 0.0f64;
        for ((i, j, k), _) in rot.momentum[0].indexed_iter() {
            let w = rot.momentum[0][[i, j, k]] * u[0][[i, j, k]]
                + rot.momentum[1][[i, j, k]] * u[1][[i, j, k]]
                + rot.momentum[2][[i, j, k]] * u[2][[i, j, k]];
            max_work = max_work.max(w.abs());
        }
        assert!(max_work < 1e-13);
    }

    #[test]
    fn momentum_flux_divergence_integrates_to_zero() {
        use crate::frame_kinematics::{RigidParams, RotationState};
        use crate::linalg::IDENTITY3;
        use crate::system_state::{FluidState, PhysParams, RegParams, RigidState};
        let b = basis();
        let mut fluid = FluidState::rest(&b, 1.0);
        fluid.v = rand_velocity(&b, 15);
        fluid.rho.c[[1, 1, 1]] = 0.1;
        fluid.b = rand_magnetic(&b, 16);
        let state = crate::system_state::SystemState {
            fluid,
            rigid: RigidState::default(),
            rotation: RotationState::identity(),
            phys: PhysParams::new(1.0, 1.4, 0.1, 0.0).unwrap(),
            reg: RegParams::new(0.0, 0.0, 5.0, 1.4).unwrap(),
            rigid_params: RigidParams::new(1.0, IDENTITY3, b.cavity.volume()).unwrap(),
        };
        // transport moves momentum around without creating any; for the
        // all-cosine flux this telescopes across modes, so round-off
        let flux = momentum_flux_div_modal(&b, &state.fluid.rho, &state.fluid.v);
        for c in 0..3 {
            let total = flux[c].integral(&b, [Weight::One; 3]);
            assert!(total.abs() < 1e-12, "comp {c}: {total}");
        }
        let conv = convection_terms(&b, &state);
        // the mass flux is all-sine, so here the zero is termwise exact
        assert_eq!(conv.mass_flux_div.integral(&b, [Weight::One; 3]), 0.0);
        // omega = xi = 0: the nodal diagnostic is the pure fluid part
        // and must agree with the modal parts at the nodes
        let j = [3usize, 4, 5];
        let zn = [b.axis(0).node(3), b.axis(1).node(4), b.axis(2).node(5)];
        for c in 0..3 {
            let got = conv.momentum_flux_div[c][[j[0], j[1], j[2]]];
            assert!((flux[c].eval(&b, zn) - got).abs() < 1e-11);
        }
    }
}
