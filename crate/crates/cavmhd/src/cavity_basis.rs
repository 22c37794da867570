//! Tensor trigonometric bases on the box cavity and the exact
//! integration engine built on them.
//!
//! Three families share one collocation grid of 2 N_i midpoints per
//! axis:
//!
//! * velocity: each component all-sine (vanishes on every face),
//! * density fluctuations: all-cosine (zero normal derivative),
//! * magnetic field: component i is sine along axis i and cosine along
//!   the other two, with the per-wavevector solenoidal constraint
//!   sum_i kappa_i a_i = 0 built into the coefficient layout.
//!
//! Products of two stored fields are band-limited below the grid's
//! exact-analysis cap, so forming nonlinear terms nodally and reading
//! them back is exact. Integrals that mix sine against cosine factors
//! are NOT exact under the midpoint rule and always go through the
//! closed-form Gram tables in `trig`.

use ndarray::{s, Array2, Array3};

use crate::error::{CavError, Result};
use crate::trig::{
    analysis, apply_axis, contract_full, gram1d, index_of, len_for_cap, moment1d, synthesis,
};

pub use crate::trig::{Parity, Weight};

/// Rectangular cavity, centered at the body frame origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCavity {
    pub lengths: [f64; 3],
}

impl BoxCavity {
    pub fn new(lengths: [f64; 3]) -> Result<Self> {
        if lengths.iter().any(|&l| !l.is_finite() || l <= 0.0) {
            return Err(CavError::Config(format!(
                "cavity edge lengths must be positive, got {lengths:?}"
            )));
        }
        Ok(BoxCavity { lengths })
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Length of the main diagonal, the largest chord of the cavity.
    pub fn diameter(&self) -> f64 {
        self.lengths.iter().map(|l| l * l).sum::<f64>().sqrt()
    }
}

/// Modes retained per axis plus the dealiasing switch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralResolution {
    pub n: [usize; 3],
    pub dealias: bool,
}

impl SpectralResolution {
    pub fn new(n: [usize; 3], dealias: bool) -> Self {
        SpectralResolution { n, dealias }
    }
}

/// Per-axis grid/transform context.
pub struct AxisCtx {
    pub l: f64,
    pub n: usize,
    /// collocation nodes per axis, always 2 n
    pub p: usize,
    syn_sin: Array2<f64>,
    syn_cos: Array2<f64>,
    ana_sin: Array2<f64>,
    ana_cos: Array2<f64>,
}

impl AxisCtx {
    fn new(l: f64, n: usize) -> Self {
        let p = 2 * n;
        AxisCtx {
            l,
            n,
            p,
            syn_sin: synthesis(Parity::Sin, p, p - 1),
            syn_cos: synthesis(Parity::Cos, p, p),
            ana_sin: analysis(Parity::Sin, p, p - 1),
            ana_cos: analysis(Parity::Cos, p, p),
        }
    }

    /// Scaled wavenumber of trig index k.
    pub fn kappa(&self, k: usize) -> f64 {
        k as f64 * std::f64::consts::PI / self.l
    }

    /// Node coordinate zeta_j in (0, l).
    pub fn node(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.l / self.p as f64
    }

    pub fn spacing(&self) -> f64 {
        self.l / self.p as f64
    }

    /// Node coordinate centered on the cavity midpoint, in (-l/2, l/2).
    pub fn centered_node(&self, j: usize) -> f64 {
        self.node(j) - 0.5 * self.l
    }

    /// Largest trig index the nodal grid can analyze exactly.
    pub fn grid_cap(&self) -> usize {
        self.p - 1
    }

    /// Dealiasing cap floor(2n/3).
    pub fn dealias_cap(&self) -> usize {
        2 * self.n / 3
    }
}

/// Scalar field stored modally with one trig family per axis.
#[derive(Clone, Debug)]
pub struct TaggedField {
    pub par: [Parity; 3],
    pub c: Array3<f64>,
}

impl TaggedField {
    pub fn zeros(par: [Parity; 3], dims: [usize; 3]) -> Self {
        TaggedField {
            par,
            c: Array3::zeros(dims),
        }
    }

    /// Largest trig index stored along `axis`.
    pub fn max_index(&self, axis: usize) -> usize {
        let len = self.c.shape()[axis];
        match self.par[axis] {
            Parity::Sin => len,
            Parity::Cos => len.saturating_sub(1),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        TaggedField {
            par: self.par,
            c: &self.c * s,
        }
    }

    pub fn add_assign(&mut self, other: &TaggedField) {
        assert_eq!(self.par, other.par, "parity mismatch in field sum");
        self.c += &other.c;
    }

    pub fn norm_sq_coeffs(&self) -> f64 {
        self.c.iter().map(|v| v * v).sum()
    }
}

pub const VELOCITY_PARITY: [Parity; 3] = [Parity::Sin, Parity::Sin, Parity::Sin];
pub const DENSITY_PARITY: [Parity; 3] = [Parity::Cos, Parity::Cos, Parity::Cos];

pub fn magnetic_parity(comp: usize) -> [Parity; 3] {
    let mut p = [Parity::Cos; 3];
    p[comp] = Parity::Sin;
    p
}

/// All basis/grid data for one (cavity, resolution) pair.
pub struct BasisSet {
    pub cavity: BoxCavity,
    pub res: SpectralResolution,
    axes: [AxisCtx; 3],
    pub velocity_mode_count: usize,
    pub density_mode_count: usize,
    pub magnetic_dof_count: usize,
}

/// Validate the resolution and assemble transforms, wavenumbers and
/// mode bookkeeping for all three families.
pub fn build_bases(cavity: BoxCavity, res: SpectralResolution) -> Result<BasisSet> {
    for (i, &n) in res.n.iter().enumerate() {
        if n < 2 {
            return Err(CavError::InvalidResolution(format!(
                "axis {i} has {n} modes; at least 2 are required per axis"
            )));
        }
    }
    let axes = [
        AxisCtx::new(cavity.lengths[0], res.n[0]),
        AxisCtx::new(cavity.lengths[1], res.n[1]),
        AxisCtx::new(cavity.lengths[2], res.n[2]),
    ];
    let velocity_mode_count = 3 * res.n.iter().map(|&n| n - 1).product::<usize>();
    let density_mode_count = res.n.iter().product::<usize>();
    let mut magnetic_dof_count = 0usize;
    for k0 in 0..res.n[0] {
        for k1 in 0..res.n[1] {
            for k2 in 0..res.n[2] {
                let present = (k0 >= 1) as usize + (k1 >= 1) as usize + (k2 >= 1) as usize;
                magnetic_dof_count += present.saturating_sub(1);
            }
        }
    }
    Ok(BasisSet {
        cavity,
        res,
        axes,
        velocity_mode_count,
        density_mode_count,
        magnetic_dof_count,
    })
}

impl BasisSet {
    pub fn axis(&self, a: usize) -> &AxisCtx {
        &self.axes[a]
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        [self.axes[0].p, self.axes[1].p, self.axes[2].p]
    }

    pub fn velocity_dims(&self) -> [usize; 3] {
        [self.res.n[0] - 1, self.res.n[1] - 1, self.res.n[2] - 1]
    }

    pub fn density_dims(&self) -> [usize; 3] {
        self.res.n
    }

    pub fn magnetic_dims(&self, comp: usize) -> [usize; 3] {
        let mut d = self.res.n;
        d[comp] -= 1;
        d
    }

    pub fn zeros_velocity(&self) -> [TaggedField; 3] {
        [0, 1, 2].map(|_| TaggedField::zeros(VELOCITY_PARITY, self.velocity_dims()))
    }

    pub fn zeros_density(&self) -> TaggedField {
        TaggedField::zeros(DENSITY_PARITY, self.density_dims())
    }

    pub fn zeros_magnetic(&self) -> [TaggedField; 3] {
        [0, 1, 2].map(|c| TaggedField::zeros(magnetic_parity(c), self.magnetic_dims(c)))
    }

    fn syn_slice(&self, a: usize, par: Parity, len: usize) -> ndarray::ArrayView2<'_, f64> {
        match par {
            Parity::Sin => self.axes[a].syn_sin.slice(s![.., ..len]),
            Parity::Cos => self.axes[a].syn_cos.slice(s![.., ..len]),
        }
    }

    fn ana_slice(&self, a: usize, par: Parity, len: usize) -> ndarray::ArrayView2<'_, f64> {
        match par {
            Parity::Sin => self.axes[a].ana_sin.slice(s![..len, ..]),
            Parity::Cos => self.axes[a].ana_cos.slice(s![..len, ..]),
        }
    }

    /// Modal coefficients -> values on the collocation grid.
    pub fn inverse_transform(&self, f: &TaggedField) -> Array3<f64> {
        let mut cur = f.c.clone();
        for a in 0..3 {
            let len = cur.shape()[a];
            cur = apply_axis(&cur, a, self.syn_slice(a, f.par[a], len));
        }
        cur
    }

    /// Grid values -> modal coefficients, keeping trig indices <= caps.
    /// Exact whenever the sampled function is band-limited to the grid
    /// cap (2n - 1) on every axis.
    pub fn forward_transform(
        &self,
        nodal: &Array3<f64>,
        par: [Parity; 3],
        caps: [usize; 3],
    ) -> TaggedField {
        debug_assert_eq!(nodal.shape(), self.grid_dims().as_slice());
        let mut cur = nodal.clone();
        for a in 0..3 {
            let len = len_for_cap(par[a], caps[a].min(self.axes[a].grid_cap()));
            cur = apply_axis(&cur, a, self.ana_slice(a, par[a], len));
        }
        TaggedField { par, c: cur }
    }

    /// Forward transform at the grid's full exact cap.
    pub fn forward_full(&self, nodal: &Array3<f64>, par: [Parity; 3]) -> TaggedField {
        let caps = [0, 1, 2].map(|a| self.axes[a].grid_cap());
        self.forward_transform(nodal, par, caps)
    }

    /// Zero every coefficient with a trig index above floor(2n/3) on
    /// any axis. Idempotent.
    pub fn dealias(&self, f: &mut TaggedField) {
        for a in 0..3 {
            let cap = self.axes[a].dealias_cap();
            let len = f.c.shape()[a];
            let keep = len_for_cap(f.par[a], cap).min(len);
            if keep < len {
                f.c.slice_mut(s![..;1, ..;1, ..;1])
                    .slice_axis_mut(ndarray::Axis(a), ndarray::Slice::from(keep..))
                    .fill(0.0);
            }
        }
    }

    /// Copy used when a field enters a nodal product: truncated to the
    /// dealias cap when the resolution asks for it, verbatim otherwise.
    /// Truncation (rather than zero-filling) keeps `max_index` honest
    /// about the content, which the product exactness check relies on.
    pub fn nonlinear_copy(&self, f: &TaggedField) -> TaggedField {
        if self.res.dealias {
            self.truncate(f, [0, 1, 2].map(|a| self.axes[a].dealias_cap()))
        } else {
            f.clone()
        }
    }

    /// Pointwise product of two modal fields, formed nodally and read
    /// back at the grid's full cap. Exact as long as the operands'
    /// per-axis index caps sum below the grid cap, which the dealiasing
    /// policy guarantees; with dealiasing disabled the high end folds
    /// back onto the grid (ordinary aliasing) and the assert is waived.
    pub fn product(&self, f: &TaggedField, g: &TaggedField) -> TaggedField {
        for a in 0..3 {
            debug_assert!(
                !self.res.dealias || f.max_index(a) + g.max_index(a) <= self.axes[a].grid_cap(),
                "product would alias on axis {a}: {} + {} > {}",
                f.max_index(a),
                g.max_index(a),
                self.axes[a].grid_cap()
            );
        }
        let par = [0, 1, 2].map(|a| match (f.par[a], g.par[a]) {
            (Parity::Sin, Parity::Sin) | (Parity::Cos, Parity::Cos) => Parity::Cos,
            _ => Parity::Sin,
        });
        let fa = self.inverse_transform(f);
        let ga = self.inverse_transform(g);
        self.forward_full(&(fa * ga), par)
    }

    /// Exact integral of w0(x0) w1(x1) w2(x2) f g over the cavity.
    pub fn pair(&self, f: &TaggedField, g: &TaggedField, w: [Weight; 3]) -> f64 {
        let moved = self.pair_tests(f, g.par, [0, 1, 2].map(|a| g.c.shape()[a]), w);
        (&moved * &g.c).sum()
    }

    /// Exact pairings of f against every test mode of the given layout:
    /// out[i] = integral of w * f * phi_i.
    pub fn pair_tests(
        &self,
        f: &TaggedField,
        test_par: [Parity; 3],
        test_lens: [usize; 3],
        w: [Weight; 3],
    ) -> Array3<f64> {
        let mut cur = f.c.clone();
        for a in 0..3 {
            let flen = cur.shape()[a];
            let g = Array2::from_shape_fn((test_lens[a], flen), |(it, jf)| {
                gram1d(
                    test_par[a],
                    index_of(test_par[a], it),
                    f.par[a],
                    index_of(f.par[a], jf),
                    w[a],
                    self.axes[a].l,
                )
            });
            cur = apply_axis(&cur, a, g.view());
        }
        cur
    }

    /// Exact integral of w0 w1 w2 f over the cavity.
    pub fn integral(&self, f: &TaggedField, w: [Weight; 3]) -> f64 {
        let vecs: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..f.c.shape()[a])
                    .map(|i| moment1d(f.par[a], index_of(f.par[a], i), w[a], self.axes[a].l))
                    .collect()
            })
            .collect();
        contract_full(&f.c, &vecs[0], &vecs[1], &vecs[2])
    }

    /// L2 norm squared of a single-parity field (exact).
    pub fn norm_sq(&self, f: &TaggedField) -> f64 {
        self.pair(f, f, [Weight::One; 3])
    }

    /// Norm of the basis mode at a given coefficient position.
    pub fn mode_norm_sq(&self, par: [Parity; 3], idx: [usize; 3]) -> f64 {
        let mut n = 1.0;
        for a in 0..3 {
            let k = index_of(par[a], idx[a]);
            n *= gram1d(par[a], k, par[a], k, Weight::One, self.axes[a].l);
        }
        n
    }

    /// Table of mode L2 norms squared for a whole layout.
    pub fn mode_norms(&self, par: [Parity; 3], dims: [usize; 3]) -> Array3<f64> {
        Array3::from_shape_fn(dims, |(i, j, k)| self.mode_norm_sq(par, [i, j, k]))
    }

    /// Partial derivative along `axis`, exact in modal space.
    pub fn deriv(&self, f: &TaggedField, axis: usize) -> TaggedField {
        let ax = &self.axes[axis];
        let in_len = f.c.shape()[axis];
        let mut par = f.par;
        let out = match f.par[axis] {
            Parity::Sin => {
                // d/dz sigma_k = +kappa_k chi_k; cos slot 0 stays empty
                par[axis] = Parity::Cos;
                let mut dims = [f.c.shape()[0], f.c.shape()[1], f.c.shape()[2]];
                dims[axis] = in_len + 1;
                let mut out = Array3::zeros(dims);
                for i in 0..in_len {
                    let k = i + 1;
                    let kap = ax.kappa(k);
                    let src = f.c.index_axis(ndarray::Axis(axis), i);
                    let mut dst = out.index_axis_mut(ndarray::Axis(axis), k);
                    dst.assign(&src);
                    dst *= kap;
                }
                out
            }
            Parity::Cos => {
                // d/dz chi_k = -kappa_k sigma_k; constant mode drops
                par[axis] = Parity::Sin;
                let mut dims = [f.c.shape()[0], f.c.shape()[1], f.c.shape()[2]];
                dims[axis] = in_len.saturating_sub(1);
                let mut out = Array3::zeros(dims);
                for k in 1..in_len {
                    let kap = ax.kappa(k);
                    let src = f.c.index_axis(ndarray::Axis(axis), k);
                    let mut dst = out.index_axis_mut(ndarray::Axis(axis), k - 1);
                    dst.assign(&src);
                    dst *= -kap;
                }
                out
            }
        };
        TaggedField { par, c: out }
    }

    /// |kappa|^2 per coefficient position for the given layout.
    pub fn laplacian_symbol(&self, par: [Parity; 3], dims: [usize; 3]) -> Array3<f64> {
        Array3::from_shape_fn(dims, |(i, j, k)| {
            let idx = [i, j, k];
            let mut s = 0.0;
            for a in 0..3 {
                let kap = self.axes[a].kappa(index_of(par[a], idx[a]));
                s += kap * kap;
            }
            s
        })
    }

    /// Point evaluation by direct modal summation (test/diagnostic use).
    pub fn eval(&self, f: &TaggedField, zeta: [f64; 3]) -> f64 {
        let pi = std::f64::consts::PI;
        let factors: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..f.c.shape()[a])
                    .map(|i| {
                        let k = index_of(f.par[a], i) as f64;
                        let t = k * pi * zeta[a] / self.axes[a].l;
                        match f.par[a] {
                            Parity::Sin => t.sin(),
                            Parity::Cos => t.cos(),
                        }
                    })
                    .collect()
            })
            .collect();
        contract_full(&f.c, &factors[0], &factors[1], &factors[2])
    }

    /// Midpoint-rule integral of grid values (exact only for cos-family
    /// band-limited integrands; used for non-polynomial diagnostics).
    pub fn grid_integral(&self, nodal: &Array3<f64>) -> f64 {
        let w: f64 = (0..3).map(|a| self.axes[a].spacing()).product();
        nodal.sum() * w
    }

    /// Zero-pad a field onto a finer basis with the same box.
    pub fn embed(&self, f: &TaggedField, target: &BasisSet) -> Result<TaggedField> {
        if (self.cavity.lengths[0] - target.cavity.lengths[0]).abs() > 0.0
            || (self.cavity.lengths[1] - target.cavity.lengths[1]).abs() > 0.0
            || (self.cavity.lengths[2] - target.cavity.lengths[2]).abs() > 0.0
        {
            return Err(CavError::GridMismatch(
                "embedding requires identical cavity lengths".into(),
            ));
        }
        for a in 0..3 {
            if f.max_index(a) > target.axes[a].grid_cap() {
                return Err(CavError::GridMismatch(format!(
                    "axis {a}: index {} exceeds target cap {}",
                    f.max_index(a),
                    target.axes[a].grid_cap()
                )));
            }
        }
        let dims_src = [f.c.shape()[0], f.c.shape()[1], f.c.shape()[2]];
        let mut dims = dims_src;
        for a in 0..3 {
            dims[a] = dims[a].max(len_for_cap(f.par[a], target.axes[a].grid_cap()).min(
                match f.par[a] {
                    Parity::Sin => target.res.n[a] - 1,
                    Parity::Cos => target.res.n[a],
                },
            ));
        }
        let mut c = Array3::zeros(dims);
        c.slice_mut(s![..dims_src[0], ..dims_src[1], ..dims_src[2]])
            .assign(&f.c);
        Ok(TaggedField { par: f.par, c })
    }

    /// Truncate a field to per-axis trig caps (Galerkin projection onto
    /// the same-parity subspace).
    pub fn truncate(&self, f: &TaggedField, caps: [usize; 3]) -> TaggedField {
        let lens = [0, 1, 2].map(|a| len_for_cap(f.par[a], caps[a]).min(f.c.shape()[a]));
        TaggedField {
            par: f.par,
            c: f.c.slice(s![..lens[0], ..lens[1], ..lens[2]]).to_owned(),
        }
    }
}
