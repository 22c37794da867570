//! Acceptance battery: ten numbered suites, one test per suite, each
//! printing a single verdict line with the measured numbers. The two
//! coupled small-data trajectory pairs behind suites 4 and 5 are the
//! expensive part, so they are integrated once per scheme and shared
//! through OnceLock (the harness runs the suites in one process).

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;

use cavmhd::cavity_basis::{build_bases, BasisSet, BoxCavity, SpectralResolution, VELOCITY_PARITY};
use cavmhd::diagnostics::{
    energy_report, invariant_report, relative_energy, standard_test_set, weak_residuals,
    EnergyReport, InvariantBaseline, InvariantReport, SpaceTest,
};
use cavmhd::field_operators::{curl, divergence, grad, laplacian, solenoidal_project};
use cavmhd::frame_kinematics::{RigidParams, RotationState};
use cavmhd::linalg::{norm, sub, IDENTITY3};
use cavmhd::rigid_coupling::euler_rigid_step;
use cavmhd::run_driver::{
    build_basis, continuation_run, initial_state, refine_n_study, run_simulation,
    ContinuationParam, Preset, RunConfig,
};
use cavmhd::subsolvers::{
    continuity_step, coupled_step, induction_step, momentum_step, GalerkinMomentumSystem,
    ImexScheme, StepConfig, YnVec,
};
use cavmhd::system_state::{FluidState, PhysParams, RegParams, RigidState, SystemState};

// ---------------------------------------------------------------- helpers

fn desk_basis() -> BasisSet {
    let pi = std::f64::consts::PI;
    build_bases(
        BoxCavity { lengths: [pi; 3] },
        SpectralResolution { n: [16; 3], dealias: true },
    )
    .expect("desk basis")
}

fn scratch(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap()
        .subsec_nanos();
    let dir = std::env::temp_dir().join(format!(
        "cavmhd-accept-{tag}-{}-{nanos}",
        std::process::id()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Deterministic filler in [-1, 1) for cancellation tests; no point in
/// dragging an RNG through checks that only need dense generic data.
fn fill_pseudo(f: &mut cavmhd::cavity_basis::TaggedField, salt: usize) {
    for (k, v) in f.c.iter_mut().enumerate() {
        let x = ((k * 2654435761 + salt * 40503) % 8191) as f64;
        *v = x / 4095.5 - 1.0;
    }
}

/// True when e2 sits below e1 by at least the given halving order, or
/// when both are already under the measurement floor (a drift pinned at
/// solver noise cannot show an order and should not fail for it).
fn shrinks(e1: f64, e2: f64, floor: f64, min_order: f64) -> bool {
    if e1 <= floor && e2 <= floor {
        return true;
    }
    e2 <= (e1 / 2f64.powf(min_order)).max(floor)
}

fn order_label(e1: f64, e2: f64, floor: f64) -> String {
    if e1 <= floor && e2 <= floor {
        "at floor".into()
    } else {
        format!("order {:.2}", (e1 / e2.max(f64::MIN_POSITIVE)).log2())
    }
}

// ------------------------------------------------- shared coupled fixtures

struct CoupledSeries {
    dt: f64,
    rows: Vec<EnergyReport>,
    report: InvariantReport,
}

/// Small-data coupled run at desk scale: N = 16^3 in a pi^3 box, T = 2,
/// rotating anisotropic body, zero initial total momentum. Rows every
/// step keep the dissipation quadrature error far below the scheme
/// error at both dt levels.
fn coupled_series(scheme: ImexScheme, dt: f64) -> CoupledSeries {
    let mut cfg = RunConfig::default();
    cfg.n = [16; 3];
    cfg.preset = Preset::SmallData;
    cfg.seed = 11;
    cfg.omega0 = Some([0.2, 0.1, 0.3]);
    cfg.i_body = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
    cfg.scheme = scheme;
    let basis = build_basis(&cfg).expect("desk basis");
    let mut state = initial_state(&cfg, &basis).expect("small-data state");
    state.enforce_linear_constraint(&basis);
    let baseline = InvariantBaseline::of(&basis, &state);

    let mut step = StepConfig::new(dt, scheme);
    step.pcg_tol = 1e-13;
    step.pcg_maxiter = 800;
    let n_steps = (2.0 / dt).round() as usize;

    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(energy_report(&basis, &state, None));
    for _ in 0..n_steps {
        let (next, _) = coupled_step(&basis, &state, &step).expect("coupled step");
        state = next;
        let row = energy_report(&basis, &state, rows.last());
        rows.push(row);
    }
    let report = invariant_report(&basis, &state, Some(&baseline));

    // diagnostic dump; lets the measured constants be inspected without
    // re-integrating the pair
    let mut text = String::new();
    for r in &rows {
        text += &format!("{:e} {:e} {:e} {:e}\n", r.t, r.f, r.balance_residual, r.dissipation);
    }
    text += &format!(
        "report mass={:e} divb_modal={:e} divb_nodal={:e} p={:e} m={:e} q={:e}\n",
        report.mass_drift,
        report.divb_max_modal,
        report.divb_max_nodal,
        report.p_drift,
        report.m_drift,
        report.q_orth_err
    );
    let dump = std::env::temp_dir().join(format!("cavmhd-series-{scheme:?}-{dt:e}.txt"));
    fs::write(dump, text).ok();

    CoupledSeries { dt, rows, report }
}

static BE_PAIR: OnceLock<(CoupledSeries, CoupledSeries)> = OnceLock::new();
static TR_PAIR: OnceLock<(CoupledSeries, CoupledSeries)> = OnceLock::new();

fn be_pair() -> &'static (CoupledSeries, CoupledSeries) {
    BE_PAIR.get_or_init(|| {
        (
            coupled_series(ImexScheme::BackwardEuler, 2.5e-3),
            coupled_series(ImexScheme::BackwardEuler, 1.25e-3),
        )
    })
}

fn tr_pair() -> &'static (CoupledSeries, CoupledSeries) {
    TR_PAIR.get_or_init(|| {
        (
            coupled_series(ImexScheme::Trapezoid, 2.5e-3),
            coupled_series(ImexScheme::Trapezoid, 1.25e-3),
        )
    })
}

/// Largest positive excursion of the cumulative balance residual and of
/// the step-to-step F increments: the slack needed to make both the
/// energy inequality and F-monotonicity hold over the whole series.
fn slack_needed(rows: &[EnergyReport]) -> f64 {
    let mut v = 0.0f64;
    for w in rows.windows(2) {
        v = v.max(w[1].balance_residual).max(w[1].f - w[0].f);
    }
    v
}

fn max_residual_magnitude(rows: &[EnergyReport]) -> f64 {
    rows.iter()
        .fold(0.0f64, |m, r| m.max(r.balance_residual.abs()))
}

// ------------------------------------------------------------ criterion 1

#[test]
fn criterion_01_differential_operators_match_closed_forms() {
    let basis = desk_basis();
    let kap = |a: usize, k: usize| basis.axis(a).kappa(k);
    let pts = [
        [0.37, 1.21, 2.04],
        [1.03, 0.56, 2.75],
        [2.41, 1.97, 0.31],
    ];

    // gradient of one cosine mode
    let (kd, amp_d) = ([3usize, 5, 2], 0.9);
    let mut f = basis.zeros_density();
    f.c[kd] = amp_d;
    let kapd = [kap(0, kd[0]), kap(1, kd[1]), kap(2, kd[2])];
    let g = grad(&basis, &f);
    let mut worst_rel = 0.0f64;
    for p in pts {
        let trig = |a: usize, which: u8| {
            let x = kapd[a] * p[a];
            if which == 0 { x.cos() } else { x.sin() }
        };
        for a in 0..3 {
            let mut want = -amp_d * kapd[a];
            for ax in 0..3 {
                want *= trig(ax, if ax == a { 1 } else { 0 });
            }
            let got = basis.eval(&g[a], p);
            worst_rel = worst_rel.max((got - want).abs() / (amp_d * kapd[a]));
        }
    }
    assert!(worst_rel <= 1e-12, "gradient closed form off by {worst_rel:.2e}");

    // divergence of one velocity mode (component 1, mode numbers 2,3,4)
    let mut v = basis.zeros_velocity();
    v[1].c[[1, 2, 3]] = 0.8;
    let kapv = [kap(0, 2), kap(1, 3), kap(2, 4)];
    let dv = divergence(&basis, &v);
    for p in pts {
        let want = 0.8
            * kapv[1]
            * (kapv[0] * p[0]).sin()
            * (kapv[1] * p[1]).cos()
            * (kapv[2] * p[2]).sin();
        let got = dv.eval(&basis, p);
        let rel = (got - want).abs() / (0.8 * kapv[1]);
        assert!(rel <= 1e-12, "divergence closed form off by {rel:.2e}");
    }

    // curl of one magnetic mode (component 0, mode numbers 2,1,3)
    let mut b = basis.zeros_magnetic();
    b[0].c[[1, 1, 3]] = 0.7;
    let kapb = [kap(0, 2), kap(1, 1), kap(2, 3)];
    let w = curl(&basis, &b);
    for p in pts {
        let (s0, c1, s1) = (
            (kapb[0] * p[0]).sin(),
            (kapb[1] * p[1]).cos(),
            (kapb[1] * p[1]).sin(),
        );
        let (c2, s2) = ((kapb[2] * p[2]).cos(), (kapb[2] * p[2]).sin());
        let want1 = -0.7 * kapb[2] * s0 * c1 * s2;
        let want2 = 0.7 * kapb[1] * s0 * s1 * c2;
        let scale = 0.7 * kapb[2].max(kapb[1]);
        assert!((w[1].eval(&basis, p) - want1).abs() <= 1e-12 * scale);
        assert!((w[2].eval(&basis, p) - want2).abs() <= 1e-12 * scale);
        assert!(w[0].eval(&basis, p).abs() <= 1e-12 * scale);
    }

    // Laplacian is diagonal with eigenvalue -|kappa|^2
    let k2d = kapd.iter().map(|k| k * k).sum::<f64>();
    let lap = laplacian(&basis, &f);
    let rel = (lap.c[kd] + k2d * amp_d).abs() / (k2d * amp_d);
    assert!(rel <= 1e-12, "laplacian eigenvalue off by {rel:.2e}");
    for p in pts {
        let got = basis.eval(&lap, p);
        let want = -k2d * basis.eval(&f, p);
        assert!((got - want).abs() <= 1e-12 * k2d * amp_d);
    }

    // compositions on dense unit-scale fields
    let mut bfull = basis.zeros_magnetic();
    for (i, comp) in bfull.iter_mut().enumerate() {
        fill_pseudo(comp, i + 1);
    }
    let wf = curl(&basis, &bfull).map(|c| c.expect_single().expect("curl merges"));
    let div_curl = divergence(&basis, &wf).max_abs_coeff();
    assert!(div_curl <= 1e-11, "div(curl b) leaves {div_curl:.2e}");

    let mut rho = basis.zeros_density();
    fill_pseudo(&mut rho, 7);
    let gr = grad(&basis, &rho);
    let cg = curl(&basis, &gr);
    let curl_grad = cg.iter().fold(0.0f64, |m, c| m.max(c.max_abs_coeff()));
    assert!(curl_grad <= 1e-11, "curl(grad f) leaves {curl_grad:.2e}");

    println!(
        "criterion 1: pass (closed forms rel <= {worst_rel:.2e}, div.curl {div_curl:.2e}, curl.grad {curl_grad:.2e})"
    );
}

// ------------------------------------------------------------ criterion 2

#[test]
fn criterion_02_boundary_conditions_hold_on_all_faces() {
    let basis = desk_basis();
    let lengths = basis.cavity.lengths;

    // Face values of tensor modes factorize per axis, so the exhaustive
    // check reduces to the 1-D sine factors: exactly zero at zeta = 0
    // and rounding dust at zeta = L for every mode number in use.
    let sine_caps = [0, 1, 2].map(|a| {
        basis
            .velocity_dims()[a]
            .max(basis.magnetic_dims(a)[a])
    });
    let mut worst_factor = 0.0f64;
    for a in 0..3 {
        for k in 1..=sine_caps[a] {
            let kapk = basis.axis(a).kappa(k);
            assert_eq!((kapk * 0.0).sin(), 0.0);
            worst_factor = worst_factor.max((kapk * lengths[a]).sin().abs());
        }
    }
    assert!(worst_factor <= 1e-12, "sine face factor {worst_factor:.2e}");

    let face_points = |a: usize, face: f64| -> Vec<[f64; 3]> {
        let (t1, t2) = ((a + 1) % 3, (a + 2) % 3);
        let mut pts = Vec::with_capacity(33 * 33);
        for i in 0..=32 {
            for j in 0..=32 {
                let mut p = [0.0; 3];
                p[a] = face;
                p[t1] = lengths[t1] * i as f64 / 32.0;
                p[t2] = lengths[t2] * j as f64 / 32.0;
                pts.push(p);
            }
        }
        pts
    };

    // dense nodal sweep for representative velocity modes on all faces
    let vd = basis.velocity_dims();
    let v_modes = [
        (0usize, [1usize, 1, 1]),
        (1, [vd[0], vd[1] - 1, vd[2]]),
        (2, [2, vd[1], 3]),
    ];
    let mut worst_v = 0.0f64;
    for (c, k) in v_modes {
        let mut v = basis.zeros_velocity();
        v[c].c[[k[0] - 1, k[1] - 1, k[2] - 1]] = 1.0;
        for a in 0..3 {
            for face in [0.0, lengths[a]] {
                for p in face_points(a, face) {
                    worst_v = worst_v.max(basis.eval(&v[c], p).abs());
                }
            }
        }
    }
    assert!(worst_v <= 1e-12, "velocity mode face value {worst_v:.2e}");

    // magnetic modes: b.n and the tangential components of curl b on
    // all six faces
    let b_modes = [
        (0usize, [1usize, 0, 0]),
        (0, [2, 3, 1]),
        (1, [1, 1, 2]),
        (1, [0, 4, 0]),
        (2, [3, 0, 2]),
        (2, [1, 2, 4]),
    ];
    let mut worst_bn = 0.0f64;
    let mut worst_tan = 0.0f64;
    for (c, k) in b_modes {
        let mut b = basis.zeros_magnetic();
        let mut idx = k;
        idx[c] = idx[c].max(1) - 1;
        b[c].c[idx] = 1.0;
        let w = curl(&basis, &b);
        for a in 0..3 {
            for face in [0.0, lengths[a]] {
                for p in face_points(a, face) {
                    worst_bn = worst_bn.max(basis.eval(&b[a], p).abs());
                    let (t1, t2) = ((a + 1) % 3, (a + 2) % 3);
                    worst_tan = worst_tan
                        .max(w[t1].eval(&basis, p).abs())
                        .max(w[t2].eval(&basis, p).abs());
                }
            }
        }
    }
    assert!(worst_bn <= 1e-10, "b.n face value {worst_bn:.2e}");
    assert!(worst_tan <= 1e-10, "tangential curl face value {worst_tan:.2e}");

    println!(
        "criterion 2: pass (sine factors {worst_factor:.2e}, velocity {worst_v:.2e}, b.n {worst_bn:.2e}, tangential curl {worst_tan:.2e})"
    );
}

// ------------------------------------------------------------ criterion 3

#[test]
fn criterion_03_single_mode_decays_match_closed_forms() {
    let basis = desk_basis();
    let k2_of = |ks: [usize; 3]| {
        basis.axis(0).kappa(ks[0]).powi(2)
            + basis.axis(1).kappa(ks[1]).powi(2)
            + basis.axis(2).kappa(ks[2]).powi(2)
    };

    // resistive decay, both schemes, every stored mode at once
    let mut b = basis.zeros_magnetic();
    for (i, comp) in b.iter_mut().enumerate() {
        fill_pseudo(comp, 11 + i);
    }
    solenoidal_project(&basis, &mut b);
    let v0 = basis.zeros_velocity();
    let dt = 1e-3;
    // at wavevectors where the divergence constraint pins a component
    // to zero, the projection leaves rounding dust below this floor;
    // the closed form only governs the genuine solenoidal content
    let bscale = b
        .iter()
        .map(|f| f.c.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
        .fold(0.0, f64::max);
    let dust = 64.0 * f64::EPSILON * bscale;
    let mut worst_ind = 0.0f64;
    for scheme in [ImexScheme::BackwardEuler, ImexScheme::Trapezoid] {
        let th = match scheme {
            ImexScheme::BackwardEuler => 1.0,
            ImexScheme::Trapezoid => 0.5,
        };
        let new = induction_step(&basis, &b, &v0, &b, dt, scheme);
        for i in 0..3 {
            for (idx, &c) in b[i].c.indexed_iter() {
                let got = new[i].c[[idx.0, idx.1, idx.2]];
                if c.abs() <= dust {
                    assert!(got.abs() <= dust, "dust grew: comp {i} idx {idx:?}: {got}");
                    continue;
                }
                let mut ks = [idx.0, idx.1, idx.2];
                ks[i] += 1;
                let e = dt * k2_of(ks);
                let want = c * (1.0 - (1.0 - th) * e) / (1.0 + th * e);
                let rel = (got - want).abs() / want.abs();
                assert!(
                    rel <= 1e-12,
                    "induction comp {i} idx {idx:?}: {got} vs {want} (rel {rel:.2e})"
                );
                worst_ind = worst_ind.max(rel);
            }
        }
    }

    // continuity eps-diffusion, both schemes
    let mut rho = basis.zeros_density();
    fill_pseudo(&mut rho, 29);
    let eps = 0.05;
    let empty = cavmhd::field_operators::FieldSum::new();
    let mut worst_cont = 0.0f64;
    for scheme in [ImexScheme::BackwardEuler, ImexScheme::Trapezoid] {
        let th = match scheme {
            ImexScheme::BackwardEuler => 1.0,
            ImexScheme::Trapezoid => 0.5,
        };
        let new = continuity_step(&basis, &rho, &empty, eps, dt, scheme);
        for (idx, &c) in rho.c.indexed_iter() {
            let e = eps * dt * k2_of([idx.0, idx.1, idx.2]);
            let want = c * (1.0 - (1.0 - th) * e) / (1.0 + th * e);
            let rel =
                (new.c[[idx.0, idx.1, idx.2]] - want).abs() / want.abs().max(1e-300);
            worst_cont = worst_cont.max(rel);
        }
    }
    assert!(worst_cont <= 1e-12, "continuity decay off by {worst_cont:.2e}");

    // viscous decay at uniform density: the all-even velocity mode is
    // orthogonal to every rigid row, so one implicit step with the
    // explicit bulk forcing reproduces the scalar amplification factor
    let (mu, lambda) = (0.05, 0.1);
    let rho_bar = 1.0;
    let dt_m = 2e-3;
    let mut rho_u = basis.zeros_density();
    rho_u.c[[0, 0, 0]] = rho_bar;
    let vol: f64 = basis.cavity.lengths.iter().product();
    let rigid = RigidParams::new(1.0, IDENTITY3, rho_bar * vol).unwrap();
    let c = 0usize;
    let idx = [1usize, 1, 1];
    let amp = 0.37;
    let mut u_old = YnVec::zeros(&basis);
    u_old.v[c].c[idx] = amp;

    let sys = GalerkinMomentumSystem::new(&basis, &rho_u, rigid, dt_m * mu);
    let sys0 = GalerkinMomentumSystem::new(&basis, &rho_u, rigid, 0.0);
    let mut rhs = sys0.mass_apply(&u_old);
    let bulk = lambda + mu / 3.0;
    let div_v = divergence(&basis, &u_old.v);
    let dims = basis.velocity_dims();
    for cc in 0..3 {
        for part in &div_v.parts {
            let dp = basis.deriv(part, cc);
            rhs.v[cc].c.scaled_add(
                dt_m * bulk,
                &basis.pair_tests(
                    &dp,
                    VELOCITY_PARITY,
                    dims,
                    [cavmhd::trig::Weight::One; 3],
                ),
            );
        }
    }
    let pc = sys.preconditioner();
    let (u_new, _) = momentum_step(&sys, &pc, &rhs, &YnVec::zeros(&basis), 1e-14, 400).unwrap();
    let kap2 = basis.axis(0).kappa(2);
    let k2 = 3.0 * kap2 * kap2;
    let want = amp * (1.0 - dt_m * bulk * kap2 * kap2 / rho_bar)
        / (1.0 + dt_m * mu * k2 / rho_bar);
    let got = u_new.v[c].c[idx];
    let rel_m = (got - want).abs() / want.abs();
    assert!(rel_m <= 1e-12, "momentum decay {got} vs {want} (rel {rel_m:.2e})");

    println!(
        "criterion 3: pass (induction {worst_ind:.2e}, continuity {worst_cont:.2e}, momentum {rel_m:.2e} rel)"
    );
}

// ------------------------------------------------------------ criterion 4

#[test]
fn criterion_04_conserved_quantities_track_on_the_coupled_run() {
    let (run1, run2) = be_pair();
    let (r1, r2) = (&run1.report, &run2.report);

    for (r, dt) in [(r1, run1.dt), (r2, run2.dt)] {
        println!(
            "  dt {dt:.3e}: mass {:.3e}, divb modal {:.3e} / nodal {:.3e}, |P| {:.3e}, |M| {:.3e}, Q {:.3e}",
            r.mass_drift, r.divb_max_modal, r.divb_max_nodal, r.p_drift, r.m_drift, r.q_orth_err
        );
    }
    for (r, dt) in [(r1, run1.dt), (r2, run2.dt)] {
        assert!(r.mass_drift <= 1e-10, "mass drift {} at dt {dt}", r.mass_drift);
        assert_eq!(r.divb_max_modal, 0.0, "modal div b at dt {dt}");
        assert!(r.divb_max_nodal <= 1e-10, "nodal div b {} at dt {dt}", r.divb_max_nodal);
        assert!(r.p_drift <= 1e-6, "|P| drift {} at dt {dt}", r.p_drift);
        assert!(r.q_orth_err <= 1e-10, "Q orthogonality {} at dt {dt}", r.q_orth_err);
    }
    // drifts must halve at the scheme order, except when pinned at the
    // momentum-solver noise floor where no order is measurable
    let floor = 1e-10;
    assert!(
        shrinks(r1.p_drift, r2.p_drift, floor, 0.9),
        "|P| drift {} -> {} under dt halving",
        r1.p_drift,
        r2.p_drift
    );
    assert!(
        shrinks(r1.m_drift, r2.m_drift, floor, 0.9),
        "|M| drift {} -> {} under dt halving",
        r1.m_drift,
        r2.m_drift
    );

    println!(
        "criterion 4: pass (mass {:.2e}, div b modal {:.1}/nodal {:.2e}, |P| {:.2e} -> {:.2e} [{}], |M| {:.2e} -> {:.2e} [{}], Q {:.2e})",
        r1.mass_drift,
        r1.divb_max_modal,
        r1.divb_max_nodal,
        r1.p_drift,
        r2.p_drift,
        order_label(r1.p_drift, r2.p_drift, floor),
        r1.m_drift,
        r2.m_drift,
        order_label(r1.m_drift, r2.m_drift, floor),
        r1.q_orth_err.max(r2.q_orth_err),
    );
}

// ------------------------------------------------------------ criterion 5

#[test]
fn criterion_05_energy_balance_residual_shrinks_at_order() {
    let (be1, be2) = be_pair();
    let (tr1, tr2) = tr_pair();

    let f0 = be1.rows[0].f;
    let floor = 1e-12 * f0;

    for (run, label, min_order) in [
        ((be1, be2), "backward Euler", 0.9),
        ((tr1, tr2), "trapezoid", 1.8),
    ] {
        let (a, b) = run;
        let (v1, v2) = (slack_needed(&a.rows), slack_needed(&b.rows));
        let (m1, m2) = (max_residual_magnitude(&a.rows), max_residual_magnitude(&b.rows));
        println!(
            "  {label}: slack {v1:.3e} -> {v2:.3e} [{}], |residual| {m1:.3e} -> {m2:.3e} [{}], floor {floor:.1e}",
            order_label(v1, v2, floor),
            order_label(m1, m2, floor)
        );
        // the positive excursions are the slack that makes the energy
        // inequality and F-monotonicity hold; both the slack and the
        // full residual magnitude must shrink at the scheme order
        assert!(
            shrinks(v1, v2, floor, min_order),
            "{label}: slack {v1:.3e} -> {v2:.3e} misses order {min_order}"
        );
        assert!(
            shrinks(m1, m2, floor, min_order),
            "{label}: residual magnitude {m1:.3e} -> {m2:.3e} misses order {min_order}"
        );
    }

    let (vb1, vb2) = (slack_needed(&be1.rows), slack_needed(&be2.rows));
    let (mb1, mb2) = (
        max_residual_magnitude(&be1.rows),
        max_residual_magnitude(&be2.rows),
    );
    let (vt1, vt2) = (slack_needed(&tr1.rows), slack_needed(&tr2.rows));
    let (mt1, mt2) = (
        max_residual_magnitude(&tr1.rows),
        max_residual_magnitude(&tr2.rows),
    );
    println!(
        "criterion 5: pass (BE slack {:.2e} -> {:.2e} [{}], |res| {:.2e} -> {:.2e} [{}]; TR slack {:.2e} -> {:.2e} [{}], |res| {:.2e} -> {:.2e} [{}])",
        vb1,
        vb2,
        order_label(vb1, vb2, floor),
        mb1,
        mb2,
        order_label(mb1, mb2, floor),
        vt1,
        vt2,
        order_label(vt1, vt2, floor),
        mt1,
        mt2,
        order_label(mt1, mt2, floor),
    );
}

// ------------------------------------------------------------ criterion 6

#[test]
fn criterion_06_free_rigid_body_conserves_energy_and_momentum() {
    let i_c = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
    let torque = [0.0; 3];
    let iw = |w: [f64; 3]| [i_c[0][0] * w[0], i_c[1][1] * w[1], i_c[2][2] * w[2]];
    let energy = |w: [f64; 3]| 0.5 * (w[0] * iw(w)[0] + w[1] * iw(w)[1] + w[2] * iw(w)[2]);

    let w0 = [0.2, 1.0, 0.4];
    let (e0, l0) = (energy(w0), norm(iw(w0)));
    let dt = 1e-3;
    let mut w = w0;
    let mut worst_e = 0.0f64;
    let mut worst_l = 0.0f64;
    for _ in 0..10_000 {
        w = euler_rigid_step(w, &i_c, torque, dt);
        worst_e = worst_e.max((energy(w) - e0).abs() / e0);
        worst_l = worst_l.max((norm(iw(w)) - l0).abs() / l0);
    }
    assert!(worst_e <= 1e-8, "kinetic energy drift {worst_e:.2e}");
    assert!(worst_l <= 1e-8, "|I omega| drift {worst_l:.2e}");

    // dt/10 reference trajectory over the same horizon
    let mut wr = w0;
    for _ in 0..100_000 {
        wr = euler_rigid_step(wr, &i_c, torque, dt / 10.0);
    }
    let dev = norm(sub(w, wr)) / norm(wr);
    assert!(dev <= 1e-8, "deviation from dt/10 reference {dev:.2e}");

    println!(
        "criterion 6: pass (energy drift {worst_e:.2e}, momentum drift {worst_l:.2e}, reference deviation {dev:.2e})"
    );
}

// ------------------------------------------------------------ criterion 7

#[test]
fn criterion_07_spatial_refinement_converges_to_the_reference() {
    let mut cfg = RunConfig::default();
    cfg.n = [24; 3];
    cfg.n_levels = vec![[8; 3], [12; 3], [16; 3]];
    cfg.preset = Preset::SmallData;
    cfg.seed = 7;
    cfg.t_final = 1.0;
    cfg.stride = 50;
    cfg.quiet = true;
    cfg.out_dir = scratch("refine-n");
    let rep = refine_n_study(&cfg).expect("spatial refinement study");
    assert_eq!(rep.rel_terminal.len(), 3);
    for e in &rep.rel_terminal {
        assert!(*e > 0.0, "coarse level error {e} should be positive");
    }
    assert!(
        rep.rel_terminal[0] > rep.rel_terminal[1] && rep.rel_terminal[1] > rep.rel_terminal[2],
        "errors not strictly decreasing in N: {:?}",
        rep.rel_terminal
    );

    // the functional of a state against itself vanishes identically
    let mut cfg8 = RunConfig::default();
    cfg8.n = [8; 3];
    cfg8.preset = Preset::SmallData;
    cfg8.seed = 7;
    let basis = build_basis(&cfg8).unwrap();
    let mut state = initial_state(&cfg8, &basis).unwrap();
    let step = StepConfig::new(5e-3, ImexScheme::BackwardEuler);
    for _ in 0..5 {
        state = coupled_step(&basis, &state, &step).unwrap().0;
    }
    let self_err = relative_energy(&basis, &state, &state).unwrap().total;
    assert_eq!(self_err, 0.0, "self relative energy");

    fs::remove_dir_all(&cfg.out_dir).ok();
    println!(
        "criterion 7: pass (E(8,12,16 | 24) = {:.3e}, {:.3e}, {:.3e}; self 0.0)",
        rep.rel_terminal[0], rep.rel_terminal[1], rep.rel_terminal[2]
    );
}

// ------------------------------------------------------------ criterion 8

#[test]
fn criterion_08_vanishing_regularization_is_monotone() {
    let mut cfg = RunConfig::default();
    cfg.n = [16; 3];
    cfg.preset = Preset::SmallData;
    cfg.seed = 5;
    cfg.t_final = 1.0;
    cfg.stride = 100;
    cfg.quiet = true;
    cfg.eps_levels = vec![1e-2, 1e-3, 1e-4];
    cfg.delta_levels = vec![1e-2, 1e-3, 1e-4];
    cfg.beta = 5.0;
    cfg.gamma = 1.4;

    cfg.out_dir = scratch("cont-eps");
    let eps_table = continuation_run(&cfg, ContinuationParam::Eps).expect("eps continuation");
    assert!(!eps_table.has_failures());
    let e01 = eps_table.levels[0].rel_to_next.unwrap();
    let e12 = eps_table.levels[1].rel_to_next.unwrap();
    assert!(
        e01 > e12 && e12 > 0.0,
        "eps relative energies not monotone: {e01:.3e} vs {e12:.3e}"
    );
    fs::remove_dir_all(&cfg.out_dir).ok();

    cfg.out_dir = scratch("cont-delta");
    let dl_table = continuation_run(&cfg, ContinuationParam::Delta).expect("delta continuation");
    assert!(!dl_table.has_failures());
    let d01 = dl_table.levels[0].rel_to_next.unwrap();
    let d12 = dl_table.levels[1].rel_to_next.unwrap();
    assert!(
        d01 > d12 && d12 > 0.0,
        "delta relative energies not monotone: {d01:.3e} vs {d12:.3e}"
    );
    // the delta-part of the internal energy is linear in delta
    let ratios: Vec<f64> = dl_table
        .levels
        .iter()
        .map(|l| l.delta_internal / l.value)
        .collect();
    let (rmin, rmax) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    assert!(
        rmax / rmin <= 1.2,
        "delta internal energy not linear in delta: ratios {ratios:?}"
    );
    fs::remove_dir_all(&cfg.out_dir).ok();

    println!(
        "criterion 8: pass (eps E {e01:.3e} > {e12:.3e}; delta E {d01:.3e} > {d12:.3e}; linearity spread {:.3})",
        rmax / rmin
    );
}

// ------------------------------------------------------------ criterion 9

fn simulated_trajectory(dt: f64, steps: usize) -> (BasisSet, Vec<SystemState>) {
    let mut cfg = RunConfig::default();
    cfg.n = [16; 3];
    cfg.preset = Preset::SmallData;
    cfg.seed = 13;
    cfg.omega0 = Some([0.25, -0.15, 0.3]);
    // an anisotropic body keeps the rigid rows dynamically active, so
    // every test in the battery carries a first-order signal well above
    // the subleading terms
    cfg.i_body = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
    let basis = build_basis(&cfg).unwrap();
    let state = initial_state(&cfg, &basis).unwrap();
    let mut step = StepConfig::new(dt, ImexScheme::BackwardEuler);
    step.pcg_tol = 1e-13;
    step.pcg_maxiter = 800;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(state);
    for _ in 0..steps {
        let next = coupled_step(&basis, traj.last().unwrap(), &step).unwrap().0;
        traj.push(next);
    }
    (basis, traj)
}

#[test]
fn criterion_09_weak_residuals_converge_and_manufactured_decay_is_exact() {
    let tests = standard_test_set();
    assert_eq!(tests.len(), 20);

    let (basis, traj1) = simulated_trajectory(2.5e-3, 100);
    let rows1 = weak_residuals(&basis, &traj1, &tests).unwrap();
    drop(traj1);
    let (_, traj2) = simulated_trajectory(1.25e-3, 200);
    let rows2 = weak_residuals(&basis, &traj2, &tests).unwrap();
    drop(traj2);

    let floor = 1e-12;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (a, b) in rows1.iter().zip(&rows2) {
        let (r1, r2) = (a.residual.abs(), b.residual.abs());
        println!(
            "  test {:2} ({:10}): {r1:.3e} -> {r2:.3e}  [{}]",
            a.index,
            a.equation,
            order_label(r1, r2, floor)
        );
        assert!(
            shrinks(r1, r2, floor, 0.9),
            "test {} ({}): residual {r1:.3e} -> {r2:.3e} misses order",
            a.index,
            a.equation
        );
        if r1 > floor {
            let o = (r1 / r2.max(f64::MIN_POSITIVE)).log2();
            lo = lo.min(o);
            hi = hi.max(o);
        }
    }

    // manufactured resistive decay: the solenoidal mode pair at
    // wavevector (1,1,0) sampled on its analytic trajectory; the weak
    // residual is pure Simpson error on a smooth integrand
    let amp = 1e-3;
    let kap = [basis.axis(0).kappa(1), basis.axis(1).kappa(1)];
    let k2 = kap[0] * kap[0] + kap[1] * kap[1];
    let vol: f64 = basis.cavity.lengths.iter().product();
    let phys = PhysParams::new(1.0, 1.4, 0.05, 0.0).unwrap();
    let reg = RegParams::new(0.0, 0.0, 5.0, 1.4).unwrap();
    let rigid_params = RigidParams::new(1.0, IDENTITY3, vol).unwrap();
    let intervals = 128usize;
    let horizon = 1.0;
    let mut man = Vec::with_capacity(intervals + 1);
    for j in 0..=intervals {
        let t = horizon * j as f64 / intervals as f64;
        let decay = (-k2 * t).exp();
        let mut fluid = FluidState::rest(&basis, 1.0);
        fluid.b[0].c[[0, 1, 0]] = amp * decay;
        fluid.b[1].c[[1, 0, 0]] = -amp * decay;
        man.push(SystemState {
            fluid,
            rigid: RigidState::default(),
            rotation: RotationState::new(IDENTITY3, t).unwrap(),
            phys,
            reg,
            rigid_params,
        });
    }
    let mag_tests: Vec<_> = standard_test_set()
        .into_iter()
        .filter(|t| matches!(t.space, SpaceTest::MagneticMode(..)))
        .collect();
    let man_rows = weak_residuals(&basis, &man, &mag_tests).unwrap();
    let worst_man = man_rows
        .iter()
        .fold(0.0f64, |m, r| m.max(r.residual.abs()));
    assert!(worst_man <= 1e-10, "manufactured residual {worst_man:.2e}");

    println!(
        "criterion 9: pass (20 residual orders within [{lo:.2}, {hi:.2}]; manufactured {worst_man:.2e})"
    );
}

// ----------------------------------------------------------- criterion 10

#[test]
fn criterion_10_reruns_are_byte_identical() {
    let mut cfg = RunConfig::default();
    cfg.n = [16; 3];
    cfg.preset = Preset::SmallData;
    cfg.seed = 21;
    cfg.dt = Some(2e-3);
    cfg.t_final = 0.2;
    cfg.stride = 10;
    cfg.quiet = true;

    cfg.out_dir = scratch("det-a");
    run_simulation(&cfg).expect("first run");
    let a = fs::read(cfg.out_dir.join("series.csv")).unwrap();
    fs::remove_dir_all(&cfg.out_dir).ok();

    cfg.out_dir = scratch("det-b");
    run_simulation(&cfg).expect("second run");
    let b = fs::read(cfg.out_dir.join("series.csv")).unwrap();
    fs::remove_dir_all(&cfg.out_dir).ok();

    assert_eq!(a, b, "series.csv differs between identical runs");
    println!("criterion 10: pass (series.csv identical, {} bytes)", a.len());
}
