//! Run orchestration: flat key=value configuration, initial-condition
//! presets, the simulation loop with CSV / VTK / checkpoint output, and
//! the continuation, refinement, and weak-vs-strong studies.
//!
//! Output contracts kept here: the series CSV schema is the fixed
//! SERIES_HEADER (columns are never reordered, absent values are left
//! empty); field dumps are legacy-ASCII STRUCTURED_POINTS on the
//! collocation grid; checkpoints start with the CAVMHD1 magic, a
//! self-describing text header, and little-endian f64 blocks in the
//! order rho, v, b, omega, xi, Q, t. Repeated runs with the same
//! config and seed produce byte-identical series files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cavity_basis::{
    build_bases, BasisSet, BoxCavity, SpectralResolution, TaggedField,
};
use crate::diagnostics::{
    energy_report, invariant_report, relative_energy, EnergyReport, InvariantBaseline,
    InvariantReport,
};
use crate::error::{CavError, Result};
use crate::field_operators::solenoidal_project;
use crate::frame_kinematics::{RigidParams, RotationState};
use crate::linalg::{Mat3, Vec3, IDENTITY3};
use crate::subsolvers::{bulk_stable_dt, coupled_step, stable_dt, ImexScheme, StepConfig};
use crate::system_state::{FluidState, PhysParams, RegParams, RigidState, SystemState};

pub const SERIES_HEADER: &str = "t,F,kinetic,magnetic,internal,dissipation,balance_residual,mass_drift,divb_max,P_norm,M_norm,M_drift,Q_orth_err,xi_x,xi_y,xi_z,omega_x,omega_y,omega_z,min_rho,rel_energy";

pub const CHECKPOINT_MAGIC: &str = "CAVMHD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyMode {
    Single,
    ContinuationEps,
    ContinuationDelta,
    RefineDt,
    RefineN,
    WeakVsStrong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Rest,
    SmallData,
    SpinUp,
    ManufacturedDecay,
}

/// One density perturbation mode (all-cosine indices).
#[derive(Clone, Copy, Debug)]
pub struct RhoMode {
    pub k: [usize; 3],
    pub amp: f64,
}

/// One vector-field perturbation mode: component, per-axis mode
/// numbers (the component's own axis is a sine index >= 1 for v and b
/// alike), amplitude.
#[derive(Clone, Copy, Debug)]
pub struct VecMode {
    pub comp: usize,
    pub k: [usize; 3],
    pub amp: f64,
}

/// Everything a run needs, filled from defaults plus a flat key=value
/// file. `quiet` is CLI-only and not a file key.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub lengths: [f64; 3],
    pub n: [usize; 3],
    pub dealias: bool,
    pub a: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
    pub eps: f64,
    pub delta: f64,
    pub beta: f64,
    pub m_body: f64,
    pub i_body: Mat3,
    /// uniform initial fluid density; the fluid mass budget m_F is
    /// rho0 times the cavity volume
    pub rho0: f64,
    pub preset: Preset,
    /// perturbation scale; None means the preset default
    pub amplitude: Option<f64>,
    /// initial body angular velocity; None means the preset default
    pub omega0: Option<Vec3>,
    pub seed: u64,
    pub rho_modes: Vec<RhoMode>,
    pub v_modes: Vec<VecMode>,
    pub b_modes: Vec<VecMode>,
    /// explicit step; None derives it from cfl and the bulk bound
    pub dt: Option<f64>,
    pub cfl: f64,
    pub t_final: f64,
    pub scheme: ImexScheme,
    pub picard_max: usize,
    pub constraint: bool,
    /// steps between CSV rows / checkpoints
    pub stride: usize,
    pub out_dir: PathBuf,
    /// field dumps every this many CSV rows; 0 = first and last only
    pub vtk_every: usize,
    pub study: StudyMode,
    pub eps_levels: Vec<f64>,
    pub delta_levels: Vec<f64>,
    pub dt_levels: usize,
    pub n_levels: Vec<[usize; 3]>,
    pub coarse_n: Option<[usize; 3]>,
    pub quiet: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pi = std::f64::consts::PI;
        RunConfig {
            lengths: [pi; 3],
            n: [8; 3],
            dealias: true,
            a: 1.0,
            gamma: 1.4,
            mu: 0.05,
            lambda: 0.0,
            eps: 0.0,
            delta: 0.0,
            beta: 5.0,
            m_body: 1.0,
            i_body: IDENTITY3,
            rho0: 1.0,
            preset: Preset::Rest,
            amplitude: None,
            omega0: None,
            seed: 0,
            rho_modes: Vec::new(),
            v_modes: Vec::new(),
            b_modes: Vec::new(),
            dt: None,
            cfl: 0.4,
            t_final: 1.0,
            scheme: ImexScheme::BackwardEuler,
            picard_max: 2,
            constraint: false,
            stride: 10,
            out_dir: PathBuf::from("out"),
            vtk_every: 0,
            study: StudyMode::Single,
            eps_levels: vec![1e-2, 1e-3, 1e-4],
            delta_levels: vec![1e-2, 1e-3, 1e-4],
            dt_levels: 3,
            n_levels: vec![[8; 3], [12; 3], [16; 3]],
            coarse_n: None,
            quiet: false,
        }
    }
}

impl RunConfig {
    pub fn phys(&self) -> Result<PhysParams> {
        PhysParams::new(self.a, self.gamma, self.mu, self.lambda)
    }

    pub fn reg(&self) -> Result<RegParams> {
        RegParams::new(self.eps, self.delta, self.beta, self.gamma)
    }

    pub fn rigid(&self) -> Result<RigidParams> {
        let volume: f64 = self.lengths.iter().product();
        RigidParams::new(self.m_body, self.i_body, self.rho0 * volume)
    }

    /// Every constraint that does not need a basis.
    pub fn validate(&self) -> Result<()> {
        self.phys()?;
        self.reg()?;
        self.rigid()?;
        BoxCavity::new(self.lengths)?;
        if !(self.rho0 > 0.0) {
            return Err(CavError::Config(format!(
                "initial density rho0 must be positive, got {}",
                self.rho0
            )));
        }
        if !(self.t_final > 0.0) {
            return Err(CavError::Config(format!(
                "horizon t_final must be positive, got {}",
                self.t_final
            )));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(CavError::Config(format!("dt must be positive, got {dt}")));
            }
        }
        if !(self.cfl > 0.0) {
            return Err(CavError::Config(format!("cfl must be positive, got {}", self.cfl)));
        }
        if self.stride == 0 {
            return Err(CavError::Config("output stride must be at least 1".into()));
        }
        if self.n.iter().any(|&n| n < 2) {
            return Err(CavError::Config(format!(
                "resolution must be at least 2 modes per axis, got {:?}",
                self.n
            )));
        }
        Ok(())
    }
}

fn cfg_err(line: usize, what: impl std::fmt::Display) -> CavError {
    CavError::Config(format!("config line {line}: {what}"))
}

fn parse_f64_token(tok: &str) -> Option<f64> {
    match tok.trim() {
        "pi" => Some(std::f64::consts::PI),
        t => t.parse().ok(),
    }
}

fn parse_f64_list(val: &str) -> Option<Vec<f64>> {
    val.split(',').map(parse_f64_token).collect()
}

fn parse_usize_list(val: &str) -> Option<Vec<usize>> {
    val.split(',').map(|t| t.trim().parse().ok()).collect()
}

fn triple<T: Copy>(v: &[T]) -> Option<[T; 3]> {
    (v.len() == 3).then(|| [v[0], v[1], v[2]])
}

fn parse_vec_modes(val: &str) -> Option<Vec<VecMode>> {
    val.split(';')
        .filter(|e| !e.trim().is_empty())
        .map(|entry| {
            let f = parse_f64_list(entry)?;
            if f.len() != 5 {
                return None;
            }
            Some(VecMode {
                comp: f[0] as usize,
                k: [f[1] as usize, f[2] as usize, f[3] as usize],
                amp: f[4],
            })
        })
        .collect()
}

fn parse_rho_modes(val: &str) -> Option<Vec<RhoMode>> {
    val.split(';')
        .filter(|e| !e.trim().is_empty())
        .map(|entry| {
            let f = parse_f64_list(entry)?;
            if f.len() != 4 {
                return None;
            }
            Some(RhoMode {
                k: [f[0] as usize, f[1] as usize, f[2] as usize],
                amp: f[3],
            })
        })
        .collect()
}

fn apply_key(cfg: &mut RunConfig, key: &str, val: &str, line: usize) -> Result<()> {
    let bad_val = || cfg_err(line, format!("cannot parse value `{val}` for key `{key}`"));
    macro_rules! num {
        () => {
            parse_f64_token(val).ok_or_else(bad_val)?
        };
    }
    match key {
        "box.lengths" => {
            cfg.lengths = triple(&parse_f64_list(val).ok_or_else(bad_val)?).ok_or_else(bad_val)?
        }
        "grid.n" => {
            cfg.n = triple(&parse_usize_list(val).ok_or_else(bad_val)?).ok_or_else(bad_val)?
        }
        "grid.dealias" => cfg.dealias = val.parse().map_err(|_| bad_val())?,
        "phys.a" => cfg.a = num!(),
        "phys.gamma" => cfg.gamma = num!(),
        "phys.mu" => cfg.mu = num!(),
        "phys.lambda" => cfg.lambda = num!(),
        "reg.eps" => cfg.eps = num!(),
        "reg.delta" => cfg.delta = num!(),
        "reg.beta" => cfg.beta = num!(),
        "rigid.m_body" => cfg.m_body = num!(),
        "rigid.i_body" => {
            let f = parse_f64_list(val).ok_or_else(bad_val)?;
            cfg.i_body = match f.len() {
                3 => [[f[0], 0.0, 0.0], [0.0, f[1], 0.0], [0.0, 0.0, f[2]]],
                9 => [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]],
                _ => return Err(bad_val()),
            };
        }
        "rigid.rho0" => cfg.rho0 = num!(),
        "ic.preset" => {
            cfg.preset = match val {
                "rest" => Preset::Rest,
                "small_data" => Preset::SmallData,
                "spin_up" => Preset::SpinUp,
                "manufactured_decay" => Preset::ManufacturedDecay,
                _ => return Err(cfg_err(line, format!("unknown preset `{val}`"))),
            }
        }
        "ic.amplitude" => cfg.amplitude = Some(num!()),
        "ic.omega0" => {
            cfg.omega0 =
                Some(triple(&parse_f64_list(val).ok_or_else(bad_val)?).ok_or_else(bad_val)?)
        }
        "ic.seed" => cfg.seed = val.trim().parse().map_err(|_| bad_val())?,
        "ic.rho_modes" => cfg.rho_modes = parse_rho_modes(val).ok_or_else(bad_val)?,
        "ic.v_modes" => cfg.v_modes = parse_vec_modes(val).ok_or_else(bad_val)?,
        "ic.b_modes" => cfg.b_modes = parse_vec_modes(val).ok_or_else(bad_val)?,
        "time.dt" => cfg.dt = Some(num!()),
        "time.cfl" => cfg.cfl = num!(),
        "time.t_final" => cfg.t_final = num!(),
        "time.scheme" => {
            cfg.scheme = match val {
                "backward_euler" => ImexScheme::BackwardEuler,
                "trapezoid" => ImexScheme::Trapezoid,
                _ => return Err(cfg_err(line, format!("unknown scheme `{val}`"))),
            }
        }
        "time.picard_max" => cfg.picard_max = val.trim().parse().map_err(|_| bad_val())?,
        "time.constraint" => cfg.constraint = val.parse().map_err(|_| bad_val())?,
        "output.stride" => cfg.stride = val.trim().parse().map_err(|_| bad_val())?,
        "output.dir" => cfg.out_dir = PathBuf::from(val),
        "output.vtk_every" => cfg.vtk_every = val.trim().parse().map_err(|_| bad_val())?,
        "study.mode" => {
            cfg.study = match val {
                "single" => StudyMode::Single,
                "continuation_eps" => StudyMode::ContinuationEps,
                "continuation_delta" => StudyMode::ContinuationDelta,
                "refine_dt" => StudyMode::RefineDt,
                "refine_n" => StudyMode::RefineN,
                "weak_vs_strong" => StudyMode::WeakVsStrong,
                _ => return Err(cfg_err(line, format!("unknown study mode `{val}`"))),
            }
        }
        "study.eps_levels" => cfg.eps_levels = parse_f64_list(val).ok_or_else(bad_val)?,
        "study.delta_levels" => cfg.delta_levels = parse_f64_list(val).ok_or_else(bad_val)?,
        "study.dt_levels" => cfg.dt_levels = val.trim().parse().map_err(|_| bad_val())?,
        "study.n_levels" => {
            cfg.n_levels = parse_usize_list(val)
                .ok_or_else(bad_val)?
                .into_iter()
                .map(|k| [k; 3])
                .collect()
        }
        "study.coarse_n" => {
            let f = parse_usize_list(val).ok_or_else(bad_val)?;
            cfg.coarse_n = Some(match f.len() {
                1 => [f[0]; 3],
                3 => [f[0], f[1], f[2]],
                _ => return Err(bad_val()),
            });
        }
        _ => return Err(cfg_err(line, format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Parse config text: one `key = value` per line, `#` comments, blank
/// lines ignored. Unknown keys are rejected with their line number.
/// The result is validated.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, val) = body
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected key=value, got `{body}`")))?;
        apply_key(&mut cfg, key.trim(), val.trim(), line)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| CavError::io(path.display().to_string(), e))?;
    parse_config(&text)
}

/// Canonical echo of a config (the parseable key=value form), used for
/// run metadata.
pub fn config_echo(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let fl = |v: f64| format!("{v:e}");
    let list =
        |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
    let _ = writeln!(s, "box.lengths={}", list(&cfg.lengths));
    let _ = writeln!(s, "grid.n={},{},{}", cfg.n[0], cfg.n[1], cfg.n[2]);
    let _ = writeln!(s, "grid.dealias={}", cfg.dealias);
    let _ = writeln!(s, "phys.a={}", fl(cfg.a));
    let _ = writeln!(s, "phys.gamma={}", fl(cfg.gamma));
    let _ = writeln!(s, "phys.mu={}", fl(cfg.mu));
    let _ = writeln!(s, "phys.lambda={}", fl(cfg.lambda));
    let _ = writeln!(s, "reg.eps={}", fl(cfg.eps));
    let _ = writeln!(s, "reg.delta={}", fl(cfg.delta));
    let _ = writeln!(s, "reg.beta={}", fl(cfg.beta));
    let _ = writeln!(s, "rigid.m_body={}", fl(cfg.m_body));
    let flat: Vec<f64> = cfg.i_body.iter().flatten().copied().collect();
    let _ = writeln!(s, "rigid.i_body={}", list(&flat));
    let _ = writeln!(s, "rigid.rho0={}", fl(cfg.rho0));
    let preset = match cfg.preset {
        Preset::Rest => "rest",
        Preset::SmallData => "small_data",
        Preset::SpinUp => "spin_up",
        Preset::ManufacturedDecay => "manufactured_decay",
    };
    let _ = writeln!(s, "ic.preset={preset}");
    if let Some(a) = cfg.amplitude {
        let _ = writeln!(s, "ic.amplitude={}", fl(a));
    }
    if let Some(w) = cfg.omega0 {
        let _ = writeln!(s, "ic.omega0={}", list(&w));
    }
    let _ = writeln!(s, "ic.seed={}", cfg.seed);
    if let Some(dt) = cfg.dt {
        let _ = writeln!(s, "time.dt={}", fl(dt));
    }
    let _ = writeln!(s, "time.cfl={}", fl(cfg.cfl));
    let _ = writeln!(s, "time.t_final={}", fl(cfg.t_final));
    let scheme = match cfg.scheme {
        ImexScheme::BackwardEuler => "backward_euler",
        ImexScheme::Trapezoid => "trapezoid",
    };
    let _ = writeln!(s, "time.scheme={scheme}");
    let _ = writeln!(s, "time.picard_max={}", cfg.picard_max);
    let _ = writeln!(s, "time.constraint={}", cfg.constraint);
    let _ = writeln!(s, "output.stride={}", cfg.stride);
    let _ = writeln!(s, "output.dir={}", cfg.out_dir.display());
    let _ = writeln!(s, "output.vtk_every={}", cfg.vtk_every);
    s
}

pub fn build_basis(cfg: &RunConfig) -> Result<BasisSet> {
    build_bases(
        BoxCavity::new(cfg.lengths)?,
        SpectralResolution::new(cfg.n, cfg.dealias),
    )
}

fn apply_rho_mode(basis: &BasisSet, rho: &mut TaggedField, m: &RhoMode) -> Result<()> {
    let dims = basis.density_dims();
    if (0..3).any(|a| m.k[a] >= dims[a]) {
        return Err(CavError::Config(format!(
            "density mode {:?} outside the {:?} layout",
            m.k, dims
        )));
    }
    rho.c[m.k] += m.amp;
    Ok(())
}

fn apply_vec_mode(field: &mut [TaggedField; 3], m: &VecMode, what: &str) -> Result<()> {
    if m.comp > 2 {
        return Err(CavError::Config(format!(
            "{what} mode component {} out of range",
            m.comp
        )));
    }
    let dims = field[m.comp].c.shape().to_vec();
    let mut idx = m.k;
    if idx[m.comp] == 0 {
        return Err(CavError::Config(format!(
            "{what} mode {:?} needs a nonzero index on its own axis",
            m.k
        )));
    }
    idx[m.comp] -= 1;
    // the remaining axes of a velocity mode are sine too
    if what == "velocity" {
        for a in 0..3 {
            if a != m.comp {
                if m.k[a] == 0 {
                    return Err(CavError::Config(format!(
                        "velocity mode {:?} needs nonzero indices on every axis",
                        m.k
                    )));
                }
                idx[a] -= 1;
            }
        }
    }
    if (0..3).any(|a| idx[a] >= dims[a]) {
        return Err(CavError::Config(format!(
            "{what} mode {:?} outside the component layout {:?}",
            m.k, dims
        )));
    }
    field[m.comp].c[idx] += m.amp;
    Ok(())
}

/// Build the initial state for a config: preset first, then any
/// explicit mode lists on top, then the solenoidal projection of b and
/// the positivity check. All randomness comes from the seeded
/// generator, so a (config, seed) pair fixes the state bitwise.
pub fn initial_state(cfg: &RunConfig, basis: &BasisSet) -> Result<SystemState> {
    let phys = cfg.phys()?;
    let reg = cfg.reg()?;
    let rigid_params = cfg.rigid()?;
    let mut fluid = FluidState::rest(basis, cfg.rho0);
    let mut rigid = RigidState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut touched_b = false;

    match cfg.preset {
        Preset::Rest => {}
        Preset::SmallData => {
            let amp = cfg.amplitude.unwrap_or(1e-2);
            for k in [[1, 0, 0], [0, 1, 1], [1, 1, 1]] {
                let m = RhoMode { k, amp: amp * rng.gen_range(-1.0..1.0) };
                apply_rho_mode(basis, &mut fluid.rho, &m)?;
            }
            let v_slots = [
                (0, [1, 1, 1]),
                (0, [2, 1, 1]),
                (1, [1, 1, 1]),
                (1, [1, 2, 1]),
                (2, [1, 1, 1]),
                (2, [1, 1, 2]),
            ];
            for (comp, k) in v_slots {
                let m = VecMode { comp, k, amp: amp * rng.gen_range(-1.0..1.0) };
                apply_vec_mode(&mut fluid.v, &m, "velocity")?;
            }
            let b_slots = [(0, [1, 1, 0]), (1, [0, 1, 1]), (2, [1, 1, 1])];
            for (comp, k) in b_slots {
                let m = VecMode { comp, k, amp: amp * rng.gen_range(-1.0..1.0) };
                apply_vec_mode(&mut fluid.b, &m, "magnetic")?;
            }
            touched_b = true;
            rigid.omega = cfg.omega0.unwrap_or([0.0; 3]);
        }
        Preset::SpinUp => {
            rigid.omega = cfg.omega0.unwrap_or([0.0, 0.0, 0.5]);
        }
        Preset::ManufacturedDecay => {
            let amp = cfg.amplitude.unwrap_or(1e-3);
            apply_vec_mode(
                &mut fluid.b,
                &VecMode { comp: 0, k: [1, 1, 0], amp },
                "magnetic",
            )?;
            apply_vec_mode(
                &mut fluid.b,
                &VecMode { comp: 1, k: [1, 1, 0], amp: -amp },
                "magnetic",
            )?;
            touched_b = true;
        }
    }
    for m in &cfg.rho_modes {
        apply_rho_mode(basis, &mut fluid.rho, m)?;
    }
    for m in &cfg.v_modes {
        apply_vec_mode(&mut fluid.v, m, "velocity")?;
    }
    for m in &cfg.b_modes {
        apply_vec_mode(&mut fluid.b, m, "magnetic")?;
        touched_b = true;
    }
    if touched_b {
        solenoidal_project(basis, &mut fluid.b);
    }

    let state = SystemState {
        fluid,
        rigid,
        rotation: RotationState::identity(),
        phys,
        reg,
        rigid_params,
    };
    state.check_positivity(basis)?;
    Ok(state)
}

/// Step count for a horizon: floor(T/dt) with a relative tolerance so
/// that dividing horizons are not lost to roundoff.
fn steps_for(t_final: f64, dt: f64) -> usize {
    let x = t_final / dt;
    let r = x.round();
    if (x - r).abs() < 1e-6 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

fn resolve_dt(cfg: &RunConfig, basis: &BasisSet, state: &SystemState) -> f64 {
    cfg.dt.unwrap_or_else(|| {
        stable_dt(basis, state, cfg.cfl).min(bulk_stable_dt(basis, state, 0.9))
    })
}

fn step_config(cfg: &RunConfig, dt: f64) -> StepConfig {
    let mut sc = StepConfig::new(dt, cfg.scheme);
    sc.picard_max = cfg.picard_max;
    sc.enforce_constraint = cfg.constraint;
    sc
}

/// One CSV row of the fixed series schema.
#[derive(Clone, Debug)]
pub struct SeriesRow {
    pub t: f64,
    pub f: f64,
    pub kinetic: f64,
    pub magnetic: f64,
    pub internal: f64,
    pub dissipation: f64,
    pub balance_residual: f64,
    pub mass_drift: f64,
    pub divb_max: f64,
    pub p_norm: f64,
    pub m_norm: f64,
    pub m_drift: f64,
    pub q_orth_err: f64,
    pub xi: Vec3,
    pub omega: Vec3,
    pub min_rho: f64,
    pub rel_energy: Option<f64>,
}

fn make_row(
    basis: &BasisSet,
    state: &SystemState,
    energy: &EnergyReport,
    baseline: &InvariantBaseline,
    rel_energy: Option<f64>,
) -> SeriesRow {
    let inv = invariant_report(basis, state, Some(baseline));
    SeriesRow {
        t: state.time(),
        f: energy.f,
        kinetic: energy.kinetic,
        magnetic: energy.magnetic,
        internal: energy.internal,
        dissipation: energy.dissipation,
        balance_residual: energy.balance_residual,
        mass_drift: inv.mass_drift,
        divb_max: inv.divb_max_nodal,
        p_norm: inv.p_norm,
        m_norm: inv.m_norm,
        m_drift: inv.m_drift,
        q_orth_err: inv.q_orth_err,
        xi: state.rigid.xi,
        omega: state.rigid.omega,
        min_rho: inv.min_rho,
        rel_energy,
    }
}

fn format_row(r: &SeriesRow) -> String {
    let rel = r.rel_energy.map(|x| format!("{x:e}")).unwrap_or_default();
    format!(
        "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
        r.t,
        r.f,
        r.kinetic,
        r.magnetic,
        r.internal,
        r.dissipation,
        r.balance_residual,
        r.mass_drift,
        r.divb_max,
        r.p_norm,
        r.m_norm,
        r.m_drift,
        r.q_orth_err,
        r.xi[0],
        r.xi[1],
        r.xi[2],
        r.omega[0],
        r.omega[1],
        r.omega[2],
        r.min_rho,
        rel,
    )
}

/// Write a whole series CSV (header plus rows) in the fixed schema.
pub fn write_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut s = String::from(SERIES_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format_row(r));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CavError::io(path.display().to_string(), e))
}

/// Legacy-ASCII STRUCTURED_POINTS dump of rho, the assembled velocity
/// u and b on the collocation grid (x varies fastest, per the format).
pub fn write_vtk(path: &Path, basis: &BasisSet, state: &SystemState) -> Result<()> {
    let dims = basis.grid_dims();
    let npts = dims[0] * dims[1] * dims[2];
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "cavity fields at t={:e}", state.time());
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", dims[0], dims[1], dims[2]);
    let _ = writeln!(
        s,
        "ORIGIN {:e} {:e} {:e}",
        basis.axis(0).centered_node(0),
        basis.axis(1).centered_node(0),
        basis.axis(2).centered_node(0)
    );
    let _ = writeln!(
        s,
        "SPACING {:e} {:e} {:e}",
        basis.axis(0).spacing(),
        basis.axis(1).spacing(),
        basis.axis(2).spacing()
    );
    let _ = writeln!(s, "POINT_DATA {npts}");

    let rho = basis.inverse_transform(&state.fluid.rho);
    let _ = writeln!(s, "SCALARS rho double");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let _ = writeln!(s, "{:e}", rho[[i, j, k]]);
            }
        }
    }
    let u = state.assemble_u(basis);
    let b = [0, 1, 2].map(|c| basis.inverse_transform(&state.fluid.b[c]));
    for (name, f) in [("u", &u), ("b", &b)] {
        let _ = writeln!(s, "VECTORS {name} double");
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let _ = writeln!(
                        s,
                        "{:e} {:e} {:e}",
                        f[0][[i, j, k]],
                        f[1][[i, j, k]],
                        f[2][[i, j, k]]
                    );
                }
            }
        }
    }
    fs::write(path, s).map_err(|e| CavError::io(path.display().to_string(), e))
}

fn push_field(bytes: &mut Vec<u8>, f: &TaggedField) {
    for &x in &f.c {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
}

/// Save a checkpoint: magic line, text header, `data` sentinel, then
/// little-endian f64 blocks in the order rho, v0..v2, b0..b2, omega,
/// xi, Q (row-major), t. The write goes through a temp file and a
/// rename so an interrupted save never clobbers the last good one.
pub fn save_checkpoint(path: &Path, basis: &BasisSet, state: &SystemState) -> Result<()> {
    let mut head = String::new();
    let _ = writeln!(head, "{CHECKPOINT_MAGIC}");
    let n = basis.res.n;
    let _ = writeln!(head, "n={},{},{}", n[0], n[1], n[2]);
    let _ = writeln!(head, "dealias={}", basis.res.dealias);
    let l = basis.cavity.lengths;
    let _ = writeln!(head, "lengths={:e},{:e},{:e}", l[0], l[1], l[2]);
    let p = state.phys;
    let _ = writeln!(head, "phys={:e},{:e},{:e},{:e}", p.a, p.gamma, p.mu, p.lambda);
    let r = state.reg;
    let _ = writeln!(head, "reg={:e},{:e},{:e}", r.eps, r.delta, r.beta);
    let rp = state.rigid_params;
    let _ = writeln!(head, "rigid={:e},{:e}", rp.m_body, rp.m_fluid);
    let flat: Vec<String> = rp.i_body.iter().flatten().map(|x| format!("{x:e}")).collect();
    let _ = writeln!(head, "i_body={}", flat.join(","));
    let _ = writeln!(head, "blocks=rho,v0,v1,v2,b0,b1,b2,omega,xi,q,t");
    let _ = writeln!(head, "data");

    let mut bytes = head.into_bytes();
    push_field(&mut bytes, &state.fluid.rho);
    for c in 0..3 {
        push_field(&mut bytes, &state.fluid.v[c]);
    }
    for c in 0..3 {
        push_field(&mut bytes, &state.fluid.b[c]);
    }
    for &x in state.rigid.omega.iter().chain(state.rigid.xi.iter()) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    for row in &state.rotation.q {
        for &x in row {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes.extend_from_slice(&state.rotation.t.to_le_bytes());

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| CavError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| CavError::io(path.display().to_string(), e))
}

struct F64Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl F64Reader<'_> {
    fn take(&mut self) -> Result<f64> {
        let end = self.pos + 8;
        if end > self.data.len() {
            return Err(CavError::CheckpointFormat("data block truncated".into()));
        }
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&self.data[self.pos..end]);
        self.pos = end;
        Ok(f64::from_le_bytes(buf))
    }

    fn fill_field(&mut self, f: &mut TaggedField) -> Result<()> {
        for x in f.c.iter_mut() {
            *x = self.take()?;
        }
        Ok(())
    }
}

fn header_line<'a>(lines: &mut std::str::Lines<'a>, key: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| CavError::CheckpointFormat(format!("missing header line `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| CavError::CheckpointFormat(format!("expected `{key}=...`, got `{line}`")))
}

pub fn load_checkpoint(path: &Path) -> Result<(BasisSet, SystemState)> {
    let bytes = fs::read(path).map_err(|e| CavError::io(path.display().to_string(), e))?;
    let sentinel = b"\ndata\n";
    let split = bytes
        .windows(sentinel.len())
        .position(|w| w == sentinel)
        .ok_or_else(|| CavError::CheckpointFormat("missing data sentinel".into()))?;
    let head = std::str::from_utf8(&bytes[..split])
        .map_err(|_| CavError::CheckpointFormat("header is not utf-8".into()))?;
    let data = &bytes[split + sentinel.len()..];

    let mut lines = head.lines();
    let magic = lines.next().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(CavError::CheckpointFormat(format!(
            "bad magic `{magic}`, want `{CHECKPOINT_MAGIC}`"
        )));
    }
    let parse_list = |s: &str, what: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().ok())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CavError::CheckpointFormat(format!("cannot parse {what} `{s}`")))
    };
    let n_raw = header_line(&mut lines, "n")?;
    let n: Vec<usize> = n_raw
        .split(',')
        .map(|t| t.trim().parse().ok())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CavError::CheckpointFormat(format!("cannot parse n `{n_raw}`")))?;
    let n = triple(&n).ok_or_else(|| CavError::CheckpointFormat("n needs 3 entries".into()))?;
    let dealias: bool = header_line(&mut lines, "dealias")?
        .parse()
        .map_err(|_| CavError::CheckpointFormat("bad dealias flag".into()))?;
    let lengths = triple(&parse_list(header_line(&mut lines, "lengths")?, "lengths")?)
        .ok_or_else(|| CavError::CheckpointFormat("lengths needs 3 entries".into()))?;
    let phys_v = parse_list(header_line(&mut lines, "phys")?, "phys")?;
    if phys_v.len() != 4 {
        return Err(CavError::CheckpointFormat("phys needs 4 entries".into()));
    }
    let reg_v = parse_list(header_line(&mut lines, "reg")?, "reg")?;
    if reg_v.len() != 3 {
        return Err(CavError::CheckpointFormat("reg needs 3 entries".into()));
    }
    let rigid_v = parse_list(header_line(&mut lines, "rigid")?, "rigid")?;
    if rigid_v.len() != 2 {
        return Err(CavError::CheckpointFormat("rigid needs 2 entries".into()));
    }
    let ib = parse_list(header_line(&mut lines, "i_body")?, "i_body")?;
    if ib.len() != 9 {
        return Err(CavError::CheckpointFormat("i_body needs 9 entries".into()));
    }
    let i_body = [[ib[0], ib[1], ib[2]], [ib[3], ib[4], ib[5]], [ib[6], ib[7], ib[8]]];
    header_line(&mut lines, "blocks")?;

    let basis = build_bases(BoxCavity::new(lengths)?, SpectralResolution::new(n, dealias))?;
    let phys = PhysParams::new(phys_v[0], phys_v[1], phys_v[2], phys_v[3])?;
    let reg = RegParams::new(reg_v[0], reg_v[1], reg_v[2], phys_v[1])?;
    let rigid_params = RigidParams::new(rigid_v[0], i_body, rigid_v[1])?;

    let mut fluid = FluidState::rest(&basis, 0.0);
    let mut rd = F64Reader { data, pos: 0 };
    rd.fill_field(&mut fluid.rho)?;
    for c in 0..3 {
        rd.fill_field(&mut fluid.v[c])?;
    }
    for c in 0..3 {
        rd.fill_field(&mut fluid.b[c])?;
    }
    let mut rigid = RigidState::default();
    for c in 0..3 {
        rigid.omega[c] = rd.take()?;
    }
    for c in 0..3 {
        rigid.xi[c] = rd.take()?;
    }
    let mut q = [[0.0; 3]; 3];
    for row in &mut q {
        for x in row.iter_mut() {
            *x = rd.take()?;
        }
    }
    let t = rd.take()?;
    if rd.pos != data.len() {
        return Err(CavError::CheckpointFormat(format!(
            "{} trailing bytes after the t block",
            data.len() - rd.pos
        )));
    }
    let state = SystemState {
        fluid,
        rigid,
        rotation: RotationState::new(q, t)?,
        phys,
        reg,
        rigid_params,
    };
    Ok((basis, state))
}

fn build_id() -> String {
    match option_env!("CAVMHD_GIT_DESC") {
        Some(desc) => format!("{}-{}+{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"), desc),
        None => format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    }
}

/// What a single run leaves behind. `abort` carries the step failure,
/// if any; the artifacts on disk then end at the last good row.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub dt: f64,
    pub n_steps: usize,
    pub rows: usize,
    pub abort: Option<String>,
    pub final_state: SystemState,
    pub final_energy: EnergyReport,
    pub wall_s: f64,
}

/// Time loop with artifacts: series.csv (one row every `stride`
/// steps, first row at t=0), a checkpoint refreshed at every row,
/// field dumps, and metadata. Step failures are reported through
/// `RunOutcome::abort` rather than an error so the partial artifacts
/// stay described; hard setup/IO failures are errors.
pub fn run_simulation(cfg: &RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CavError::io(cfg.out_dir.display().to_string(), e))?;
    let basis = build_basis(cfg)?;
    let mut state = initial_state(cfg, &basis)?;
    let dt = resolve_dt(cfg, &basis, &state);
    let n_steps = steps_for(cfg.t_final, dt);
    let sc = step_config(cfg, dt);

    let series_path = cfg.out_dir.join("series.csv");
    let file = fs::File::create(&series_path)
        .map_err(|e| CavError::io(series_path.display().to_string(), e))?;
    let mut csv = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CavError::io(series_path.display().to_string(), e);
    writeln!(csv, "{SERIES_HEADER}").map_err(io_err)?;

    let baseline = InvariantBaseline::of(&basis, &state);
    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");
    let mut energy = energy_report(&basis, &state, None);
    let mut rows = 0usize;
    let mut abort = None;

    let emit = |state: &SystemState,
                    energy: &EnergyReport,
                    csv: &mut std::io::BufWriter<fs::File>,
                    rows: &mut usize|
     -> Result<SeriesRow> {
        let row = make_row(&basis, state, energy, &baseline, None);
        writeln!(csv, "{}", format_row(&row)).map_err(io_err)?;
        csv.flush().map_err(io_err)?;
        save_checkpoint(&checkpoint_path, &basis, state)?;
        *rows += 1;
        Ok(row)
    };

    let row0 = emit(&state, &energy, &mut csv, &mut rows)?;
    if !cfg.quiet {
        println!("t={:.6} F={:.6e} min_rho={:.4}", row0.t, row0.f, row0.min_rho);
    }
    write_vtk(&cfg.out_dir.join("fields_000000.vtk"), &basis, &state)?;

    for k in 1..=n_steps {
        match coupled_step(&basis, &state, &sc) {
            Ok((next, _)) => state = next,
            Err(e) => {
                abort = Some(e.to_string());
                break;
            }
        }
        if k % cfg.stride == 0 {
            energy = energy_report(&basis, &state, Some(&energy));
            let row = emit(&state, &energy, &mut csv, &mut rows)?;
            if !cfg.quiet {
                println!("t={:.6} F={:.6e} min_rho={:.4}", row.t, row.f, row.min_rho);
            }
            if cfg.vtk_every > 0 && (k / cfg.stride) % cfg.vtk_every == 0 {
                write_vtk(&cfg.out_dir.join(format!("fields_{k:06}.vtk")), &basis, &state)?;
            }
        }
    }
    if abort.is_none() && n_steps > 0 {
        write_vtk(&cfg.out_dir.join(format!("fields_{n_steps:06}.vtk")), &basis, &state)?;
    }

    let wall_s = started.elapsed().as_secs_f64();
    let mut meta = String::new();
    let _ = writeln!(meta, "build={}", build_id());
    let _ = writeln!(meta, "wall_time_s={wall_s:.3}");
    let _ = writeln!(meta, "dt={dt:e}");
    let _ = writeln!(meta, "n_steps={n_steps}");
    let _ = writeln!(meta, "rows={rows}");
    let _ = writeln!(meta, "abort={}", abort.as_deref().unwrap_or("none"));
    // the rigid speeds |xi|^2 + |omega|^2 are not dissipated channels;
    // they are reported by the Sobolev report and excluded from the
    // dissipation column and the balance residual
    let _ = writeln!(meta, "dissipation_excludes_rigid_speeds=true");
    let _ = writeln!(meta, "sobolev_time_stencil=centered difference of adjacent snapshots");
    meta.push_str(&config_echo(cfg));
    let meta_path = cfg.out_dir.join("metadata.txt");
    fs::write(&meta_path, meta).map_err(|e| CavError::io(meta_path.display().to_string(), e))?;

    Ok(RunOutcome {
        out_dir: cfg.out_dir.clone(),
        dt,
        n_steps,
        rows,
        abort,
        final_state: state,
        final_energy: energy,
        wall_s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContinuationParam {
    Eps,
    Delta,
}

#[derive(Clone, Debug)]
pub struct ContinuationLevel {
    pub value: f64,
    pub f_terminal: f64,
    pub mass_drift: f64,
    /// delta-part of the internal energy at the horizon
    pub delta_internal: f64,
    /// relative energy against the next (less regularized) level
    pub rel_to_next: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ContinuationTable {
    pub param: ContinuationParam,
    pub levels: Vec<ContinuationLevel>,
    pub csv_path: PathBuf,
}

impl ContinuationTable {
    pub fn has_failures(&self) -> bool {
        self.levels.iter().any(|l| l.error.is_some())
    }
}

fn delta_internal(basis: &BasisSet, state: &SystemState) -> f64 {
    if state.reg.delta == 0.0 {
        return 0.0;
    }
    let rho_n = basis.inverse_transform(&state.fluid.rho);
    let (d, b) = (state.reg.delta, state.reg.beta);
    basis.grid_integral(&rho_n.mapv(|r| d * r.powf(b) / (b - 1.0)))
}

/// Run a vanishing-regularization sequence from identical initial
/// data (one seed, one grid) and tabulate terminal F, mass drift, the
/// delta-part of the internal energy, and the relative energy between
/// successive levels. Failed levels are recorded in the table, which
/// is emitted either way.
pub fn continuation_run(cfg: &RunConfig, param: ContinuationParam) -> Result<ContinuationTable> {
    cfg.validate()?;
    let values = match param {
        ContinuationParam::Eps => cfg.eps_levels.clone(),
        ContinuationParam::Delta => cfg.delta_levels.clone(),
    };
    if values.is_empty() {
        return Err(CavError::Config("continuation needs at least one level".into()));
    }
    if values.iter().any(|&v| !(v > 0.0)) || values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CavError::Config(format!(
            "continuation levels must be positive and strictly decreasing, got {values:?}"
        )));
    }
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CavError::io(cfg.out_dir.display().to_string(), e))?;
    let basis = build_basis(cfg)?;

    // one dt for every level so the terminal states are comparable
    let probe = initial_state(cfg, &basis)?;
    let dt = resolve_dt(cfg, &basis, &probe);

    let mut finals: Vec<Option<SystemState>> = Vec::new();
    let mut levels: Vec<ContinuationLevel> = Vec::new();
    for (i, &value) in values.iter().enumerate() {
        let mut cfg_l = cfg.clone();
        cfg_l.study = StudyMode::Single;
        cfg_l.dt = Some(dt);
        cfg_l.out_dir = cfg.out_dir.join(format!("level_{i:02}"));
        match param {
            ContinuationParam::Eps => cfg_l.eps = value,
            ContinuationParam::Delta => cfg_l.delta = value,
        }
        let outcome = match cfg_l.validate().and_then(|()| run_simulation(&cfg_l)) {
            Ok(o) => o,
            Err(e) => {
                levels.push(ContinuationLevel {
                    value,
                    f_terminal: f64::NAN,
                    mass_drift: f64::NAN,
                    delta_internal: f64::NAN,
                    rel_to_next: None,
                    error: Some(e.to_string()),
                });
                finals.push(None);
                continue;
            }
        };
        let level = ContinuationLevel {
            value,
            f_terminal: outcome.final_energy.f,
            mass_drift: outcome.final_state.mass_consistency_defect(&basis),
            delta_internal: delta_internal(&basis, &outcome.final_state),
            rel_to_next: None,
            error: outcome.abort.clone(),
        };
        finals.push(level.error.is_none().then_some(outcome.final_state));
        levels.push(level);
    }
    for i in 0..levels.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (&finals[i], &finals[i + 1]) {
            levels[i].rel_to_next = Some(relative_energy(&basis, a, b)?.total);
        }
    }

    let csv_path = cfg.out_dir.join("continuation.csv");
    let mut s = String::from("value,F_terminal,mass_drift,delta_internal,rel_energy_next,status\n");
    for l in &levels {
        let rel = l.rel_to_next.map(|x| format!("{x:e}")).unwrap_or_default();
        let status = l.error.as_deref().unwrap_or("ok");
        let _ = writeln!(
            s,
            "{:e},{:e},{:e},{:e},{},{}",
            l.value, l.f_terminal, l.mass_drift, l.delta_internal, rel, status
        );
    }
    fs::write(&csv_path, s).map_err(|e| CavError::io(csv_path.display().to_string(), e))?;

    Ok(ContinuationTable { param, levels, csv_path })
}

fn truncate_state(
    fine: &BasisSet,
    coarse: &BasisSet,
    state: &SystemState,
) -> SystemState {
    let caps = [0, 1, 2].map(|a| coarse.res.n[a] - 1);
    SystemState {
        fluid: FluidState {
            rho: fine.truncate(&state.fluid.rho, caps),
            v: [0, 1, 2].map(|c| fine.truncate(&state.fluid.v[c], caps)),
            b: [0, 1, 2].map(|c| fine.truncate(&state.fluid.b[c], caps)),
        },
        rigid: state.rigid,
        rotation: state.rotation,
        phys: state.phys,
        reg: state.reg,
        rigid_params: state.rigid_params,
    }
}

fn embed_state(
    coarse: &BasisSet,
    fine: &BasisSet,
    state: &SystemState,
) -> Result<SystemState> {
    Ok(SystemState {
        fluid: FluidState {
            rho: coarse.embed(&state.fluid.rho, fine)?,
            v: [
                coarse.embed(&state.fluid.v[0], fine)?,
                coarse.embed(&state.fluid.v[1], fine)?,
                coarse.embed(&state.fluid.v[2], fine)?,
            ],
            b: [
                coarse.embed(&state.fluid.b[0], fine)?,
                coarse.embed(&state.fluid.b[1], fine)?,
                coarse.embed(&state.fluid.b[2], fine)?,
            ],
        },
        rigid: state.rigid,
        rotation: state.rotation,
        phys: state.phys,
        reg: state.reg,
        rigid_params: state.rigid_params,
    })
}

fn advance(
    basis: &BasisSet,
    mut state: SystemState,
    sc: &StepConfig,
    n_steps: usize,
) -> Result<SystemState> {
    for _ in 0..n_steps {
        state = coupled_step(basis, &state, sc)?.0;
    }
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct WvsRow {
    pub t: f64,
    pub rel_total: f64,
    pub rel_velocity: f64,
    pub rel_pressure: f64,
    pub rel_magnetic: f64,
    pub diss_coarse: f64,
    pub diss_fine: f64,
}

#[derive(Clone, Debug)]
pub struct WvsReport {
    pub rows: Vec<WvsRow>,
    pub csv_path: PathBuf,
}

/// Twin runs from identical projected initial data: the fine grid is
/// cfg's, the coarse one study.coarse_n (default half). Both use the
/// fine grid's step. Emits the relative energy of coarse against fine
/// over time together with both dissipation rates.
pub fn weak_vs_strong_study(cfg: &RunConfig) -> Result<WvsReport> {
    cfg.validate()?;
    let fine = build_basis(cfg)?;
    let coarse_n = cfg
        .coarse_n
        .unwrap_or_else(|| [0, 1, 2].map(|a| (cfg.n[a] / 2).max(2)));
    if (0..3).any(|a| coarse_n[a] > cfg.n[a]) {
        return Err(CavError::Config(format!(
            "coarse resolution {coarse_n:?} exceeds the fine grid {:?}",
            cfg.n
        )));
    }
    let mut coarse_cfg = cfg.clone();
    coarse_cfg.n = coarse_n;
    let coarse = build_basis(&coarse_cfg)?;

    let mut fine_state = initial_state(cfg, &fine)?;
    let mut coarse_state = truncate_state(&fine, &coarse, &fine_state);
    let dt = resolve_dt(cfg, &fine, &fine_state);
    let n_steps = steps_for(cfg.t_final, dt);
    let sc = step_config(cfg, dt);

    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CavError::io(cfg.out_dir.display().to_string(), e))?;
    let csv_path = cfg.out_dir.join("weak_vs_strong.csv");
    let file = fs::File::create(&csv_path)
        .map_err(|e| CavError::io(csv_path.display().to_string(), e))?;
    let mut csv = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CavError::io(csv_path.display().to_string(), e);
    writeln!(
        csv,
        "t,rel_energy,rel_velocity,rel_pressure,rel_magnetic,diss_coarse,diss_fine"
    )
    .map_err(io_err)?;

    let mut rows = Vec::new();
    let mut sample = |t: f64,
                      coarse_state: &SystemState,
                      fine_state: &SystemState,
                      csv: &mut std::io::BufWriter<fs::File>|
     -> Result<()> {
        let lifted = embed_state(&coarse, &fine, coarse_state)?;
        let rel = relative_energy(&fine, &lifted, fine_state)?;
        let dc = energy_report(&coarse, coarse_state, None).dissipation;
        let df = energy_report(&fine, fine_state, None).dissipation;
        let row = WvsRow {
            t,
            rel_total: rel.total,
            rel_velocity: rel.velocity,
            rel_pressure: rel.pressure,
            rel_magnetic: rel.magnetic,
            diss_coarse: dc,
            diss_fine: df,
        };
        writeln!(
            csv,
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            row.t, row.rel_total, row.rel_velocity, row.rel_pressure, row.rel_magnetic,
            row.diss_coarse, row.diss_fine
        )
        .map_err(io_err)?;
        csv.flush().map_err(io_err)?;
        rows.push(row);
        Ok(())
    };

    sample(0.0, &coarse_state, &fine_state, &mut csv)?;
    for k in 1..=n_steps {
        coarse_state = coupled_step(&coarse, &coarse_state, &sc)?.0;
        fine_state = coupled_step(&fine, &fine_state, &sc)?.0;
        if k % cfg.stride == 0 {
            sample(k as f64 * dt, &coarse_state, &fine_state, &mut csv)?;
        }
    }
    Ok(WvsReport { rows, csv_path })
}

#[derive(Clone, Debug)]
pub struct RefineDtReport {
    pub dts: Vec<f64>,
    pub p_drift: Vec<f64>,
    pub m_drift: Vec<f64>,
    pub balance: Vec<f64>,
    /// per-halving orders log2(e_k / e_{k+1}) of the |M| drift
    pub m_orders: Vec<f64>,
    /// same for the terminal balance residual magnitude
    pub balance_orders: Vec<f64>,
    pub csv_path: PathBuf,
}

fn halving_orders(errs: &[f64]) -> Vec<f64> {
    errs.windows(2)
        .map(|w| {
            if w[0].abs() > 0.0 && w[1].abs() > 0.0 {
                (w[0].abs() / w[1].abs()).log2()
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Temporal refinement: repeat the configured run with dt halved per
/// level and measure how the conserved-quantity drifts and the
/// terminal balance residual shrink.
pub fn refine_dt_study(cfg: &RunConfig) -> Result<RefineDtReport> {
    cfg.validate()?;
    let levels = cfg.dt_levels.max(2);
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CavError::io(cfg.out_dir.display().to_string(), e))?;
    let basis = build_basis(cfg)?;
    let probe = initial_state(cfg, &basis)?;
    let baseline = InvariantBaseline::of(&basis, &probe);
    let dt0 = resolve_dt(cfg, &basis, &probe);

    let mut dts = Vec::new();
    let mut p_drift = Vec::new();
    let mut m_drift = Vec::new();
    let mut balance = Vec::new();
    for i in 0..levels {
        let dt = dt0 / (1 << i) as f64;
        let mut cfg_l = cfg.clone();
        cfg_l.study = StudyMode::Single;
        cfg_l.dt = Some(dt);
        // keep the row count level-independent
        cfg_l.stride = cfg.stride * (1 << i);
        cfg_l.out_dir = cfg.out_dir.join(format!("dt_{i:02}"));
        let outcome = run_simulation(&cfg_l)?;
        if let Some(msg) = outcome.abort {
            return Err(CavError::Config(format!("refinement level {i} aborted: {msg}")));
        }
        let inv = invariant_report(&basis, &outcome.final_state, Some(&baseline));
        dts.push(dt);
        p_drift.push(inv.p_drift);
        m_drift.push(inv.m_drift);
        balance.push(outcome.final_energy.balance_residual.abs());
    }
    let m_orders = halving_orders(&m_drift);
    let balance_orders = halving_orders(&balance);

    let csv_path = cfg.out_dir.join("refine.csv");
    let mut s = String::from("dt,p_drift,m_drift,balance_residual\n");
    for i in 0..dts.len() {
        let _ = writeln!(s, "{:e},{:e},{:e},{:e}", dts[i], p_drift[i], m_drift[i], balance[i]);
    }
    fs::write(&csv_path, s).map_err(|e| CavError::io(csv_path.display().to_string(), e))?;
    if !cfg.quiet {
        println!("measured |M|-drift orders: {m_orders:?}");
        println!("measured balance-residual orders: {balance_orders:?}");
    }
    Ok(RefineDtReport {
        dts,
        p_drift,
        m_drift,
        balance,
        m_orders,
        balance_orders,
        csv_path,
    })
}

#[derive(Clone, Debug)]
pub struct RefineNReport {
    pub levels: Vec<[usize; 3]>,
    pub rel_terminal: Vec<f64>,
    pub csv_path: PathBuf,
}

/// Spatial refinement: run each coarse level from the reference
/// grid's projected initial data and measure the terminal relative
/// energy against the reference run.
pub fn refine_n_study(cfg: &RunConfig) -> Result<RefineNReport> {
    cfg.validate()?;
    if cfg.n_levels.is_empty() {
        return Err(CavError::Config("refine_n needs study.n_levels".into()));
    }
    for lvl in &cfg.n_levels {
        if (0..3).any(|a| lvl[a] >= cfg.n[a]) {
            return Err(CavError::Config(format!(
                "refine_n level {lvl:?} must be strictly coarser than the reference {:?}",
                cfg.n
            )));
        }
    }
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CavError::io(cfg.out_dir.display().to_string(), e))?;
    let fine = build_basis(cfg)?;
    let fine_ic = initial_state(cfg, &fine)?;
    let dt = resolve_dt(cfg, &fine, &fine_ic);
    let n_steps = steps_for(cfg.t_final, dt);
    let sc = step_config(cfg, dt);
    let fine_final = advance(&fine, fine_ic.clone(), &sc, n_steps)?;

    let mut rel_terminal = Vec::new();
    for lvl in &cfg.n_levels {
        let mut cfg_l = cfg.clone();
        cfg_l.n = *lvl;
        let coarse = build_basis(&cfg_l)?;
        let ic = truncate_state(&fine, &coarse, &fine_ic);
        let last = advance(&coarse, ic, &sc, n_steps)?;
        let lifted = embed_state(&coarse, &fine, &last)?;
        rel_terminal.push(relative_energy(&fine, &lifted, &fine_final)?.total);
    }

    let csv_path = cfg.out_dir.join("refine_n.csv");
    let mut s = String::from("nx,ny,nz,rel_energy\n");
    for (lvl, rel) in cfg.n_levels.iter().zip(&rel_terminal) {
        let _ = writeln!(s, "{},{},{},{:e}", lvl[0], lvl[1], lvl[2], rel);
    }
    fs::write(&csv_path, s).map_err(|e| CavError::io(csv_path.display().to_string(), e))?;
    Ok(RefineNReport {
        levels: cfg.n_levels.clone(),
        rel_terminal,
        csv_path,
    })
}

/// Invariant suite on a stored checkpoint.
pub fn check_checkpoint(path: &Path) -> Result<(InvariantReport, EnergyReport)> {
    let (basis, state) = load_checkpoint(path)?;
    Ok((
        invariant_report(&basis, &state, None),
        energy_report(&basis, &state, None),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_operators::max_div_coeff;

    fn scratch(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "cavmhd_{tag}_{}_{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_cfg(out: PathBuf) -> RunConfig {
        RunConfig {
            n: [4; 3],
            preset: Preset::SmallData,
            dt: Some(0.01),
            t_final: 0.1,
            stride: 2,
            out_dir: out,
            quiet: true,
            ..RunConfig::default()
        }
    }

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.cfl, 0.4);
        assert_eq!(cfg.picard_max, 2);
        assert!(cfg.dealias);
        assert_eq!(cfg.preset, Preset::Rest);
        assert_eq!(cfg.study, StudyMode::Single);

        let cfg = parse_config(
            "# comment\nphys.gamma = 1.6\ngrid.n=6,6,4\nbox.lengths=pi,pi,1.5\nic.preset=spin_up\n",
        )
        .unwrap();
        assert_eq!(cfg.gamma, 1.6);
        assert_eq!(cfg.n, [6, 6, 4]);
        assert_eq!(cfg.lengths[2], 1.5);
        assert_eq!(cfg.preset, Preset::SpinUp);
    }

    #[test]
    fn bad_keys_and_constraints_are_cited() {
        let err = parse_config("phys.gama=1.4").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("unknown key"), "{msg}");

        let err = parse_config("\nphys.mu=oops").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let err = parse_config("phys.gamma=0.9").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exceed 1"), "{msg}");

        let err = parse_config("reg.delta=0.01\nreg.beta=1.4").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("max(gamma, 4)"), "{msg}");
    }

    #[test]
    fn seeded_initial_state_is_reproducible() {
        let mut cfg = tiny_cfg(PathBuf::from("unused"));
        cfg.seed = 7;
        let basis = build_basis(&cfg).unwrap();
        let s1 = initial_state(&cfg, &basis).unwrap();
        let s2 = initial_state(&cfg, &basis).unwrap();
        assert_eq!(s1.fluid.rho.c, s2.fluid.rho.c);
        for c in 0..3 {
            assert_eq!(s1.fluid.v[c].c, s2.fluid.v[c].c);
            assert_eq!(s1.fluid.b[c].c, s2.fluid.b[c].c);
        }
        assert_eq!(max_div_coeff(&basis, &s1.fluid.b), 0.0);

        cfg.seed = 8;
        let s3 = initial_state(&cfg, &basis).unwrap();
        assert_ne!(s1.fluid.rho.c, s3.fluid.rho.c);
    }

    #[test]
    fn explicit_mode_lists_reach_the_coefficients() {
        let mut cfg = tiny_cfg(PathBuf::from("unused"));
        cfg.preset = Preset::Rest;
        cfg.rho_modes = vec![RhoMode { k: [1, 0, 2], amp: 0.05 }];
        cfg.v_modes = vec![VecMode { comp: 1, k: [1, 2, 1], amp: -0.3 }];
        let basis = build_basis(&cfg).unwrap();
        let s = initial_state(&cfg, &basis).unwrap();
        assert_eq!(s.fluid.rho.c[[1, 0, 2]], 0.05);
        assert_eq!(s.fluid.v[1].c[[0, 1, 0]], -0.3);

        cfg.v_modes = vec![VecMode { comp: 0, k: [0, 1, 1], amp: 0.1 }];
        assert!(initial_state(&cfg, &basis).is_err());
    }

    #[test]
    fn rest_run_honors_output_contracts() {
        let out = scratch("rest");
        let mut cfg = tiny_cfg(out.clone());
        cfg.preset = Preset::Rest;
        let outcome = run_simulation(&cfg).unwrap();
        assert!(outcome.abort.is_none());
        // floor(0.1 / (2 * 0.01)) + 1
        assert_eq!(outcome.rows, 6);

        let text = fs::read_to_string(out.join("series.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SERIES_HEADER);
        assert_eq!(lines.len(), 7);
        // rest stays at rest: last row has zero drift columns
        let cols: Vec<&str> = lines[6].split(',').collect();
        assert_eq!(cols.len(), 21);
        assert_eq!(cols[20], ""); // rel_energy stays empty
        let mass_drift: f64 = cols[7].parse().unwrap();
        assert!(mass_drift.abs() < 1e-13);

        let rerun = run_simulation(&cfg).unwrap();
        assert!(rerun.abort.is_none());
        let text2 = fs::read_to_string(out.join("series.csv")).unwrap();
        assert_eq!(text, text2);

        assert!(out.join("checkpoint.bin").is_file());
        assert!(out.join("fields_000000.vtk").is_file());
        let meta = fs::read_to_string(out.join("metadata.txt")).unwrap();
        assert!(meta.contains("dissipation_excludes_rigid_speeds=true"));
        assert!(meta.contains("build="));
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn ragged_horizon_row_count_contract() {
        let out = scratch("ragged");
        let mut cfg = tiny_cfg(out.clone());
        cfg.preset = Preset::Rest;
        cfg.dt = Some(0.01);
        cfg.t_final = 0.097;
        cfg.stride = 3;
        let outcome = run_simulation(&cfg).unwrap();
        // floor(0.097 / 0.03) + 1
        assert_eq!(outcome.rows, 4);
        let text = fs::read_to_string(out.join("series.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let out = scratch("ckpt");
        let mut cfg = tiny_cfg(out.clone());
        cfg.seed = 3;
        let basis = build_basis(&cfg).unwrap();
        let mut state = initial_state(&cfg, &basis).unwrap();
        state.rigid.omega = [0.1, -0.2, 0.3];
        state.rigid.xi = [0.01, 0.0, -0.02];
        let sc = step_config(&cfg, 0.01);
        let (state, _) = coupled_step(&basis, &state, &sc).unwrap();

        let path = out.join("checkpoint.bin");
        save_checkpoint(&path, &basis, &state).unwrap();
        let (basis2, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(basis2.res.n, basis.res.n);
        assert_eq!(basis2.cavity.lengths, basis.cavity.lengths);
        assert_eq!(loaded.fluid.rho.c, state.fluid.rho.c);
        for c in 0..3 {
            assert_eq!(loaded.fluid.v[c].c, state.fluid.v[c].c);
            assert_eq!(loaded.fluid.b[c].c, state.fluid.b[c].c);
        }
        assert_eq!(loaded.rigid.omega, state.rigid.omega);
        assert_eq!(loaded.rigid.xi, state.rigid.xi);
        assert_eq!(loaded.rotation.q, state.rotation.q);
        assert_eq!(loaded.rotation.t, state.rotation.t);
        assert_eq!(loaded.phys.gamma, state.phys.gamma);
        assert_eq!(loaded.rigid_params.m_fluid, state.rigid_params.m_fluid);

        let (inv, energy) = check_checkpoint(&path).unwrap();
        assert!(inv.min_rho > 0.0);
        assert!(energy.f.is_finite());
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn corrupted_checkpoints_are_typed_errors() {
        let out = scratch("badckpt");
        let path = out.join("c.bin");
        fs::write(&path, b"NOTMAGIC\ndata\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CavError::CheckpointFormat(_))
        ));

        let cfg = tiny_cfg(out.clone());
        let basis = build_basis(&cfg).unwrap();
        let state = initial_state(&cfg, &basis).unwrap();
        save_checkpoint(&path, &basis, &state).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CavError::CheckpointFormat(_))
        ));
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn vtk_rest_dump_is_constant_density() {
        let out = scratch("vtk");
        let mut cfg = tiny_cfg(out.clone());
        cfg.preset = Preset::Rest;
        cfg.rho0 = 2.5;
        let basis = build_basis(&cfg).unwrap();
        let state = initial_state(&cfg, &basis).unwrap();
        let path = out.join("f.vtk");
        write_vtk(&path, &basis, &state).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("STRUCTURED_POINTS"));
        assert!(text.contains("DIMENSIONS 8 8 8"));
        let rho_vals: Vec<f64> = text
            .lines()
            .skip_while(|l| !l.starts_with("LOOKUP_TABLE"))
            .skip(1)
            .take(8 * 8 * 8)
            .map(|l| l.parse().unwrap())
            .collect();
        assert_eq!(rho_vals.len(), 512);
        for v in rho_vals {
            assert!((v - 2.5).abs() < 1e-12);
        }
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn aborted_run_keeps_last_good_artifacts() {
        let out = scratch("abort");
        let mut cfg = tiny_cfg(out.clone());
        // a absurd step makes the first continuity update go negative
        cfg.dt = Some(50.0);
        cfg.t_final = 200.0;
        cfg.stride = 1;
        cfg.amplitude = Some(0.5);
        let outcome = run_simulation(&cfg).unwrap();
        assert!(outcome.abort.is_some(), "{outcome:?}");
        let text = fs::read_to_string(out.join("series.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + outcome.rows);
        let (_, state) = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
        assert_eq!(state.rotation.t, 0.0);
        let meta = fs::read_to_string(out.join("metadata.txt")).unwrap();
        assert!(meta.contains("abort=") && !meta.contains("abort=none"));
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn weak_vs_strong_twins_are_identically_zero() {
        let out = scratch("wvs");
        let mut cfg = tiny_cfg(out.clone());
        cfg.t_final = 0.03;
        cfg.stride = 1;
        cfg.coarse_n = Some(cfg.n);
        let report = weak_vs_strong_study(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows {
            assert_eq!(row.rel_total, 0.0);
        }
        assert!(report.csv_path.is_file());
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn continuation_single_level_has_no_comparisons() {
        let out = scratch("cont");
        let mut cfg = tiny_cfg(out.clone());
        cfg.t_final = 0.02;
        cfg.eps_levels = vec![1e-3];
        let table = continuation_run(&cfg, ContinuationParam::Eps).unwrap();
        assert_eq!(table.levels.len(), 1);
        assert!(table.levels[0].rel_to_next.is_none());
        assert!(table.levels[0].error.is_none());
        assert!(table.csv_path.is_file());

        cfg.eps_levels = vec![1e-3, 1e-2];
        assert!(continuation_run(&cfg, ContinuationParam::Eps).is_err());
        fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn refine_dt_smoke_produces_orders() {
        let out = scratch("refine");
        let mut cfg = tiny_cfg(out.clone());
        cfg.preset = Preset::SpinUp;
        cfg.omega0 = Some([0.0, 0.0, 0.4]);
        cfg.dt = Some(0.02);
        cfg.t_final = 0.08;
        cfg.stride = 1;
        cfg.dt_levels = 2;
        let report = refine_dt_study(&cfg).unwrap();
        assert_eq!(report.dts.len(), 2);
        assert_eq!(report.m_orders.len(), 1);
        assert!(report.csv_path.is_file());
        fs::remove_dir_all(&out).ok();
    }
}
