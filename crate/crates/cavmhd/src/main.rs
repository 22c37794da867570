use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavmhd::error::Result;
use cavmhd::run_driver::{
    check_checkpoint, continuation_run, load_config, refine_dt_study, refine_n_study,
    run_simulation, weak_vs_strong_study, ContinuationParam, ContinuationTable, RunConfig,
    RunOutcome, StudyMode,
};

const CONFIG_KEYS_HELP: &str = "\
CONFIG KEYS (flat key=value lines, '#' starts a comment, defaults shown):
  box.lengths=pi,pi,pi          cavity edge lengths; the token `pi` is accepted
  grid.n=8,8,8                  modes per axis
  grid.dealias=true             2/3-rule dealiasing of quadratic products
  phys.a=1                      pressure coefficient of a rho^gamma
  phys.gamma=1.4                adiabatic exponent, must exceed 1
  phys.mu=0.05                  shear viscosity
  phys.lambda=0                 bulk viscosity
  reg.eps=0                     mass diffusion in the continuity equation
  reg.delta=0                   artificial pressure coefficient
  reg.beta=5                    artificial pressure exponent, > max(gamma, 4) when delta > 0
  rigid.m_body=1                rigid body mass
  rigid.i_body=1,1,1            inertia tensor: 3 values = diagonal, 9 = row-major
  rigid.rho0=1                  uniform initial fluid density (fixes the fluid mass)
  ic.preset=rest                rest | small_data | spin_up | manufactured_decay
  ic.amplitude=                 perturbation scale; unset = the preset default
  ic.omega0=                    initial angular velocity; unset = the preset default
  ic.seed=0                     RNG seed for preset amplitudes
  ic.rho_modes=                 extra density modes, `kx,ky,kz,amp;...`
  ic.v_modes=                   extra velocity modes, `comp,kx,ky,kz,amp;...`
  ic.b_modes=                   extra magnetic modes, `comp,kx,ky,kz,amp;...`
  time.dt=                      fixed step; unset derives it from the stability bounds
  time.cfl=0.4                  CFL factor for the derived step
  time.t_final=1                horizon
  time.scheme=backward_euler    backward_euler | trapezoid
  time.picard_max=2             Gauss-Seidel sweeps per step
  time.constraint=false         re-enforce the zero-total-momentum constraint each step
  output.stride=10              steps between series rows / checkpoint refreshes
  output.dir=out                artifact directory
  output.vtk_every=0            field dumps every this many rows; 0 = first and last
  study.mode=single             single | continuation_eps | continuation_delta |
                                refine_dt | refine_n | weak_vs_strong
  study.eps_levels=1e-2,1e-3,1e-4     decreasing eps sequence
  study.delta_levels=1e-2,1e-3,1e-4   decreasing delta sequence
  study.dt_levels=3             number of dt halvings for refine
  study.n_levels=8,12,16        cubic grids for refine_n, strictly below grid.n
  study.coarse_n=               weak-vs-strong coarse grid; unset = grid.n/2";

#[derive(Parser)]
#[command(
    name = "cavmhd",
    version,
    about = "Spectral simulator for a compressible magnetofluid sealed in the box cavity of a freely rotating rigid body",
    after_help = CONFIG_KEYS_HELP
)]
struct Cli {
    /// config file; omitted means all defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override output.dir
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// override ic.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// suppress per-row progress lines
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// single simulation, or the study selected by study.mode
    Run,
    /// vanishing mass-diffusion sequence over study.eps_levels
    ContinueEps,
    /// vanishing artificial-pressure sequence over study.delta_levels
    ContinueDelta,
    /// refinement study: dt halvings, or grids when study.mode=refine_n
    Refine,
    /// coarse against fine twin run from identical projected data
    WeakVsStrong,
    /// invariant suite on a stored checkpoint
    Check { checkpoint: PathBuf },
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.quiet = cli.quiet;
    cfg.validate()?;
    Ok(cfg)
}

fn finish_run(outcome: &RunOutcome) -> ExitCode {
    match &outcome.abort {
        Some(msg) => {
            eprintln!(
                "run aborted after {} rows ({}); last good checkpoint kept in {}",
                outcome.rows,
                msg,
                outcome.out_dir.display()
            );
            ExitCode::FAILURE
        }
        None => {
            println!(
                "{} rows, dt = {:e}, F(T) = {:e}, artifacts in {}",
                outcome.rows,
                outcome.dt,
                outcome.final_energy.f,
                outcome.out_dir.display()
            );
            ExitCode::SUCCESS
        }
    }
}

fn print_continuation(table: &ContinuationTable) -> ExitCode {
    let name = match table.param {
        ContinuationParam::Eps => "eps",
        ContinuationParam::Delta => "delta",
    };
    println!(
        "{name:>12} {:>14} {:>14} {:>14} {:>16} status",
        "F(T)", "mass_drift", "delta_internal", "rel_energy_next"
    );
    for l in &table.levels {
        let rel = l
            .rel_to_next
            .map(|x| format!("{x:>16.6e}"))
            .unwrap_or_else(|| format!("{:>16}", "-"));
        let status = l.error.as_deref().unwrap_or("ok");
        println!(
            "{:>12.4e} {:>14.6e} {:>14.6e} {:>14.6e} {rel} {status}",
            l.value, l.f_terminal, l.mass_drift, l.delta_internal
        );
    }
    println!("table written to {}", table.csv_path.display());
    if table.has_failures() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    if let Cmd::Check { checkpoint } = &cli.cmd {
        let (inv, energy) = check_checkpoint(checkpoint)?;
        println!("t                = (stored in checkpoint)");
        println!("F                = {:e}", energy.f);
        println!("kinetic          = {:e}", energy.kinetic);
        println!("magnetic         = {:e}", energy.magnetic);
        println!("internal         = {:e}", energy.internal);
        println!("min_rho          = {:e}", inv.min_rho);
        println!("divb_max_modal   = {:e}", inv.divb_max_modal);
        println!("divb_max_nodal   = {:e}", inv.divb_max_nodal);
        println!("P_norm           = {:e}", inv.p_norm);
        println!("M_norm           = {:e}", inv.m_norm);
        println!("Q_orth_err       = {:e}", inv.q_orth_err);
        return Ok(ExitCode::SUCCESS);
    }

    let cfg = effective_config(cli)?;
    let code = match &cli.cmd {
        Cmd::Run => match cfg.study {
            StudyMode::Single => finish_run(&run_simulation(&cfg)?),
            StudyMode::ContinuationEps => {
                print_continuation(&continuation_run(&cfg, ContinuationParam::Eps)?)
            }
            StudyMode::ContinuationDelta => {
                print_continuation(&continuation_run(&cfg, ContinuationParam::Delta)?)
            }
            StudyMode::RefineDt => print_refine_dt(&cfg)?,
            StudyMode::RefineN => print_refine_n(&cfg)?,
            StudyMode::WeakVsStrong => print_wvs(&cfg)?,
        },
        Cmd::ContinueEps => print_continuation(&continuation_run(&cfg, ContinuationParam::Eps)?),
        Cmd::ContinueDelta => {
            print_continuation(&continuation_run(&cfg, ContinuationParam::Delta)?)
        }
        Cmd::Refine => match cfg.study {
            StudyMode::RefineN => print_refine_n(&cfg)?,
            _ => print_refine_dt(&cfg)?,
        },
        Cmd::WeakVsStrong => print_wvs(&cfg)?,
        Cmd::Check { .. } => unreachable!("handled above"),
    };
    Ok(code)
}

fn print_refine_dt(cfg: &RunConfig) -> Result<ExitCode> {
    let report = refine_dt_study(cfg)?;
    println!("{:>12} {:>14} {:>14} {:>16}", "dt", "p_drift", "m_drift", "balance_residual");
    for i in 0..report.dts.len() {
        println!(
            "{:>12.4e} {:>14.6e} {:>14.6e} {:>16.6e}",
            report.dts[i], report.p_drift[i], report.m_drift[i], report.balance[i]
        );
    }
    println!("|M|-drift orders per halving:      {:?}", report.m_orders);
    println!("balance-residual orders per halving: {:?}", report.balance_orders);
    println!("table written to {}", report.csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn print_refine_n(cfg: &RunConfig) -> Result<ExitCode> {
    let report = refine_n_study(cfg)?;
    println!("{:>14} {:>16}", "grid", "rel_energy(T)");
    for (lvl, rel) in report.levels.iter().zip(&report.rel_terminal) {
        println!("{:>14} {rel:>16.6e}", format!("{}x{}x{}", lvl[0], lvl[1], lvl[2]));
    }
    println!("table written to {}", report.csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn print_wvs(cfg: &RunConfig) -> Result<ExitCode> {
    let report = weak_vs_strong_study(cfg)?;
    if let Some(last) = report.rows.last() {
        println!(
            "rel_energy(T={:e}) = {:e}  (velocity {:e}, pressure {:e}, magnetic {:e})",
            last.t, last.rel_total, last.rel_velocity, last.rel_pressure, last.rel_magnetic
        );
    }
    println!("series written to {}", report.csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
