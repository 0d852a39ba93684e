use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use batchode::problems::MAX_STIFFNESS_SPREAD;
use batchode::Scalar;
use batchode_bench::*;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "batchode-bench",
    version,
    about = "Batched ODE solver experiments"
)]
struct Cli {
    /// Floating-point precision of the solver.
    #[arg(long, value_enum, default_value_t = Precision::F64, global = true)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Independent,
    Joint,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dopri5,
    Tsit5,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Dopri5 => "dopri5",
            Method::Tsit5 => "tsit5",
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-5)]
    atol: f64,
    #[arg(long, default_value_t = 1e-5)]
    rtol: f64,
    #[arg(long, value_enum, default_value_t = Method::Dopri5)]
    method: Method,
    #[arg(long, default_value_t = batchode::solver::DEFAULT_MAX_STEPS)]
    max_steps: usize,
    /// Do not update the PID error history on rejected steps.
    #[arg(long)]
    no_history_on_reject: bool,
}

impl SolverArgs {
    fn options(&self, controller: String) -> SolverOptions {
        SolverOptions {
            method: self.method.name().into(),
            controller,
            atol: self.atol,
            rtol: self.rtol,
            max_steps: self.max_steps,
            history_on_reject: !self.no_history_on_reject,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Independent vs joint step control on a batch of Van der Pol oscillators.
    VdpBatching {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 25.0)]
        mu: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        /// `integral`, `pid:<preset>` or `pid:<b1>,<b2>,<b3>`.
        #[arg(long, default_value = "integral")]
        controller: String,
        /// Phases are spread over `[0, phase_spread)` along the limit cycle.
        #[arg(long, default_value_t = MAX_STIFFNESS_SPREAD)]
        phase_spread: f64,
        /// Draw phases at random with this seed instead of evenly spaced.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        n_eval: usize,
        #[command(flatten)]
        solver: SolverArgs,
        /// CSV output path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write accepted steps of every instance to this CSV file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Step counts of PID presets relative to the integral controller.
    PidSweep {
        #[arg(long, value_delimiter = ',', default_values_t = [5.0, 15.0, 25.0, 40.0])]
        mu_list: Vec<f64>,
        /// Preset names or `b1,b2,b3` triples separated by `;`.
        #[arg(long, value_delimiter = ';')]
        presets: Vec<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step solver overhead with trivial dynamics.
    Looptime {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = Method::Dopri5)]
        method: Method,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

/// Runs the command; `Ok(false)` means the run completed but something failed.
fn run<T: Scalar>(command: &Command) -> Result<bool> {
    match command {
        Command::VdpBatching {
            n,
            mu,
            mode,
            controller,
            phase_spread,
            seed,
            n_eval,
            solver,
            out,
            trace,
        } => {
            let args = VdpBatchingArgs {
                n: *n,
                mu: *mu,
                phase_spread: *phase_spread,
                n_eval: *n_eval,
                seed: *seed,
                solver: solver.options(controller.clone()),
            };
            let modes: &[Mode] = match mode {
                ModeArg::Independent => &[Mode::Independent],
                ModeArg::Joint => &[Mode::Joint],
                ModeArg::Both => &[Mode::Independent, Mode::Joint],
            };
            let mut rows = Vec::new();
            let mut traces = Vec::new();
            for &m in modes {
                let (r, t) = vdp_batching::<T>(&args, m)?;
                rows.extend(r);
                traces.push(t);
            }
            write_vdp_rows(output(out)?, &rows)?;
            if let Some(path) = trace {
                // With both modes the trace describes the independent run.
                write_trace_rows(output(&Some(path.clone()))?, &traces[0])?;
            }
            let failed: Vec<_> = rows.iter().filter(|r| !r.status.is_success()).collect();
            for r in &failed {
                eprintln!(
                    "instance {} ({}) failed: {}",
                    r.instance,
                    r.mode.as_str(),
                    r.status
                );
            }
            Ok(failed.is_empty())
        }
        Command::PidSweep {
            mu_list,
            presets,
            n,
            solver,
            out,
        } => {
            let presets = if presets.is_empty() {
                default_presets()
            } else {
                presets.clone()
            };
            let rows = pid_sweep::<T>(mu_list, &presets, *n, &solver.options("integral".into()))?;
            write_pid_rows(output(out)?, &rows)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.status.is_success()).collect();
            for r in &failed {
                eprintln!("mu={} preset={} failed: {}", r.mu, r.preset, r.status);
            }
            Ok(failed.is_empty())
        }
        Command::Looptime {
            n,
            d,
            steps,
            repeats,
            method,
            out,
        } => {
            let report = looptime::<T>(*n, *d, *steps, *repeats, method.name())?;
            write_looptime_rows(output(out)?, &report.rows)?;
            eprintln!(
                "loop time: {:.3} us/step (sd {:.3} over {} runs)",
                report.mean_us, report.sd_us, repeats
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.precision {
        Precision::F64 => run::<f64>(&cli.command),
        Precision::F32 => run::<f32>(&cli.command),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
