//! Experiment runners behind the `batchode-bench` binary.
//!
//! Each runner returns typed rows; the `write_*` functions serialize them with
//! a fixed column schema and fixed number formatting so that everything except
//! timing columns is reproducible byte for byte.

use std::cell::Cell;
use std::io::Write;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use batchode::problems::{vdp_batch, vdp_batch_at_phases, VdpBatch, MAX_STIFFNESS_SPREAD};
use batchode::tableau;
use batchode::{
    solve, solve_joint, BatchVec, Controller, Dynamics, IvpBatch, PidCoefficients, Scalar,
    SolveStatus, SolverConfig, PID_PRESETS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VDP_HEADER: [&str; 7] = [
    "instance",
    "mode",
    "mu",
    "n_steps",
    "n_accepted",
    "n_f_evals",
    "status",
];
pub const TRACE_HEADER: [&str; 4] = ["instance", "step", "t", "dt"];
pub const PID_HEADER: [&str; 5] = ["mu", "preset", "n_steps", "n_accepted", "ratio_vs_integral"];
pub const LOOPTIME_HEADER: [&str; 5] = ["run", "n", "d", "steps", "loop_time_us"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Independent,
    Joint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Independent => "independent",
            Mode::Joint => "joint",
        }
    }
}

/// Solver settings shared by all experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub method: String,
    /// `integral`, `pid:<preset>` or `pid:<beta1>,<beta2>,<beta3>`.
    pub controller: String,
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    pub history_on_reject: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: "dopri5".into(),
            controller: "integral".into(),
            atol: 1e-5,
            rtol: 1e-5,
            max_steps: batchode::solver::DEFAULT_MAX_STEPS,
            history_on_reject: true,
        }
    }
}

pub fn parse_controller<T: Scalar>(text: &str) -> Result<Controller<T>> {
    if text == "integral" {
        return Ok(Controller::integral());
    }
    let rest = text
        .strip_prefix("pid:")
        .ok_or_else(|| anyhow!("controller must be `integral` or `pid:<preset>`, got `{text}`"))?;
    let coeffs = if rest.contains(',') {
        let b: Vec<f64> = rest
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad PID gains `{rest}`"))?;
        if b.len() != 3 {
            bail!("PID gains need three values, got {}", b.len());
        }
        PidCoefficients::new(T::lit(b[0]), T::lit(b[1]), T::lit(b[2]))
    } else {
        PidCoefficients::preset(rest)?
    };
    Ok(Controller::pid(coeffs))
}

impl SolverOptions {
    pub fn config<T: Scalar>(&self) -> Result<SolverConfig<T>> {
        let tab = tableau::by_name(&self.method)
            .ok_or_else(|| anyhow!("unknown method `{}`", self.method))?;
        let mut controller = parse_controller::<T>(&self.controller)?;
        controller.history_on_reject = self.history_on_reject;
        controller.validate()?;
        Ok(SolverConfig::default()
            .with_tableau(tab)
            .with_tolerances(T::lit(self.atol), T::lit(self.rtol))
            .with_controller(controller)
            .with_max_steps(self.max_steps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdpBatchingArgs {
    pub n: usize,
    pub mu: f64,
    pub phase_spread: f64,
    pub n_eval: usize,
    /// Draw phases uniformly from `[0, phase_spread)` instead of spacing them evenly.
    pub seed: Option<u64>,
    pub solver: SolverOptions,
}

impl Default for VdpBatchingArgs {
    fn default() -> Self {
        Self {
            n: 4,
            mu: 25.0,
            phase_spread: MAX_STIFFNESS_SPREAD,
            n_eval: 200,
            seed: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdpRow {
    pub instance: usize,
    pub mode: Mode,
    pub mu: f64,
    pub n_steps: usize,
    pub n_accepted: usize,
    pub n_f_evals: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub instance: usize,
    pub step: usize,
    pub t: f64,
    pub dt: f64,
}

pub fn build_vdp<T: Scalar>(args: &VdpBatchingArgs) -> Result<VdpBatch<T>> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    Ok(match args.seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phases: Vec<f64> = (0..args.n)
                .map(|_| rng.gen::<f64>() * args.phase_spread)
                .collect();
            vdp_batch_at_phases(&phases, args.mu, args.n_eval)?
        }
        None => vdp_batch(args.n, args.mu, args.phase_spread, args.n_eval)?,
    })
}

/// Solves the Van der Pol batch in the given mode.
///
/// Returns one summary row per instance and one trace row per accepted step.
pub fn vdp_batching<T: Scalar>(
    args: &VdpBatchingArgs,
    mode: Mode,
) -> Result<(Vec<VdpRow>, Vec<TraceRow>)> {
    let batch = build_vdp::<T>(args)?;
    let config = args.solver.config::<T>()?.with_trace();
    let sol = match mode {
        Mode::Independent => solve(&batch.problem, &batch.dynamics, &config)?,
        Mode::Joint => solve_joint(&batch.problem, &batch.dynamics, &config)?,
    };
    let rows = (0..batch.problem.n())
        .map(|i| VdpRow {
            instance: i,
            mode,
            mu: args.mu,
            n_steps: sol.stats.n_steps[i],
            n_accepted: sol.stats.n_accepted[i],
            n_f_evals: sol.stats.n_f_evals[i],
            status: sol.status[i],
        })
        .collect();
    let mut trace = Vec::new();
    for (i, records) in sol.trace.iter().flatten().enumerate() {
        for (step, r) in records.iter().filter(|r| r.accepted).enumerate() {
            trace.push(TraceRow {
                instance: i,
                step,
                t: r.t.to_f64_lossy(),
                dt: r.dt.to_f64_lossy(),
            });
        }
    }
    Ok((rows, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidRow {
    pub mu: f64,
    pub preset: String,
    pub n_steps: usize,
    pub n_accepted: usize,
    /// `None` when this configuration or its integral baseline failed.
    pub ratio: Option<f64>,
    pub status: SolveStatus,
}

/// Steps needed for one cycle per `(mu, controller)` relative to the integral controller.
///
/// `presets` are preset names or `b1,b2,b3` gain triples; the integral
/// baseline row is always emitted first for each `mu`. Step counts are
/// totals over the batch of `n` evenly phased instances.
pub fn pid_sweep<T: Scalar>(
    mus: &[f64],
    presets: &[String],
    n: usize,
    solver: &SolverOptions,
) -> Result<Vec<PidRow>> {
    let mut rows = Vec::new();
    for &mu in mus {
        let args = VdpBatchingArgs {
            n,
            mu,
            phase_spread: if n > 1 { MAX_STIFFNESS_SPREAD } else { 0.0 },
            n_eval: 2,
            seed: None,
            solver: solver.clone(),
        };
        let batch = build_vdp::<T>(&args)?;
        let run = |controller: &str| -> Result<(usize, usize, SolveStatus)> {
            let opts = SolverOptions {
                controller: controller.to_string(),
                ..solver.clone()
            };
            let sol = solve(&batch.problem, &batch.dynamics, &opts.config::<T>()?)?;
            let status = sol
                .status
                .iter()
                .copied()
                .find(|s| !s.is_success())
                .unwrap_or(SolveStatus::Success);
            Ok((
                sol.stats.n_steps.iter().sum(),
                sol.stats.n_accepted.iter().sum(),
                status,
            ))
        };
        let (base_steps, base_acc, base_status) = run("integral")?;
        let base_ok = base_status.is_success();
        rows.push(PidRow {
            mu,
            preset: "integral".into(),
            n_steps: base_steps,
            n_accepted: base_acc,
            ratio: base_ok.then_some(1.0),
            status: base_status,
        });
        for p in presets {
            let (steps, acc, status) = run(&format!("pid:{p}"))?;
            rows.push(PidRow {
                mu,
                preset: p.clone(),
                n_steps: steps,
                n_accepted: acc,
                ratio: (base_ok && status.is_success()).then(|| steps as f64 / base_steps as f64),
                status,
            });
        }
    }
    Ok(rows)
}

pub fn default_presets() -> Vec<String> {
    PID_PRESETS.iter().map(|(n, _)| n.to_string()).collect()
}

/// Wraps dynamics and accumulates the wall time spent inside them.
struct Timed<F> {
    inner: F,
    spent: Cell<Duration>,
}

impl<T, F: Dynamics<T>> Dynamics<T> for Timed<F> {
    fn eval(&self, t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>) {
        let start = Instant::now();
        self.inner.eval(t, y, dy);
        self.spent.set(self.spent.get() + start.elapsed());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopTimeRow {
    /// Run index, or `mean` for the aggregate row.
    pub run: String,
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    pub loop_time_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopTimeReport {
    pub rows: Vec<LoopTimeRow>,
    pub mean_us: f64,
    pub sd_us: f64,
}

/// Solver overhead per step: wall time of a fixed-step solve minus the time
/// spent in the (trivial) dynamics, divided by the number of attempted steps.
pub fn looptime<T: Scalar>(
    n: usize,
    d: usize,
    steps: usize,
    repeats: usize,
    method: &str,
) -> Result<LoopTimeReport> {
    if n == 0 || d == 0 {
        bail!("--n and --d must be at least 1");
    }
    if steps == 0 {
        bail!("--steps must be at least 1 (a zero-length time span is not a valid problem)");
    }
    if repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let tab = tableau::by_name::<T>(method).ok_or_else(|| anyhow!("unknown method `{method}`"))?;
    let y0 = BatchVec::from_vec(
        n,
        d,
        (0..n * d).map(|k| T::lit((k % 7) as f64 * 0.1)).collect(),
    )?;
    let problem = IvpBatch::uniform(y0, T::zero(), T::from_usize_lossy(steps), vec![])?;
    // Unit steps with loose tolerances: every step is accepted and the step
    // count equals `steps`.
    let config = SolverConfig {
        initial_dt: Some(T::one()),
        max_dt: Some(T::one()),
        max_steps: steps + 1,
        ..SolverConfig::default()
            .with_tableau(tab)
            .with_tolerances(T::one(), T::one())
    };

    let mut rows = Vec::with_capacity(repeats + 1);
    let mut samples = Vec::with_capacity(repeats);
    for run in 0..repeats {
        let f = Timed {
            inner: |_t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>| {
                for (o, v) in dy.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *o = T::one() - *v;
                }
            },
            spent: Cell::new(Duration::ZERO),
        };
        let start = Instant::now();
        let sol = solve(&problem, &f, &config)?;
        let total = start.elapsed();
        if !sol.all_success() {
            bail!("looptime solve failed: {:?}", sol.status);
        }
        let taken = sol.stats.n_steps[0];
        let overhead = total.saturating_sub(f.spent.get());
        let us = overhead.as_secs_f64() * 1e6 / taken as f64;
        samples.push(us);
        rows.push(LoopTimeRow {
            run: run.to_string(),
            n,
            d,
            steps: taken,
            loop_time_us: us,
        });
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let sd = if samples.len() > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    rows.push(LoopTimeRow {
        run: "mean".into(),
        n,
        d,
        steps: rows[0].steps,
        loop_time_us: mean,
    });
    Ok(LoopTimeReport {
        rows,
        mean_us: mean,
        sd_us: sd,
    })
}

pub fn write_vdp_rows<W: Write>(w: W, rows: &[VdpRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(VDP_HEADER)?;
    for r in rows {
        out.write_record([
            r.instance.to_string(),
            r.mode.as_str().to_string(),
            r.mu.to_string(),
            r.n_steps.to_string(),
            r.n_accepted.to_string(),
            r.n_f_evals.to_string(),
            r.status.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace_rows<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for r in rows {
        out.write_record([
            r.instance.to_string(),
            r.step.to_string(),
            format!("{:.12e}", r.t),
            format!("{:.12e}", r.dt),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pid_rows<W: Write>(w: W, rows: &[PidRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PID_HEADER)?;
    for r in rows {
        out.write_record([
            r.mu.to_string(),
            r.preset.clone(),
            r.n_steps.to_string(),
            r.n_accepted.to_string(),
            r.ratio
                .map_or_else(|| "nan".to_string(), |x| format!("{x:.6}")),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_looptime_rows<W: Write>(w: W, rows: &[LoopTimeRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LOOPTIME_HEADER)?;
    for r in rows {
        out.write_record([
            r.run.clone(),
            r.n.to_string(),
            r.d.to_string(),
            r.steps.to_string(),
            format!("{:.3}", r.loop_time_us),
        ])?;
    }
    out.flush()?;
    Ok(())
}
