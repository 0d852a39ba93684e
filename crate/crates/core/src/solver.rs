//! Batched adaptive integration loop.
//!
//! Every instance keeps its own time, state, step size, controller history,
//! evaluation cursor and status. The dynamics are always evaluated on the full
//! batch; instances that have terminated ride along with a zero step and are
//! masked out of every commit, so their results cannot change.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use crate::batch::{BatchVec, Dynamics};
use crate::controller::{
    error_norm_into, initial_step, step_underflows, Controller, ControllerState, Tolerances,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stepper::Stepper;
use crate::tableau::{dopri5, ButcherTableau};

pub const DEFAULT_MAX_STEPS: usize = 10_000;

/// A batch of independent initial value problems sharing one state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct IvpBatch<T> {
    y0: BatchVec<T>,
    t_start: Vec<T>,
    t_end: Vec<T>,
    t_eval: Vec<Vec<T>>,
}

impl<T: Scalar> IvpBatch<T> {
    pub fn new(
        y0: BatchVec<T>,
        t_start: Vec<T>,
        t_end: Vec<T>,
        t_eval: Vec<Vec<T>>,
    ) -> Result<Self> {
        let (n, d) = y0.shape();
        if n == 0 || d == 0 {
            return Err(Error::EmptyBatch { n, d });
        }
        for (what, len) in [
            ("t_start", t_start.len()),
            ("t_end", t_end.len()),
            ("t_eval", t_eval.len()),
        ] {
            if len != n {
                return Err(Error::Shape {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        for i in 0..n {
            let (a, b) = (t_start[i], t_end[i]);
            if !(a.is_finite() && b.is_finite()) || a == b {
                return Err(Error::TimeSpan {
                    instance: i,
                    t_start: a.to_f64_lossy(),
                    t_end: b.to_f64_lossy(),
                });
            }
            let dir = (b - a).signum();
            let (lo, hi) = (a.min(b), a.max(b));
            let te = &t_eval[i];
            let in_bounds = te.iter().all(|&x| x >= lo && x <= hi);
            let sorted = te.windows(2).all(|w| (w[1] - w[0]) * dir >= T::zero());
            if !in_bounds || !sorted {
                return Err(Error::EvalTimes { instance: i });
            }
        }
        Ok(Self {
            y0,
            t_start,
            t_end,
            t_eval,
        })
    }

    /// All instances share the same time span and evaluation times.
    pub fn uniform(y0: BatchVec<T>, t_start: T, t_end: T, t_eval: Vec<T>) -> Result<Self> {
        let n = y0.n();
        Self::new(y0, vec![t_start; n], vec![t_end; n], vec![t_eval; n])
    }

    pub fn n(&self) -> usize {
        self.y0.n()
    }

    pub fn d(&self) -> usize {
        self.y0.d()
    }

    pub fn y0(&self) -> &BatchVec<T> {
        &self.y0
    }

    pub fn t_start(&self) -> &[T] {
        &self.t_start
    }

    pub fn t_end(&self) -> &[T] {
        &self.t_end
    }

    pub fn t_eval(&self) -> &[Vec<T>] {
        &self.t_eval
    }

    /// Reorders instances so that instance `i` of the result is instance `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<&[T]> = perm.iter().map(|&p| self.y0.row(p)).collect();
        Self::new(
            BatchVec::from_rows(&rows)?,
            perm.iter().map(|&p| self.t_start[p]).collect(),
            perm.iter().map(|&p| self.t_end[p]).collect(),
            perm.iter().map(|&p| self.t_eval[p].clone()).collect(),
        )
    }

    /// Selects a single instance as a batch of size one.
    pub fn instance(&self, i: usize) -> Self {
        self.permuted(&[i])
            .expect("instance of a valid batch is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Success,
    Running,
    MaxStepsExceeded,
    StepUnderflow,
    InfiniteDynamics,
}

impl SolveStatus {
    pub fn is_terminal(self) -> bool {
        self != SolveStatus::Running
    }

    pub fn is_success(self) -> bool {
        self == SolveStatus::Success
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Success => "SUCCESS",
            SolveStatus::Running => "RUNNING",
            SolveStatus::MaxStepsExceeded => "MAX_STEPS_EXCEEDED",
            SolveStatus::StepUnderflow => "STEP_UNDERFLOW",
            SolveStatus::InfiniteDynamics => "INFINITE_DYNAMICS",
        }
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    pub tableau: ButcherTableau<T>,
    pub tol: Tolerances<T>,
    pub controller: Controller<T>,
    pub max_steps: usize,
    /// Skip the starting-step heuristic and use this magnitude instead.
    pub initial_dt: Option<T>,
    /// Upper bound on the step-size magnitude.
    pub max_dt: Option<T>,
    /// Keep every attempted `(t, dt, accepted)` per instance.
    pub record_trace: bool,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            tableau: dopri5(),
            tol: Tolerances::new(T::lit(1e-5), T::lit(1e-5)),
            controller: Controller::default(),
            max_steps: DEFAULT_MAX_STEPS,
            initial_dt: None,
            max_dt: None,
            record_trace: false,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn with_tolerances(mut self, atol: T, rtol: T) -> Self {
        self.tol = Tolerances::new(atol, rtol);
        self
    }

    pub fn with_tableau(mut self, tableau: ButcherTableau<T>) -> Self {
        self.tableau = tableau;
        self
    }

    pub fn with_controller(mut self, controller: Controller<T>) -> Self {
        self.controller = controller;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        self.tol.validate(n, d)?;
        self.controller.validate()?;
        if self.max_steps == 0 {
            return Err(Error::Argument("max_steps must be at least 1".into()));
        }
        if let Some(h) = self.initial_dt {
            if !(h.is_finite() && !h.is_zero()) {
                return Err(Error::Argument(format!(
                    "initial_dt = {h} must be finite and nonzero"
                )));
            }
        }
        if let Some(h) = self.max_dt {
            if !(h > T::zero()) {
                return Err(Error::Argument(format!("max_dt = {h} must be positive")));
            }
        }
        Ok(())
    }
}

/// One attempted step of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    /// Time at the start of the attempt.
    pub t: T,
    pub dt: T,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats<T> {
    /// Attempted steps while the instance was running.
    pub n_steps: Vec<usize>,
    pub n_accepted: Vec<usize>,
    /// Dynamics evaluations on the batch: the initial derivative, the trial
    /// stages and the derivative refreshes after rejected steps. Identical for
    /// every instance because each evaluation covers the whole batch.
    pub n_f_evals: Vec<usize>,
    /// Evaluations spent in the starting-step probe (0 when `initial_dt` is set).
    pub n_probe_evals: usize,
    pub final_dt: Vec<T>,
    /// Loop iterations over the batch.
    pub batch_steps: usize,
    /// Loop iterations in which no running instance rejected its step.
    pub batch_accepted: usize,
    /// Internal state reported by solver components, keyed by name.
    pub extra: BTreeMap<String, Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    /// `ys[i][k]` is instance `i`'s state at its `k`-th evaluation time, or
    /// `None` if the instance failed before reaching it.
    pub ys: Vec<Vec<Option<Vec<T>>>>,
    pub stats: SolveStats<T>,
    pub status: Vec<SolveStatus>,
    pub trace: Option<Vec<Vec<StepRecord<T>>>>,
}

impl<T: Scalar> Solution<T> {
    pub fn all_success(&self) -> bool {
        self.status.iter().all(|s| s.is_success())
    }

    /// State at the last evaluation point of instance `i`, if reached.
    pub fn last(&self, i: usize) -> Option<&[T]> {
        self.ys[i].last().and_then(|y| y.as_deref())
    }
}

/// Step-by-step driver behind [`solve`].
pub struct BatchSolver<'a, T: Scalar, F: ?Sized> {
    f: &'a F,
    problem: &'a IvpBatch<T>,
    config: &'a SolverConfig<T>,
    stepper: Stepper<T>,
    dir: Vec<T>,
    t: Vec<T>,
    y: BatchVec<T>,
    f0: BatchVec<T>,
    scratch: BatchVec<T>,
    ctrl: ControllerState<T>,
    status: Vec<SolveStatus>,
    cursor: Vec<usize>,
    ys: Vec<Vec<Option<Vec<T>>>>,
    n_steps: Vec<usize>,
    n_accepted: Vec<usize>,
    n_f_evals: usize,
    n_probe_evals: usize,
    batch_steps: usize,
    batch_accepted: usize,
    trace: Option<Vec<Vec<StepRecord<T>>>>,
    dt_used: Vec<T>,
    to_end: Vec<bool>,
    active: Vec<bool>,
    accept: Vec<bool>,
    norms: Vec<T>,
}

impl<'a, T, F> BatchSolver<'a, T, F>
where
    T: Scalar,
    F: Dynamics<T> + ?Sized,
{
    /// Validates inputs, evaluates the initial derivative and picks the
    /// starting step for every instance.
    pub fn new(problem: &'a IvpBatch<T>, f: &'a F, config: &'a SolverConfig<T>) -> Result<Self> {
        let (n, d) = (problem.n(), problem.d());
        config.validate(n, d)?;

        let t = problem.t_start.clone();
        let y = problem.y0.clone();
        let dir: Vec<T> = (0..n).map(|i| (problem.t_end[i] - t[i]).signum()).collect();

        let mut f0 = BatchVec::zeros(n, d);
        f.eval(&t, &y, &mut f0);
        let n_f_evals = 1;
        let status: Vec<SolveStatus> = (0..n)
            .map(|i| {
                if f0.row_is_finite(i) {
                    SolveStatus::Running
                } else {
                    SolveStatus::InfiniteDynamics
                }
            })
            .collect();

        let (dt0, n_probe_evals) = match config.initial_dt {
            Some(h) => ((0..n).map(|i| dir[i] * h.abs()).collect(), 0),
            None => (
                initial_step(
                    f,
                    &t,
                    &y,
                    &f0,
                    &problem.t_end,
                    config.tableau.order(),
                    &config.tol,
                ),
                1,
            ),
        };

        let ys = problem
            .t_eval
            .iter()
            .map(|te| vec![None; te.len()])
            .collect();
        let mut solver = Self {
            f,
            problem,
            config,
            stepper: Stepper::new(config.tableau.clone(), n, d),
            dir,
            t,
            y,
            f0,
            scratch: BatchVec::zeros(n, d),
            ctrl: ControllerState::new(dt0),
            status,
            cursor: vec![0; n],
            ys,
            n_steps: vec![0; n],
            n_accepted: vec![0; n],
            n_f_evals,
            n_probe_evals,
            batch_steps: 0,
            batch_accepted: 0,
            trace: config.record_trace.then(|| vec![Vec::new(); n]),
            dt_used: vec![T::zero(); n],
            to_end: vec![false; n],
            active: vec![false; n],
            accept: vec![false; n],
            norms: vec![T::zero(); n],
        };
        for i in 0..n {
            solver.emit_initial(i);
        }
        Ok(solver)
    }

    fn emit_initial(&mut self, i: usize) {
        let t0 = self.problem.t_start[i];
        let te = &self.problem.t_eval[i];
        while self.cursor[i] < te.len() && te[self.cursor[i]] == t0 {
            self.ys[i][self.cursor[i]] = Some(self.y.row(i).to_vec());
            self.cursor[i] += 1;
        }
    }

    pub fn is_done(&self) -> bool {
        self.status.iter().all(|s| s.is_terminal())
    }

    pub fn t(&self) -> &[T] {
        &self.t
    }

    pub fn y(&self) -> &BatchVec<T> {
        &self.y
    }

    pub fn status(&self) -> &[SolveStatus] {
        &self.status
    }

    /// Step sizes that will be proposed for the next attempt.
    pub fn dt(&self) -> &[T] {
        self.ctrl.dt()
    }

    /// Accept decisions of the most recent iteration (false for inactive instances).
    pub fn last_accept(&self) -> &[bool] {
        &self.accept
    }

    pub fn n_f_evals(&self) -> usize {
        self.n_f_evals
    }

    /// Runs one iteration of the loop. Returns `false`, without evaluating the
    /// dynamics, when every instance has already terminated.
    pub fn step_once(&mut self) -> bool {
        let n = self.problem.n();
        let mut any_active = false;
        for i in 0..n {
            let running = self.status[i] == SolveStatus::Running;
            self.active[i] = running;
            self.accept[i] = false;
            any_active |= running;
            if !running {
                self.dt_used[i] = T::zero();
                self.to_end[i] = false;
                continue;
            }
            let mut dt = self.ctrl.dt[i];
            if let Some(max) = self.config.max_dt {
                if dt.abs() > max {
                    dt = self.dir[i] * max;
                }
            }
            let remaining = self.problem.t_end[i] - self.t[i];
            let reaches_end = (dt - remaining) * self.dir[i] >= T::zero();
            if reaches_end {
                dt = remaining;
            }
            self.to_end[i] = reaches_end;
            self.dt_used[i] = dt;
            self.ctrl.dt[i] = dt;
        }
        if !any_active {
            return false;
        }

        self.stepper
            .step(self.f, &self.t, &self.dt_used, &self.y, &self.f0);
        self.n_f_evals += self.stepper.evals_per_step();
        let res = self.stepper.result();
        error_norm_into(
            res.error_estimate(),
            &self.y,
            res.y_next(),
            &self.config.tol,
            &mut self.norms,
        );
        self.config.controller.adapt_step(
            &mut self.ctrl,
            &self.norms,
            &self.active,
            self.config.tableau.error_order(),
            &mut self.accept,
        );

        let fsal = self.config.tableau.fsal();
        let mut any_reject = false;
        for i in 0..n {
            if !self.active[i] {
                continue;
            }
            self.n_steps[i] += 1;
            let (t_old, h) = (self.t[i], self.dt_used[i]);
            if let Some(tr) = self.trace.as_mut() {
                tr[i].push(StepRecord {
                    t: t_old,
                    dt: h,
                    accepted: self.accept[i],
                });
            }
            if self.accept[i] {
                self.n_accepted[i] += 1;
                let t_new = if self.to_end[i] {
                    self.problem.t_end[i]
                } else {
                    t_old + h
                };
                self.emit_crossed(i, t_old, t_new, h);
                let res = self.stepper.result();
                self.y.copy_row_from(i, res.y_next());
                if let Some(fn_) = res.f_next() {
                    self.f0.copy_row_from(i, fn_);
                }
                self.t[i] = t_new;
                if t_new == self.problem.t_end[i] {
                    self.status[i] = SolveStatus::Success;
                    continue;
                }
            } else {
                any_reject = true;
            }
            if step_underflows(self.t[i], self.ctrl.dt[i]) {
                self.status[i] = SolveStatus::StepUnderflow;
            } else if self.n_steps[i] >= self.config.max_steps {
                self.status[i] = SolveStatus::MaxStepsExceeded;
            }
        }

        // A rejected step discards its last stage, so the derivative at the
        // unchanged state is evaluated afresh for the retry.
        if fsal && any_reject {
            self.f.eval(&self.t, &self.y, &mut self.scratch);
            self.n_f_evals += 1;
            for i in 0..n {
                if self.active[i] && !self.accept[i] {
                    self.f0.copy_row_from(i, &self.scratch);
                }
            }
        }

        self.batch_steps += 1;
        if !any_reject {
            self.batch_accepted += 1;
        }
        true
    }

    fn emit_crossed(&mut self, i: usize, t_old: T, t_new: T, h: T) {
        let problem = self.problem;
        let te = &problem.t_eval[i];
        let dir = self.dir[i];
        while self.cursor[i] < te.len() && (te[self.cursor[i]] - t_new) * dir <= T::zero() {
            let k = self.cursor[i];
            let out = if te[k] == t_new {
                self.stepper.result().y_next().row(i).to_vec()
            } else {
                let theta = ((te[k] - t_old) / h).max(T::zero()).min(T::one());
                let mut row = vec![T::zero(); self.problem.d()];
                self.stepper
                    .interpolate_row(i, self.y.row(i), h, theta, &mut row);
                row
            };
            self.ys[i][k] = Some(out);
            self.cursor[i] += 1;
        }
    }

    /// Dense output of instance `i` inside the most recent attempted step,
    /// given that instance's state at the start of the step.
    pub(crate) fn dense_last_step(&self, i: usize, y_start: &[T], theta: T, out: &mut [T]) {
        self.stepper
            .interpolate_row(i, y_start, self.dt_used[i], theta, out);
    }

    pub(crate) fn last_dt_used(&self, i: usize) -> T {
        self.dt_used[i]
    }

    /// Runs until every instance has terminated.
    pub fn run(&mut self) {
        while self.step_once() {}
    }

    pub fn into_solution(self) -> Solution<T> {
        let n = self.problem.n();
        let mut extra = BTreeMap::new();
        self.config.controller.report(&self.ctrl, &mut extra);
        Solution {
            ys: self.ys,
            stats: SolveStats {
                n_steps: self.n_steps,
                n_accepted: self.n_accepted,
                n_f_evals: vec![self.n_f_evals; n],
                n_probe_evals: self.n_probe_evals,
                final_dt: self.ctrl.dt,
                batch_steps: self.batch_steps,
                batch_accepted: self.batch_accepted,
                extra,
            },
            status: self.status,
            trace: self.trace,
        }
    }
}

/// Integrates every instance of `problem` independently.
pub fn solve<T, F>(problem: &IvpBatch<T>, f: &F, config: &SolverConfig<T>) -> Result<Solution<T>>
where
    T: Scalar,
    F: Dynamics<T> + ?Sized,
{
    let mut solver = BatchSolver::new(problem, f, config)?;
    solver.run();
    Ok(solver.into_solution())
}

/// Presents an `n x d` batch as one instance with `n * d` components.
struct Flattened<'a, T, F: ?Sized> {
    inner: &'a F,
    n: usize,
    d: usize,
    buffers: RefCell<(Vec<T>, BatchVec<T>, BatchVec<T>)>,
}

impl<'a, T: Scalar, F: Dynamics<T> + ?Sized> Flattened<'a, T, F> {
    fn new(inner: &'a F, n: usize, d: usize) -> Self {
        Self {
            inner,
            n,
            d,
            buffers: RefCell::new((
                vec![T::zero(); n],
                BatchVec::zeros(n, d),
                BatchVec::zeros(n, d),
            )),
        }
    }
}

impl<T: Scalar, F: Dynamics<T> + ?Sized> Dynamics<T> for Flattened<'_, T, F> {
    fn eval(&self, t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>) {
        let mut guard = self.buffers.borrow_mut();
        let (tb, yb, db) = &mut *guard;
        debug_assert_eq!(y.shape(), (1, self.n * self.d));
        tb.iter_mut().for_each(|x| *x = t[0]);
        yb.as_mut_slice().copy_from_slice(y.as_slice());
        self.inner.eval(tb, yb, db);
        dy.as_mut_slice().copy_from_slice(db.as_slice());
    }
}

/// Integrates the batch as a single concatenated problem: one error norm over
/// all components, one shared step size and one shared accept decision.
///
/// All instances must share the same time span and evaluation times.
/// Statistics and statuses of the shared trajectory are replicated per instance.
pub fn solve_joint<T, F>(
    problem: &IvpBatch<T>,
    f: &F,
    config: &SolverConfig<T>,
) -> Result<Solution<T>>
where
    T: Scalar,
    F: Dynamics<T> + ?Sized,
{
    let (n, d) = (problem.n(), problem.d());
    config.tol.validate(n, d)?;
    if problem.t_start.iter().any(|&t| t != problem.t_start[0]) {
        return Err(Error::JointMismatch("t_start"));
    }
    if problem.t_end.iter().any(|&t| t != problem.t_end[0]) {
        return Err(Error::JointMismatch("t_end"));
    }
    if problem.t_eval.iter().any(|te| te != &problem.t_eval[0]) {
        return Err(Error::JointMismatch("t_eval"));
    }

    let flat = IvpBatch::new(
        problem.y0.clone().reshape(1, n * d)?,
        vec![problem.t_start[0]],
        vec![problem.t_end[0]],
        vec![problem.t_eval[0].clone()],
    )?;
    let flat_config = SolverConfig {
        tol: config.tol.flatten(n, d),
        ..config.clone()
    };
    let g = Flattened::new(f, n, d);
    let sol = solve(&flat, &g, &flat_config)?;

    let ys = (0..n)
        .map(|i| {
            sol.ys[0]
                .iter()
                .map(|y| y.as_ref().map(|v| v[i * d..(i + 1) * d].to_vec()))
                .collect()
        })
        .collect();
    let st = sol.stats;
    let extra = st
        .extra
        .into_iter()
        .map(|(k, v)| (k, vec![v[0]; n]))
        .collect();
    Ok(Solution {
        ys,
        stats: SolveStats {
            n_steps: vec![st.n_steps[0]; n],
            n_accepted: vec![st.n_accepted[0]; n],
            n_f_evals: vec![st.n_f_evals[0]; n],
            n_probe_evals: st.n_probe_evals,
            final_dt: vec![st.final_dt[0]; n],
            batch_steps: st.batch_steps,
            batch_accepted: st.batch_accepted,
            extra,
        },
        status: vec![sol.status[0]; n],
        trace: sol.trace.map(|tr| vec![tr[0].clone(); n]),
    })
}
