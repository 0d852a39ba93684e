//! Test dynamics: the Van der Pol oscillator with limit-cycle initial
//! conditions, and a few problems with closed-form solutions.

use std::f64::consts::PI;

use crate::batch::{BatchVec, Dynamics, RowWise};
use crate::controller::Tolerances;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::solver::{solve, BatchSolver, IvpBatch, SolverConfig};

/// Phase spread that staggers the fast transitions of a batch as far apart
/// as possible. The dynamics are odd under `(x, x') -> (-x, -x')`, so the
/// step-size profile repeats every half period and a spread of `pi` already
/// covers one full stiffness cycle.
pub const MAX_STIFFNESS_SPREAD: f64 = PI;

/// Tolerance used to settle onto the limit cycle and to sample phases.
const CYCLE_TOL: f64 = 1e-10;
const CYCLE_MAX_STEPS: usize = 2_000_000;

/// `x'' = mu (1 - x^2) x' - x` in first-order form, columns `(x, x')`.
///
/// `mu` holds one value shared by all instances or one value per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct VanDerPol<T> {
    mu: Vec<T>,
}

impl<T: Scalar> VanDerPol<T> {
    pub fn new(mu: T) -> Result<Self> {
        Self::per_instance(vec![mu])
    }

    pub fn per_instance(mu: Vec<T>) -> Result<Self> {
        if mu.is_empty() || mu.iter().any(|m| !(m.is_finite() && *m >= T::zero())) {
            return Err(Error::Argument("mu must be finite and nonnegative".into()));
        }
        Ok(Self { mu })
    }

    #[inline]
    fn mu(&self, i: usize) -> T {
        if self.mu.len() == 1 {
            self.mu[0]
        } else {
            self.mu[i]
        }
    }
}

impl<T: Scalar> Dynamics<T> for VanDerPol<T> {
    fn eval(&self, _t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>) {
        debug_assert_eq!(y.d(), 2);
        for i in 0..y.n() {
            let (x, v) = (y[(i, 0)], y[(i, 1)]);
            dy[(i, 0)] = v;
            dy[(i, 1)] = self.mu(i) * (T::one() - x * x) * v - x;
        }
    }
}

/// A point on the limit cycle and the cycle's period, found numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitCycle {
    pub mu: f64,
    pub period: f64,
    /// State where `x'` changes sign from positive to negative (maximum of `x`).
    pub start: [f64; 2],
}

/// Settles onto the Van der Pol limit cycle and measures its period.
///
/// Integrates from `(2, 0)` through two returns to the section
/// `{x' = 0, x > 0}` (crossed downward), then measures the time to the next
/// return. Crossings are located by bisection on the dense output.
pub fn limit_cycle(mu: f64) -> Result<LimitCycle> {
    let f = VanDerPol::new(mu)?;
    // Generous horizon; the loop stops at the third crossing.
    let horizon = 10.0 * (2.0 * PI + 1.7 * mu);
    let problem = IvpBatch::uniform(BatchVec::from_rows(&[[2.0, 0.0]])?, 0.0, horizon, vec![])?;
    let config = SolverConfig::default()
        .with_tolerances(CYCLE_TOL, CYCLE_TOL)
        .with_max_steps(CYCLE_MAX_STEPS);
    let mut solver = BatchSolver::new(&problem, &f, &config)?;

    let mut crossings: Vec<(f64, [f64; 2])> = Vec::with_capacity(3);
    while crossings.len() < 3 {
        let t_old = solver.t()[0];
        let y_old = [solver.y()[(0, 0)], solver.y()[(0, 1)]];
        if !solver.step_once() {
            return Err(Error::Argument(format!(
                "limit cycle search for mu = {mu} ended with {}",
                solver.status()[0]
            )));
        }
        if !solver.last_accept()[0] {
            continue;
        }
        let v_new = solver.y()[(0, 1)];
        if y_old[1] > 0.0 && v_new <= 0.0 {
            let h = solver.last_dt_used(0);
            let mut out = [0.0; 2];
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                solver.dense_last_step(0, &y_old, mid, &mut out);
                if out[1] > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            solver.dense_last_step(0, &y_old, hi, &mut out);
            if out[0] > 0.0 {
                crossings.push((t_old + hi * h, out));
            }
        }
    }
    Ok(LimitCycle {
        mu,
        period: crossings[2].0 - crossings[1].0,
        start: crossings[1].1,
    })
}

/// A batch of Van der Pol problems on the limit cycle, integrated over one period.
#[derive(Debug, Clone)]
pub struct VdpBatch<T> {
    pub problem: IvpBatch<T>,
    pub dynamics: VanDerPol<T>,
    pub mu: T,
    pub period: T,
}

/// Builds `n` Van der Pol problems whose initial states sit at evenly spread
/// phases along the limit cycle.
///
/// Instance `k` starts at phase `phase_spread * k / n` (radians, where `2 pi`
/// is one full period). Every instance is integrated over `[0, period]` with
/// `n_eval` evenly spaced evaluation points including both endpoints.
pub fn vdp_batch<T: Scalar>(
    n: usize,
    mu: f64,
    phase_spread: f64,
    n_eval: usize,
) -> Result<VdpBatch<T>> {
    if n == 0 {
        return Err(Error::EmptyBatch { n, d: 2 });
    }
    if !(phase_spread.is_finite() && phase_spread >= 0.0) {
        return Err(Error::Argument(format!(
            "phase_spread = {phase_spread} must be finite and nonnegative"
        )));
    }
    let phases: Vec<f64> = (0..n).map(|k| phase_spread * k as f64 / n as f64).collect();
    vdp_batch_at_phases(&phases, mu, n_eval)
}

/// Like [`vdp_batch`] with one explicit phase (radians) per instance.
pub fn vdp_batch_at_phases<T: Scalar>(
    phases: &[f64],
    mu: f64,
    n_eval: usize,
) -> Result<VdpBatch<T>> {
    let n = phases.len();
    if n == 0 {
        return Err(Error::EmptyBatch { n, d: 2 });
    }
    if phases.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Argument(
            "phases must be finite and nonnegative".into(),
        ));
    }
    let lc = limit_cycle(mu)?;
    let offsets: Vec<f64> = phases.iter().map(|p| p / (2.0 * PI) * lc.period).collect();
    let last = offsets.iter().cloned().fold(0.0, f64::max);

    let states: Vec<[f64; 2]> = if last > 0.0 {
        // Sample in sorted order, then map back to the requested order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| offsets[a].total_cmp(&offsets[b]));
        let sorted: Vec<f64> = order.iter().map(|&k| offsets[k]).collect();
        let sampler = IvpBatch::uniform(BatchVec::from_rows(&[lc.start])?, 0.0, last, sorted)?;
        let config = SolverConfig::default()
            .with_tolerances(CYCLE_TOL, CYCLE_TOL)
            .with_max_steps(CYCLE_MAX_STEPS);
        let sol = solve(&sampler, &VanDerPol::new(mu)?, &config)?;
        let mut states = vec![[0.0; 2]; n];
        for (slot, y) in order.iter().zip(&sol.ys[0]) {
            let y = y
                .as_ref()
                .ok_or_else(|| Error::Argument("phase sampling failed".into()))?;
            states[*slot] = [y[0], y[1]];
        }
        states
    } else {
        vec![lc.start; n]
    };

    let period = T::lit(lc.period);
    let t_eval = linspace(T::zero(), period, n_eval);
    let rows: Vec<[T; 2]> = states
        .iter()
        .map(|s| [T::lit(s[0]), T::lit(s[1])])
        .collect();
    let problem = IvpBatch::uniform(BatchVec::from_rows(&rows)?, T::zero(), period, t_eval)?;
    Ok(VdpBatch {
        problem,
        dynamics: VanDerPol::new(T::lit(mu))?,
        mu: T::lit(mu),
        period,
    })
}

/// `count` evenly spaced points from `a` to `b` inclusive; the last point is exactly `b`.
pub fn linspace<T: Scalar>(a: T, b: T, count: usize) -> Vec<T> {
    match count {
        0 => vec![],
        1 => vec![b],
        _ => {
            let m = T::from_usize_lossy(count - 1);
            let mut v: Vec<T> = (0..count)
                .map(|k| a + (b - a) * T::from_usize_lossy(k) / m)
                .collect();
            v[count - 1] = b;
            v
        }
    }
}

/// An ODE with a closed-form solution starting at `t = 0`.
pub struct AnalyticProblem<T> {
    pub name: &'static str,
    pub y0: Vec<T>,
    dynamics: Box<dyn Dynamics<T>>,
    exact: Box<dyn Fn(T) -> Vec<T>>,
}

impl<T: Scalar> AnalyticProblem<T> {
    pub fn dynamics(&self) -> &dyn Dynamics<T> {
        &*self.dynamics
    }

    pub fn exact(&self, t: T) -> Vec<T> {
        (self.exact)(t)
    }

    /// Single-instance batch over `[0, t_end]`.
    pub fn batch(&self, t_end: T, t_eval: Vec<T>) -> Result<IvpBatch<T>> {
        IvpBatch::uniform(
            BatchVec::from_rows(std::slice::from_ref(&self.y0))?,
            T::zero(),
            t_end,
            t_eval,
        )
    }

    /// Solves over `[0, t_end]` and returns the max-norm error at `t_end`.
    pub fn endpoint_error(&self, t_end: T, tol: Tolerances<T>) -> Result<T> {
        let config = SolverConfig {
            tol,
            ..SolverConfig::default()
        };
        let sol = solve(&self.batch(t_end, vec![t_end])?, self.dynamics(), &config)?;
        let got = sol
            .last(0)
            .ok_or_else(|| Error::Argument(format!("{} failed: {}", self.name, sol.status[0])))?;
        Ok(got
            .iter()
            .zip(self.exact(t_end))
            .fold(T::zero(), |m, (a, b)| m.max((*a - b).abs())))
    }
}

/// `y' = lambda y`, `y(0) = 1`.
pub fn exponential<T: Scalar>(lambda: T) -> AnalyticProblem<T> {
    AnalyticProblem {
        name: "exponential",
        y0: vec![T::one()],
        dynamics: Box::new(RowWise(move |_t: T, y: &[T], dy: &mut [T]| {
            dy[0] = lambda * y[0]
        })),
        exact: Box::new(move |t: T| vec![(lambda * t).exp()]),
    }
}

/// `x'' = -x`, `(x, x')(0) = (1, 0)`.
pub fn harmonic<T: Scalar>() -> AnalyticProblem<T> {
    AnalyticProblem {
        name: "harmonic",
        y0: vec![T::one(), T::zero()],
        dynamics: Box::new(RowWise(|_t: T, y: &[T], dy: &mut [T]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        })),
        exact: Box::new(|t: T| vec![t.cos(), -t.sin()]),
    }
}

/// `y' = y (1 - y)` from `y0` in `(0, 1)`.
pub fn logistic<T: Scalar>(y0: T) -> AnalyticProblem<T> {
    AnalyticProblem {
        name: "logistic",
        y0: vec![y0],
        dynamics: Box::new(RowWise(|_t: T, y: &[T], dy: &mut [T]| {
            dy[0] = y[0] * (T::one() - y[0])
        })),
        exact: Box::new(move |t: T| {
            let c = T::one() / y0 - T::one();
            vec![T::one() / (T::one() + c * (-t).exp())]
        }),
    }
}

pub fn analytic_problems<T: Scalar>() -> Vec<AnalyticProblem<T>> {
    vec![exponential(T::one()), harmonic(), logistic(T::lit(0.5))]
}
