//! One explicit Runge-Kutta trial step over a whole batch, plus dense output.

use crate::batch::{BatchVec, Dynamics};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tableau::ButcherTableau;

const MAX_STAGES: usize = 16;

/// Outcome of one trial step for every instance of the batch.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    y_next: BatchVec<T>,
    error_estimate: BatchVec<T>,
    stage_derivs: Vec<BatchVec<T>>,
    fsal: bool,
}

impl<T: Scalar> StepResult<T> {
    fn zeros(stages: usize, n: usize, d: usize, fsal: bool) -> Self {
        Self {
            y_next: BatchVec::zeros(n, d),
            error_estimate: BatchVec::zeros(n, d),
            stage_derivs: (0..stages).map(|_| BatchVec::zeros(n, d)).collect(),
            fsal,
        }
    }

    pub fn y_next(&self) -> &BatchVec<T> {
        &self.y_next
    }

    /// `dt * sum_i b_err[i] * k_i` per instance.
    pub fn error_estimate(&self) -> &BatchVec<T> {
        &self.error_estimate
    }

    pub fn stage_derivs(&self) -> &[BatchVec<T>] {
        &self.stage_derivs
    }

    /// `f(t + dt, y_next)`, available for FSAL tableaus only.
    pub fn f_next(&self) -> Option<&BatchVec<T>> {
        if self.fsal {
            self.stage_derivs.last()
        } else {
            None
        }
    }
}

/// Owns the scratch buffers for repeated steps on a batch of fixed shape.
#[derive(Debug, Clone)]
pub struct Stepper<T> {
    tableau: ButcherTableau<T>,
    result: StepResult<T>,
    stage_y: BatchVec<T>,
    stage_t: Vec<T>,
}

impl<T: Scalar> Stepper<T> {
    pub fn new(tableau: ButcherTableau<T>, n: usize, d: usize) -> Self {
        assert!(
            tableau.stages() <= MAX_STAGES,
            "dense output supports at most {MAX_STAGES} stages"
        );
        let result = StepResult::zeros(tableau.stages(), n, d, tableau.fsal());
        Self {
            tableau,
            result,
            stage_y: BatchVec::zeros(n, d),
            stage_t: vec![T::zero(); n],
        }
    }

    pub fn tableau(&self) -> &ButcherTableau<T> {
        &self.tableau
    }

    pub fn result(&self) -> &StepResult<T> {
        &self.result
    }

    /// Number of dynamics evaluations performed by [`Stepper::step`].
    pub fn evals_per_step(&self) -> usize {
        let s = self.tableau.stages();
        if self.tableau.fsal() {
            s - 1
        } else {
            s
        }
    }

    /// Takes one trial step from `(t, y)` with per-instance step sizes `dt`.
    ///
    /// `f0` must equal `f(t, y)`. FSAL tableaus use it as the first stage and
    /// evaluate the dynamics `stages - 1` times; other tableaus evaluate all
    /// stages. Non-finite stage values are not trapped here; they surface in
    /// the error estimate.
    pub fn step<F>(
        &mut self,
        f: &F,
        t: &[T],
        dt: &[T],
        y: &BatchVec<T>,
        f0: &BatchVec<T>,
    ) -> &StepResult<T>
    where
        F: Dynamics<T> + ?Sized,
    {
        let (n, d) = y.shape();
        debug_assert_eq!(self.stage_y.shape(), (n, d));
        debug_assert_eq!(t.len(), n);
        debug_assert_eq!(dt.len(), n);

        let tab = &self.tableau;
        let s = tab.stages();
        let fsal = tab.fsal();
        let res = &mut self.result;

        if fsal {
            res.stage_derivs[0]
                .as_mut_slice()
                .copy_from_slice(f0.as_slice());
        } else {
            for (st, (&ti, &hi)) in self.stage_t.iter_mut().zip(t.iter().zip(dt)) {
                *st = ti + tab.c()[0] * hi;
            }
            let (k0, _) = res.stage_derivs.split_at_mut(1);
            if tab.c()[0].is_zero() {
                f.eval(t, y, &mut k0[0]);
            } else {
                f.eval(&self.stage_t, y, &mut k0[0]);
            }
        }

        // With FSAL the last stage is evaluated at y_next, which is built from b
        // in place of the (identical) last row of a.
        let last_explicit = if fsal { s - 1 } else { s };
        for i in 1..last_explicit {
            let row_a = tab.a(i);
            combine(y, dt, row_a, &res.stage_derivs[..i], &mut self.stage_y);
            for (st, (&ti, &hi)) in self.stage_t.iter_mut().zip(t.iter().zip(dt)) {
                *st = ti + tab.c()[i] * hi;
            }
            let (_, rest) = res.stage_derivs.split_at_mut(i);
            f.eval(&self.stage_t, &self.stage_y, &mut rest[0]);
        }

        let n_b = if fsal { s - 1 } else { s };
        combine(
            y,
            dt,
            &tab.b()[..n_b],
            &res.stage_derivs[..n_b],
            &mut res.y_next,
        );

        if fsal {
            for (st, (&ti, &hi)) in self.stage_t.iter_mut().zip(t.iter().zip(dt)) {
                *st = ti + hi;
            }
            let (_, last) = res.stage_derivs.split_at_mut(s - 1);
            f.eval(&self.stage_t, &res.y_next, &mut last[0]);
        }

        weighted_sum(dt, tab.b_err(), &res.stage_derivs, &mut res.error_estimate);
        &self.result
    }

    /// Dense output for one instance of the most recent step.
    ///
    /// `y0_row` is that instance's state at the start of the step. Theta is
    /// assumed to be in `[0, 1]`; use [`interpolate`] for checked evaluation.
    pub fn interpolate_row(&self, i: usize, y0_row: &[T], dt: T, theta: T, out: &mut [T]) {
        interpolate_row(&self.tableau, &self.result, i, y0_row, dt, theta, out);
    }
}

/// `out = y + dt * sum_m w[m] * k[m]`, accumulated in ascending stage order.
fn combine<T: Scalar>(
    y: &BatchVec<T>,
    dt: &[T],
    w: &[T],
    k: &[BatchVec<T>],
    out: &mut BatchVec<T>,
) {
    let d = y.d();
    let out = out.as_mut_slice();
    let y = y.as_slice();
    for (r, &h) in dt.iter().enumerate() {
        for j in r * d..(r + 1) * d {
            let mut acc = T::zero();
            for (wm, km) in w.iter().zip(k) {
                acc = acc + *wm * km.as_slice()[j];
            }
            out[j] = y[j] + h * acc;
        }
    }
}

/// `out = dt * sum_m w[m] * k[m]`.
fn weighted_sum<T: Scalar>(dt: &[T], w: &[T], k: &[BatchVec<T>], out: &mut BatchVec<T>) {
    let d = out.d();
    let out = out.as_mut_slice();
    for (r, &h) in dt.iter().enumerate() {
        for j in r * d..(r + 1) * d {
            let mut acc = T::zero();
            for (wm, km) in w.iter().zip(k) {
                acc = acc + *wm * km.as_slice()[j];
            }
            out[j] = h * acc;
        }
    }
}

fn interpolate_row<T: Scalar>(
    tab: &ButcherTableau<T>,
    step: &StepResult<T>,
    i: usize,
    y0_row: &[T],
    dt: T,
    theta: T,
    out: &mut [T],
) {
    let s = tab.stages();
    // At most a handful of stages; avoid a heap allocation per emitted point.
    let mut weights = [T::zero(); MAX_STAGES];
    let weights = &mut weights[..s];
    for (m, w) in weights.iter_mut().enumerate() {
        *w = tab.interp_weight(m, theta);
    }
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (w, k) in weights.iter().zip(&step.stage_derivs) {
            acc = acc + *w * k[(i, j)];
        }
        *o = y0_row[j] + dt * acc;
    }
}

/// Allocating single-step convenience around [`Stepper::step`].
pub fn rk_step<T, F>(
    f: &F,
    tableau: &ButcherTableau<T>,
    t: &[T],
    dt: &[T],
    y: &BatchVec<T>,
    f0: &BatchVec<T>,
) -> StepResult<T>
where
    T: Scalar,
    F: Dynamics<T> + ?Sized,
{
    let mut stepper = Stepper::new(tableau.clone(), y.n(), y.d());
    stepper.step(f, t, dt, y, f0);
    stepper.result
}

/// Evaluates the dense output of `step` at `t + theta * dt` for every instance.
pub fn interpolate<T: Scalar>(
    step: &StepResult<T>,
    tableau: &ButcherTableau<T>,
    y0: &BatchVec<T>,
    dt: &[T],
    theta: &[T],
) -> Result<BatchVec<T>> {
    let (n, d) = y0.shape();
    if tableau.stages() > MAX_STAGES {
        return Err(Error::Argument(format!(
            "dense output supports at most {MAX_STAGES} stages"
        )));
    }
    for (what, len) in [("dt", dt.len()), ("theta", theta.len())] {
        if len != n {
            return Err(Error::Shape {
                what,
                expected: n,
                got: len,
            });
        }
    }
    if step.y_next.shape() != (n, d) {
        return Err(Error::Shape {
            what: "step result rows",
            expected: n,
            got: step.y_next.n(),
        });
    }
    for (i, &th) in theta.iter().enumerate() {
        if !(th >= T::zero() && th <= T::one()) {
            return Err(Error::Theta {
                instance: i,
                theta: th.to_f64_lossy(),
            });
        }
    }
    let mut out = BatchVec::zeros(n, d);
    for i in 0..n {
        interpolate_row(tableau, step, i, y0.row(i), dt[i], theta[i], out.row_mut(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::batch::RowWise;
    use crate::tableau::{dopri5, tsit5};

    fn f_of<F: Dynamics<f64>>(f: &F, t: &[f64], y: &BatchVec<f64>) -> BatchVec<f64> {
        let mut dy = BatchVec::zeros(y.n(), y.d());
        f.eval(t, y, &mut dy);
        dy
    }

    #[test]
    fn zero_dynamics() {
        let f = RowWise(|_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0));
        let y = BatchVec::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap();
        let f0 = f_of(&f, &[0.0, 0.0], &y);
        let r = rk_step(&f, &dopri5(), &[0.0, 1.0], &[0.3, -0.7], &y, &f0);
        assert_eq!(r.y_next(), &y);
        assert!(r.error_estimate().as_slice().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn constant_dynamics_is_exact() {
        let f = RowWise(|_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(1.0));
        let y = BatchVec::zeros(1, 3);
        let f0 = f_of(&f, &[0.0], &y);
        for tab in [dopri5(), tsit5()] {
            let r = rk_step(&f, &tab, &[0.0], &[0.1], &y, &f0);
            for &v in r.y_next().as_slice() {
                assert!((v - 0.1).abs() <= 1e-16, "{}: {v}", tab.name());
            }
        }
    }

    #[test]
    fn exponential_step_accuracy() {
        let f = RowWise(|_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0]);
        let y = BatchVec::from_rows(&[[1.0]]).unwrap();
        let f0 = f_of(&f, &[0.0], &y);
        let r = rk_step(&f, &dopri5(), &[0.0], &[0.1], &y, &f0);
        assert!((r.y_next()[(0, 0)] - 0.1f64.exp()).abs() < 1e-9);
        // f_next is f(t + dt, y_next).
        assert_eq!(r.f_next().unwrap()[(0, 0)], r.y_next()[(0, 0)]);
    }

    #[test]
    fn fsal_eval_count() {
        let calls = Cell::new(0usize);
        let f = |_t: &[f64], y: &BatchVec<f64>, dy: &mut BatchVec<f64>| {
            calls.set(calls.get() + 1);
            dy.as_mut_slice().copy_from_slice(y.as_slice());
        };
        let y = BatchVec::from_rows(&[[1.0]]).unwrap();
        let f0 = y.clone();
        let mut st = Stepper::new(dopri5(), 1, 1);
        st.step(&f, &[0.0], &[0.1], &y, &f0);
        assert_eq!(calls.get(), 6);
        assert_eq!(st.evals_per_step(), 6);
    }

    #[test]
    fn non_fsal_tableau_evaluates_every_stage() {
        // Heun-Euler 2(1).
        let heun = ButcherTableau::new(
            "heun-euler",
            vec![vec![], vec![1.0]],
            vec![0.5, 0.5],
            vec![-0.5, 0.5],
            vec![0.0, 1.0],
            2,
            1,
            vec![vec![0.5], vec![0.5]],
        )
        .unwrap();
        assert!(!heun.fsal());
        let calls = Cell::new(0usize);
        let f = |_t: &[f64], y: &BatchVec<f64>, dy: &mut BatchVec<f64>| {
            calls.set(calls.get() + 1);
            dy.as_mut_slice().copy_from_slice(y.as_slice());
        };
        let y = BatchVec::from_rows(&[[1.0]]).unwrap();
        let r = rk_step(&f, &heun, &[0.0], &[0.1], &y, &y.clone());
        assert_eq!(calls.get(), 2);
        assert!((r.y_next()[(0, 0)] - 1.105).abs() < 1e-15);
        assert!(r.f_next().is_none());
    }

    #[test]
    fn non_finite_stage_lands_in_error_estimate() {
        let f = RowWise(|t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = if t > 0.05 { f64::INFINITY } else { y[0] };
        });
        let y = BatchVec::from_rows(&[[1.0], [1.0]]).unwrap();
        let f0 = f_of(&f, &[0.0, 0.0], &y);
        let r = rk_step(&f, &dopri5(), &[0.0, 0.0], &[0.1, 0.01], &y, &f0);
        assert!(!r.error_estimate()[(0, 0)].is_finite());
        assert!(r.error_estimate()[(1, 0)].is_finite());
    }

    #[test]
    fn interpolation_endpoints_and_theta_check() {
        let f = RowWise(|_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        });
        let y = BatchVec::from_rows(&[[1.0, 0.0], [0.3, -2.0]]).unwrap();
        let f0 = f_of(&f, &[0.0, 0.0], &y);
        for tab in [dopri5(), tsit5()] {
            let dt = [0.1, 0.25];
            let r = rk_step(&f, &tab, &[0.0, 0.0], &dt, &y, &f0);
            let at0 = interpolate(&r, &tab, &y, &dt, &[0.0, 0.0]).unwrap();
            assert_eq!(at0, y);
            let at1 = interpolate(&r, &tab, &y, &dt, &[1.0, 1.0]).unwrap();
            for (a, b) in at1.as_slice().iter().zip(r.y_next().as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(matches!(
                interpolate(&r, &tab, &y, &dt, &[0.5, 1.5]),
                Err(Error::Theta { instance: 1, .. })
            ));
            assert!(interpolate(&r, &tab, &y, &dt, &[f64::NAN, 0.0]).is_err());
        }
    }

    #[test]
    fn interpolation_matches_power_form_oracle() {
        let f = RowWise(|_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0]);
        let tab = dopri5();
        let y = BatchVec::from_rows(&[[1.0]]).unwrap();
        let r = rk_step(&f, &tab, &[0.0], &[0.1], &y, &y.clone());
        let theta = 0.5;
        let got = interpolate(&r, &tab, &y, &[0.1], &[theta]).unwrap()[(0, 0)];

        let mut acc = 0.0;
        for i in 0..tab.stages() {
            let w: f64 = tab
                .interp(i)
                .iter()
                .enumerate()
                .map(|(m, c)| c * theta.powi(m as i32 + 1))
                .sum();
            acc += w * r.stage_derivs()[i][(0, 0)];
        }
        let oracle = 1.0 + 0.1 * acc;
        assert!((got - oracle).abs() < 1e-13);
        // Dense output is 4th order accurate on top of that.
        assert!((got - 0.05f64.exp()).abs() < 1e-8);
    }
}
