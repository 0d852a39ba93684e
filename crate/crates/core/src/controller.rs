//! Error norms, starting-step selection and per-instance step-size control.

use std::collections::BTreeMap;

use crate::batch::{BatchVec, Dynamics};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Error norms are floored at this value before being raised to a power.
pub const NORM_FLOOR: f64 = 1e-10;

/// A tolerance that is either shared, set per instance, or set per component.
#[derive(Debug, Clone, PartialEq)]
pub enum Tolerance<T> {
    Scalar(T),
    PerInstance(Vec<T>),
    /// One value per feature column, shared by all instances.
    PerComponent(Vec<T>),
}

impl<T: Scalar> Tolerance<T> {
    #[inline]
    pub fn get(&self, instance: usize, component: usize) -> T {
        match self {
            Tolerance::Scalar(v) => *v,
            Tolerance::PerInstance(v) => v[instance],
            Tolerance::PerComponent(v) => v[component],
        }
    }

    fn check_len(&self, n: usize, d: usize) -> Result<()> {
        match self {
            Tolerance::Scalar(_) => Ok(()),
            Tolerance::PerInstance(v) if v.len() == n => Ok(()),
            Tolerance::PerComponent(v) if v.len() == d => Ok(()),
            Tolerance::PerInstance(v) => Err(Error::Shape {
                what: "per-instance tolerance",
                expected: n,
                got: v.len(),
            }),
            Tolerance::PerComponent(v) => Err(Error::Shape {
                what: "per-component tolerance",
                expected: d,
                got: v.len(),
            }),
        }
    }

    /// Expands to one value per component of the flattened `(n * d)` problem.
    pub(crate) fn flatten(&self, n: usize, d: usize) -> Tolerance<T> {
        match self {
            Tolerance::Scalar(v) => Tolerance::Scalar(*v),
            _ => Tolerance::PerComponent(
                (0..n)
                    .flat_map(|i| (0..d).map(move |j| (i, j)))
                    .map(|(i, j)| self.get(i, j))
                    .collect(),
            ),
        }
    }
}

/// Mixed absolute/relative tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances<T> {
    pub atol: Tolerance<T>,
    pub rtol: Tolerance<T>,
}

impl<T: Scalar> Tolerances<T> {
    pub fn new(atol: T, rtol: T) -> Self {
        Self {
            atol: Tolerance::Scalar(atol),
            rtol: Tolerance::Scalar(rtol),
        }
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        self.atol.check_len(n, d)?;
        self.rtol.check_len(n, d)?;
        for i in 0..n {
            for j in 0..d {
                let (a, r) = (self.atol.get(i, j), self.rtol.get(i, j));
                if !(a >= T::zero() && r >= T::zero() && a.is_finite() && r.is_finite()) {
                    return Err(Error::Tolerance(format!(
                        "atol = {a}, rtol = {r} at ({i}, {j}) must be finite and nonnegative"
                    )));
                }
                if a.is_zero() && r.is_zero() {
                    return Err(Error::Tolerance(format!(
                        "atol and rtol are both zero at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn scale(&self, i: usize, j: usize, y_mag: T) -> T {
        self.atol.get(i, j) + self.rtol.get(i, j) * y_mag
    }

    pub(crate) fn flatten(&self, n: usize, d: usize) -> Self {
        Self {
            atol: self.atol.flatten(n, d),
            rtol: self.rtol.flatten(n, d),
        }
    }
}

/// Scaled RMS norm of the error estimate, one value per instance.
///
/// `sqrt(mean_j (e_j / (atol + rtol * max(|y0_j|, |y1_j|)))^2)`. Any non-finite
/// error or candidate-state component makes the instance's norm `+inf`.
pub fn error_norm<T: Scalar>(
    error_estimate: &BatchVec<T>,
    y0: &BatchVec<T>,
    y1: &BatchVec<T>,
    tol: &Tolerances<T>,
) -> Vec<T> {
    let mut out = vec![T::zero(); y0.n()];
    error_norm_into(error_estimate, y0, y1, tol, &mut out);
    out
}

pub fn error_norm_into<T: Scalar>(
    error_estimate: &BatchVec<T>,
    y0: &BatchVec<T>,
    y1: &BatchVec<T>,
    tol: &Tolerances<T>,
    out: &mut [T],
) {
    debug_assert_eq!(error_estimate.shape(), y0.shape());
    debug_assert_eq!(y1.shape(), y0.shape());
    let d = y0.d();
    let inv_d = T::one() / T::from_usize_lossy(d);
    for (i, norm) in out.iter_mut().enumerate() {
        let (e, a, b) = (error_estimate.row(i), y0.row(i), y1.row(i));
        let mut sum = T::zero();
        let mut finite = true;
        for j in 0..d {
            finite &= e[j].is_finite() && b[j].is_finite();
            let sc = tol.scale(i, j, a[j].abs().max(b[j].abs()));
            let r = e[j] / sc;
            sum = sum + r * r;
        }
        *norm = if finite && !sum.is_nan() {
            (sum * inv_d).sqrt()
        } else {
            T::infinity()
        };
    }
}

fn rms_scaled<T: Scalar>(v: &[T], y0: &[T], tol: &Tolerances<T>, i: usize) -> T {
    let mut sum = T::zero();
    for (j, (&x, &y)) in v.iter().zip(y0).enumerate() {
        let r = x / tol.scale(i, j, y.abs());
        sum = sum + r * r;
    }
    (sum / T::from_usize_lossy(v.len())).sqrt()
}

/// Starting step size per instance, signed toward `t_end`.
///
/// Classical two-evaluation heuristic: a first guess from the ratio of state
/// and derivative norms, refined with an explicit Euler probe that estimates
/// the second derivative. `f0` must equal `f(t0, y0)`; the probe costs one more
/// batch evaluation of `f`.
pub fn initial_step<T, F>(
    f: &F,
    t0: &[T],
    y0: &BatchVec<T>,
    f0: &BatchVec<T>,
    t_end: &[T],
    order: u32,
    tol: &Tolerances<T>,
) -> Vec<T>
where
    T: Scalar,
    F: Dynamics<T> + ?Sized,
{
    let (n, d) = y0.shape();
    let small = T::lit(1e-5);
    let fallback = T::lit(1e-6);
    let hundredth = T::lit(0.01);

    let mut h0 = vec![T::zero(); n];
    let mut d1s = vec![T::zero(); n];
    let mut t_probe = vec![T::zero(); n];
    let mut y_probe = BatchVec::zeros(n, d);
    for i in 0..n {
        let span = (t_end[i] - t0[i]).abs();
        let dir = (t_end[i] - t0[i]).signum();
        let d0 = rms_scaled(y0.row(i), y0.row(i), tol, i);
        let d1 = rms_scaled(f0.row(i), y0.row(i), tol, i);
        let mut h = if d0 < small || d1 < small || !(d0 / d1).is_finite() {
            fallback
        } else {
            hundredth * d0 / d1
        };
        h = h.min(span);
        h0[i] = h;
        d1s[i] = d1;
        t_probe[i] = t0[i] + dir * h;
        let (y, fy) = (y0.row(i), f0.row(i));
        for (j, yp) in y_probe.row_mut(i).iter_mut().enumerate() {
            *yp = y[j] + dir * h * fy[j];
        }
    }

    let mut f1 = BatchVec::zeros(n, d);
    f.eval(&t_probe, &y_probe, &mut f1);

    let exponent = T::one() / T::lit(order.max(1) as f64);
    (0..n)
        .map(|i| {
            let span = (t_end[i] - t0[i]).abs();
            let dir = (t_end[i] - t0[i]).signum();
            let mut sum = T::zero();
            for j in 0..d {
                let r = (f1[(i, j)] - f0[(i, j)]) / tol.scale(i, j, y0[(i, j)].abs());
                sum = sum + r * r;
            }
            let d2 = (sum / T::from_usize_lossy(d)).sqrt() / h0[i];
            let dmax = d1s[i].max(d2);
            let h1 = if dmax <= T::lit(1e-15) {
                fallback.max(h0[i] * T::lit(1e-3))
            } else {
                (hundredth / dmax).powf(exponent)
            };
            let mut h = (T::lit(100.0) * h0[i]).min(h1).min(span);
            if !(h.is_finite() && h > T::zero()) {
                h = fallback.min(span);
            }
            dir * h
        })
        .collect()
}

/// Gains applied to the current and two previous error norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidCoefficients<T> {
    pub beta1: T,
    pub beta2: T,
    pub beta3: T,
}

/// Named gain sets `(beta1, beta2, beta3)`.
pub const PID_PRESETS: &[(&str, [f64; 3])] = &[
    ("PI42", [0.6, -0.2, 0.0]),
    ("PI33", [2.0 / 3.0, -1.0 / 3.0, 0.0]),
    ("PI34", [0.7, -0.4, 0.0]),
    ("H211", [1.0 / 6.0, 1.0 / 6.0, 0.0]),
    ("H312", [1.0 / 18.0, 1.0 / 9.0, 1.0 / 18.0]),
];

impl<T: Scalar> PidCoefficients<T> {
    pub fn new(beta1: T, beta2: T, beta3: T) -> Self {
        Self {
            beta1,
            beta2,
            beta3,
        }
    }

    pub fn integral() -> Self {
        Self::new(T::one(), T::zero(), T::zero())
    }

    pub fn preset(name: &str) -> Result<Self> {
        PID_PRESETS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, b)| Self::new(T::lit(b[0]), T::lit(b[1]), T::lit(b[2])))
            .ok_or_else(|| Error::UnknownPreset(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlLaw<T> {
    /// `factor = safety * norm^(-1/k)`.
    Integral,
    Pid(PidCoefficients<T>),
}

/// Step-size controller configuration, shared by all instances of a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller<T> {
    pub law: ControlLaw<T>,
    pub safety: T,
    pub factor_min: T,
    pub factor_max: T,
    /// Shift the error history on rejected steps too, not only accepted ones.
    pub history_on_reject: bool,
}

impl<T: Scalar> Default for Controller<T> {
    fn default() -> Self {
        Self {
            law: ControlLaw::Integral,
            safety: T::lit(0.9),
            factor_min: T::lit(0.2),
            factor_max: T::lit(10.0),
            history_on_reject: true,
        }
    }
}

/// Per-instance controller memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState<T> {
    pub(crate) prev: Vec<T>,
    pub(crate) prev2: Vec<T>,
    pub(crate) dt: Vec<T>,
}

impl<T: Scalar> ControllerState<T> {
    pub fn new(dt: Vec<T>) -> Self {
        let n = dt.len();
        Self {
            prev: vec![T::one(); n],
            prev2: vec![T::one(); n],
            dt,
        }
    }

    pub fn dt(&self) -> &[T] {
        &self.dt
    }

    pub fn dt_mut(&mut self) -> &mut [T] {
        &mut self.dt
    }

    /// The two most recent error norms per instance, newest first.
    pub fn history(&self, i: usize) -> (T, T) {
        (self.prev[i], self.prev2[i])
    }
}

impl<T: Scalar> Controller<T> {
    pub fn integral() -> Self {
        Self::default()
    }

    pub fn pid(coeffs: PidCoefficients<T>) -> Self {
        Self {
            law: ControlLaw::Pid(coeffs),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Controller(m));
        if !(self.safety > T::zero() && self.safety <= T::one()) {
            return bad(format!("safety {} not in (0, 1]", self.safety));
        }
        if !(self.factor_min > T::zero()
            && self.factor_min < T::one()
            && self.factor_max > T::one()
            && self.factor_max.is_finite())
        {
            return bad(format!(
                "need 0 < factor_min < 1 < factor_max, got [{}, {}]",
                self.factor_min, self.factor_max
            ));
        }
        if let ControlLaw::Pid(c) = self.law {
            if !(c.beta1.is_finite() && c.beta2.is_finite() && c.beta3.is_finite()) {
                return bad("PID gains must be finite".into());
            }
            if c.beta1 <= T::zero() {
                return bad(format!("beta1 = {} must be positive", c.beta1));
            }
        }
        Ok(())
    }

    /// Step-size ratio proposed for one instance, before clamping.
    pub fn raw_factor(&self, norm: T, prev: T, prev2: T, error_order: u32) -> T {
        let k = T::lit(f64::from(error_order) + 1.0);
        let norm = floor_norm(norm);
        match self.law {
            ControlLaw::Integral => self.safety * norm.powf(-(T::one() / k)),
            ControlLaw::Pid(c) => {
                self.safety
                    * norm.powf(-(c.beta1 / k))
                    * prev.powf(-(c.beta2 / k))
                    * prev2.powf(-(c.beta3 / k))
            }
        }
    }

    /// Decides acceptance and proposes the next step size for every active
    /// instance. Inactive instances keep their state untouched.
    ///
    /// An instance accepts iff its norm is at most 1. The step-size ratio is
    /// clamped to `[factor_min, factor_max]`, and additionally to at most 1 on
    /// rejection so a rejected step is always retried with a smaller one.
    pub fn adapt_step(
        &self,
        state: &mut ControllerState<T>,
        norms: &[T],
        active: &[bool],
        error_order: u32,
        accept: &mut [bool],
    ) {
        for i in 0..norms.len() {
            if !active[i] {
                accept[i] = false;
                continue;
            }
            let norm = if norms[i].is_nan() {
                T::infinity()
            } else {
                norms[i]
            };
            let ok = norm <= T::one();
            let upper = if ok {
                self.factor_max
            } else {
                self.factor_max.min(T::one())
            };
            let raw = self.raw_factor(norm, state.prev[i], state.prev2[i], error_order);
            let factor = if raw.is_nan() {
                self.factor_min
            } else {
                raw.max(self.factor_min).min(upper)
            };
            state.dt[i] = state.dt[i] * factor;
            if ok || self.history_on_reject {
                state.prev2[i] = state.prev[i];
                state.prev[i] = floor_norm(norm).min(T::one() / T::lit(NORM_FLOOR));
            }
            accept[i] = ok;
        }
    }

    /// Exposes the error history in the solver's extra statistics.
    pub fn report(&self, state: &ControllerState<T>, extra: &mut BTreeMap<String, Vec<T>>) {
        extra.insert("controller.err_prev".into(), state.prev.clone());
        extra.insert("controller.err_prev2".into(), state.prev2.clone());
    }
}

#[inline]
fn floor_norm<T: Scalar>(norm: T) -> T {
    let eps = T::lit(NORM_FLOOR);
    if norm > eps {
        norm
    } else {
        eps
    }
}

/// True when `t + dt` is indistinguishable from `t` in the working precision.
#[inline]
pub fn step_underflows<T: Scalar>(t: T, dt: T) -> bool {
    t + dt == t
}
