//! Coefficient tables for explicit embedded Runge-Kutta pairs.
//!
//! Each tableau carries, besides the usual `(a, b, c)` arrays, the weights
//! `b - b_hat` of the embedded error estimate and one dense-output polynomial
//! per stage. The polynomial for stage `i` is stored in power form without
//! constant term, so that
//!
//! ```text
//! y(t + theta * dt) = y(t) + dt * sum_i P_i(theta) * k_i,
//! P_i(theta) = sum_{m >= 1} interp[i][m - 1] * theta^m.
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const CONSISTENCY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau<T> {
    name: &'static str,
    /// Strictly lower-triangular: `a[i]` has length `i`.
    a: Vec<Vec<T>>,
    b: Vec<T>,
    b_err: Vec<T>,
    c: Vec<T>,
    order: u32,
    error_order: u32,
    interp: Vec<Vec<T>>,
    fsal: bool,
}

impl<T: Scalar> ButcherTableau<T> {
    /// Builds a tableau and checks its consistency conditions.
    ///
    /// `a` may be given either strictly lower-triangular (`a[i].len() == i`)
    /// or as full rows; entries on or above the diagonal must be zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &'static str,
        a: Vec<Vec<T>>,
        b: Vec<T>,
        b_err: Vec<T>,
        c: Vec<T>,
        order: u32,
        error_order: u32,
        interp: Vec<Vec<T>>,
    ) -> Result<Self> {
        let s = b.len();
        if s == 0 {
            return Err(Error::Argument("tableau needs at least one stage".into()));
        }
        for (what, len) in [
            ("a", a.len()),
            ("b_err", b_err.len()),
            ("c", c.len()),
            ("interp", interp.len()),
        ] {
            if len != s {
                return Err(Error::Shape {
                    what,
                    expected: s,
                    got: len,
                });
            }
        }
        let mut lower = Vec::with_capacity(s);
        for (i, row) in a.into_iter().enumerate() {
            if row.len() < i || row[i..].iter().any(|x| !x.is_zero()) {
                return Err(Error::Argument(format!(
                    "row {i} of `a` is not strictly lower-triangular"
                )));
            }
            lower.push(row[..i].to_vec());
        }
        let fsal = s > 1
            && c[s - 1] == T::one()
            && lower[s - 1].iter().zip(&b).all(|(x, y)| x == y)
            && b[s - 1].is_zero();
        let tab = Self {
            name,
            a: lower,
            b,
            b_err,
            c,
            order,
            error_order,
            interp,
            fsal,
        };
        tab.check_consistency()?;
        Ok(tab)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_f64(
        name: &'static str,
        a: &[&[f64]],
        b: &[f64],
        b_err: &[f64],
        c: &[f64],
        order: u32,
        error_order: u32,
        interp: &[&[f64]],
    ) -> Self {
        let conv = |xs: &[f64]| xs.iter().map(|&x| T::lit(x)).collect::<Vec<_>>();
        Self::new(
            name,
            a.iter().map(|r| conv(r)).collect(),
            conv(b),
            conv(b_err),
            conv(c),
            order,
            error_order,
            interp.iter().map(|r| conv(r)).collect(),
        )
        .expect("built-in tableau is consistent")
    }

    /// Verifies row sums, weight sums and dense-output endpoint conditions.
    ///
    /// Tolerances scale with the working precision so that `f32` tableaus pass.
    pub fn check_consistency(&self) -> Result<()> {
        let tol = T::lit(CONSISTENCY_TOL).max(T::epsilon() * T::lit(64.0));
        let fail = |msg: String| Err(Error::Argument(format!("{}: {msg}", self.name)));
        for (i, row) in self.a.iter().enumerate() {
            let sum = row.iter().fold(T::zero(), |acc, &x| acc + x);
            if (sum - self.c[i]).abs() > tol {
                return fail(format!(
                    "row sum of a[{i}] = {sum} differs from c = {}",
                    self.c[i]
                ));
            }
        }
        let sb = self.b.iter().fold(T::zero(), |acc, &x| acc + x);
        if (sb - T::one()).abs() > tol {
            return fail(format!("sum(b) = {sb}"));
        }
        let se = self.b_err.iter().fold(T::zero(), |acc, &x| acc + x);
        if se.abs() > tol {
            return fail(format!("sum(b_err) = {se}"));
        }
        for (i, poly) in self.interp.iter().enumerate() {
            let at_one = horner(poly, T::one());
            if (at_one - self.b[i]).abs() > tol {
                return fail(format!(
                    "interpolant of stage {i} at theta=1 is {at_one}, b = {}",
                    self.b[i]
                ));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Stage-coupling row `i` (length `i`).
    pub fn a(&self, i: usize) -> &[T] {
        &self.a[i]
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn b_err(&self) -> &[T] {
        &self.b_err
    }

    pub fn c(&self) -> &[T] {
        &self.c
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn error_order(&self) -> u32 {
        self.error_order
    }

    /// Power-form coefficients (theta^1, theta^2, ...) of stage `i`'s interpolant.
    pub fn interp(&self, i: usize) -> &[T] {
        &self.interp[i]
    }

    pub fn fsal(&self) -> bool {
        self.fsal
    }

    /// Weight of stage `i` in the dense output at `theta`, `P_i(theta)`.
    #[inline]
    pub fn interp_weight(&self, i: usize, theta: T) -> T {
        horner(&self.interp[i], theta) * theta
    }
}

/// Evaluates `sum_m coeffs[m] * x^m` with one multiply-add per coefficient.
#[inline]
pub fn horner<T: Scalar>(coeffs: &[T], x: T) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + c)
}

/// Dormand-Prince 5(4) pair with Shampine's 4th-order continuous extension.
pub fn dopri5<T: Scalar>() -> ButcherTableau<T> {
    ButcherTableau::from_f64(
        "dopri5",
        &[
            &[],
            &[1.0 / 5.0],
            &[3.0 / 40.0, 9.0 / 40.0],
            &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
            &[
                19372.0 / 6561.0,
                -25360.0 / 2187.0,
                64448.0 / 6561.0,
                -212.0 / 729.0,
            ],
            &[
                9017.0 / 3168.0,
                -355.0 / 33.0,
                46732.0 / 5247.0,
                49.0 / 176.0,
                -5103.0 / 18656.0,
            ],
            &[
                35.0 / 384.0,
                0.0,
                500.0 / 1113.0,
                125.0 / 192.0,
                -2187.0 / 6784.0,
                11.0 / 84.0,
            ],
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
            0.0,
        ],
        &[
            71.0 / 57600.0,
            0.0,
            -71.0 / 16695.0,
            71.0 / 1920.0,
            -17253.0 / 339200.0,
            22.0 / 525.0,
            -1.0 / 40.0,
        ],
        &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
        5,
        4,
        &[
            &[
                1.0,
                -8048581381.0 / 2820520608.0,
                8663915743.0 / 2820520608.0,
                -12715105075.0 / 11282082432.0,
            ],
            &[0.0, 0.0, 0.0, 0.0],
            &[
                0.0,
                131558114200.0 / 32700410799.0,
                -68118460800.0 / 10900136933.0,
                87487479700.0 / 32700410799.0,
            ],
            &[
                0.0,
                -1754552775.0 / 470086768.0,
                14199869525.0 / 1410260304.0,
                -10690763975.0 / 1880347072.0,
            ],
            &[
                0.0,
                127303824393.0 / 49829197408.0,
                -318862633887.0 / 49829197408.0,
                701980252875.0 / 199316789632.0,
            ],
            &[
                0.0,
                -282668133.0 / 205662961.0,
                2019193451.0 / 616988883.0,
                -1453857185.0 / 822651844.0,
            ],
            &[
                0.0,
                40617522.0 / 29380423.0,
                -110615467.0 / 29380423.0,
                69997945.0 / 29380423.0,
            ],
        ],
    )
}

/// Tsitouras 5(4) pair with its published free 4th-order interpolant.
#[allow(clippy::excessive_precision)]
pub fn tsit5<T: Scalar>() -> ButcherTableau<T> {
    let b = [
        0.09646076681806523,
        0.01,
        0.4798896504144996,
        1.379008574103742,
        -3.290069515436081,
        2.324710524099774,
        0.0,
    ];
    ButcherTableau::from_f64(
        "tsit5",
        &[
            &[],
            &[0.161],
            &[-0.008480655492356989, 0.335480655492357],
            &[2.897153057105493, -6.359448489975075, 4.3622954328695815],
            &[
                5.325864828439257,
                -11.748883564062828,
                7.4955393428898365,
                -0.09249506636175525,
            ],
            &[
                5.86145544294642,
                -12.92096931784711,
                8.159367898576159,
                -0.071584973281401,
                -0.028269050394068383,
            ],
            &b[..6],
        ],
        &b,
        &[
            -0.00178001105222577714,
            -0.0008164344596567469,
            0.007880878010261995,
            -0.1447110071732629,
            0.5823571654525552,
            -0.45808210592918697,
            1.0 / 66.0,
        ],
        &[0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0],
        5,
        4,
        &[
            &[
                1.0,
                -2.763706197274826,
                2.9132554618219126,
                -1.0530884977290216,
            ],
            &[0.0, 0.13169999999999998, -0.2234, 0.1017],
            &[
                0.0,
                3.9302962368947516,
                -5.941033872131505,
                2.490627285651253,
            ],
            &[
                0.0,
                -12.411077166933676,
                30.33818863028232,
                -16.548102889244902,
            ],
            &[0.0, 37.50931341651104, -88.1789048947664, 47.37952196281928],
            &[
                0.0,
                -27.896526289197286,
                65.09189467479366,
                -34.87065786149661,
            ],
            &[0.0, 1.5, -4.0, 2.5],
        ],
    )
}

/// Looks up a built-in tableau by name (`dopri5` or `tsit5`).
pub fn by_name<T: Scalar>(name: &str) -> Option<ButcherTableau<T>> {
    match name {
        "dopri5" => Some(dopri5()),
        "tsit5" => Some(tsit5()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn both() -> [ButcherTableau<f64>; 2] {
        [dopri5(), tsit5()]
    }

    #[test]
    fn dopri5_nodes() {
        let t = dopri5::<f64>();
        assert_eq!(t.c()[1], 0.2);
        assert_eq!(t.stages(), 7);
        assert_eq!((t.order(), t.error_order()), (5, 4));
        assert!(t.fsal());
    }

    #[test]
    fn tsit5_shape() {
        let t = tsit5::<f64>();
        assert_eq!(t.stages(), 7);
        assert_eq!((t.order(), t.error_order()), (5, 4));
        assert!(t.fsal());
    }

    #[test]
    fn consistency_at_1e12() {
        for t in both() {
            for i in 0..t.stages() {
                let s: f64 = t.a(i).iter().sum();
                assert!((s - t.c()[i]).abs() < 1e-12, "{} row {i}", t.name());
            }
            assert!((t.b().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.b_err().iter().sum::<f64>().abs() < 1e-12);
            for i in 0..t.stages() {
                assert_eq!(t.interp_weight(i, 0.0), 0.0);
                assert!((t.interp_weight(i, 1.0) - t.b()[i]).abs() < 1e-12);
            }
            let s = t.stages();
            assert_eq!(t.a(s - 1), &t.b()[..s - 1]);
            assert_eq!(t.c()[s - 1], 1.0);
        }
    }

    #[test]
    fn f32_tableaus_build() {
        assert!(dopri5::<f32>().fsal());
        assert!(tsit5::<f32>().fsal());
    }

    #[test]
    fn inconsistent_tableau_rejected() {
        let r = ButcherTableau::<f64>::new(
            "bad",
            vec![vec![], vec![0.4]],
            vec![0.5, 0.5],
            vec![0.5, -0.5],
            vec![0.0, 0.5],
            1,
            0,
            vec![vec![0.5], vec![0.5]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn lookup() {
        assert_eq!(by_name::<f64>("tsit5").unwrap().name(), "tsit5");
        assert!(by_name::<f64>("rk4").is_none());
    }

    /// Fixed-step scalar integration of y' = y written independently of the stepper.
    fn fixed_step_exp(t: &ButcherTableau<f64>, steps: usize) -> f64 {
        let h = 1.0 / steps as f64;
        let mut y = 1.0;
        let mut k = vec![0.0; t.stages()];
        for _ in 0..steps {
            for i in 0..t.stages() {
                let yi = y + h * t.a(i).iter().zip(&k).map(|(a, k)| a * k).sum::<f64>();
                k[i] = yi;
            }
            y += h * t.b().iter().zip(&k).map(|(b, k)| b * k).sum::<f64>();
        }
        y
    }

    #[test]
    fn empirical_order() {
        // tsit5 is pre-asymptotic on this problem for h > 1/16.
        let e = std::f64::consts::E;
        for t in both() {
            let e1 = (fixed_step_exp(&t, 32) - e).abs();
            let e2 = (fixed_step_exp(&t, 64) - e).abs();
            let order = (e1 / e2).log2();
            assert!(order >= 4.7, "{}: order {order}", t.name());
        }
    }
}
