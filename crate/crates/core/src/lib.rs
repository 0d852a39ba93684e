//! Batched adaptive Runge-Kutta integration.
//!
//! A batch holds many independent initial value problems. Each instance keeps
//! its own step size, error control, accept/reject decisions and termination
//! status while the dynamics are evaluated once per stage on the whole batch.
//! [`solve_joint`] integrates the same batch as one concatenated problem for
//! comparison.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the `*64` and
//! `*32` aliases below fix the precision.
//!
//! ```
//! use batchode::{solve, BatchVec64, IvpBatch64, RowWise, SolverConfig64};
//!
//! let y0 = BatchVec64::from_rows(&[[1.0], [2.0]]).unwrap();
//! let problem = IvpBatch64::uniform(y0, 0.0, 1.0, vec![0.5, 1.0]).unwrap();
//! let decay = RowWise(|_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0]);
//! let sol = solve(&problem, &decay, &SolverConfig64::default()).unwrap();
//! assert!(sol.all_success());
//! let y1 = sol.last(1).unwrap()[0];
//! assert!((y1 - 2.0 * (-1.0f64).exp()).abs() < 1e-4);
//! ```

pub mod batch;
pub mod controller;
pub mod error;
pub mod problems;
pub mod scalar;
pub mod solver;
pub mod stepper;
pub mod tableau;

pub use batch::{BatchVec, Dynamics, RowWise};
pub use controller::{
    error_norm, initial_step, ControlLaw, Controller, ControllerState, PidCoefficients, Tolerance,
    Tolerances, PID_PRESETS,
};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use solver::{
    solve, solve_joint, BatchSolver, IvpBatch, Solution, SolveStats, SolveStatus, SolverConfig,
    StepRecord,
};
pub use stepper::{interpolate, rk_step, StepResult, Stepper};
pub use tableau::{dopri5, tsit5, ButcherTableau};

pub type BatchVec64 = BatchVec<f64>;
pub type BatchVec32 = BatchVec<f32>;
pub type Tableau64 = ButcherTableau<f64>;
pub type Tableau32 = ButcherTableau<f32>;
pub type IvpBatch64 = IvpBatch<f64>;
pub type IvpBatch32 = IvpBatch<f32>;
pub type SolverConfig64 = SolverConfig<f64>;
pub type SolverConfig32 = SolverConfig<f32>;
pub type Solution64 = Solution<f64>;
pub type Solution32 = Solution<f32>;
pub type Tolerances64 = Tolerances<f64>;
pub type Tolerances32 = Tolerances<f32>;
pub type Controller64 = Controller<f64>;
pub type Controller32 = Controller<f32>;
