//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p batchode-bench --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use batchode::problems::{vdp_batch, MAX_STIFFNESS_SPREAD};
use batchode::tableau::horner;
use batchode::{
    dopri5, interpolate, rk_step, solve, solve_joint, tsit5, BatchVec, ButcherTableau, Controller,
    ControllerState, IvpBatch, PidCoefficients, RowWise, Solution, SolverConfig, PID_PRESETS,
};
use batchode_bench::{default_presets, pid_sweep, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let in_time = elapsed < limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    println!(
        "[{verdict}] criterion {id}: {name}: {detail} ({:.3}s, limit {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
    assert!(
        in_time,
        "criterion {id} ({name}) exceeded {}s",
        limit.as_secs()
    );
}

/// Error at `t = 1` of fixed-step integration of `y' = y` from `y(0) = 1`.
fn exp_error(tab: &ButcherTableau<f64>, steps: usize) -> f64 {
    let f = RowWise(|_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0]);
    let h = 1.0 / steps as f64;
    let mut y = BatchVec::from_vec(1, 1, vec![1.0]).unwrap();
    let mut f0 = y.clone();
    for k in 0..steps {
        let step = rk_step(&f, tab, &[k as f64 * h], &[h], &y, &f0);
        y = step.y_next().clone();
        f0 = step.f_next().unwrap().clone();
    }
    (y[(0, 0)] - 1f64.exp()).abs()
}

#[test]
fn criterion_1_convergence_order() {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for tab in [dopri5::<f64>(), tsit5()] {
        let e: Vec<f64> = [32, 64, 128].iter().map(|&s| exp_error(&tab, s)).collect();
        let p1 = (e[0] / e[1]).log2();
        let p2 = (e[1] / e[2]).log2();
        ok &= p1 >= 4.7 && p2 >= 4.7;
        detail.push(format!("{} orders {p1:.3}, {p2:.3}", tab.name()));
    }
    report(
        1,
        "convergence order >= 4.7",
        ok,
        &detail.join("; "),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

/// A randomized batch of problems sharing one row-wise right-hand side.
struct RandomProblem {
    problem: IvpBatch<f64>,
    a: Vec<f64>,
    w: f64,
    config: SolverConfig<f64>,
}

impl RandomProblem {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=4);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
        let w = rng.gen_range(-2.0..2.0);
        let y0: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t_start = Vec::new();
        let mut t_end = Vec::new();
        let mut t_eval = Vec::new();
        for _ in 0..n {
            let t0: f64 = rng.gen_range(-1.0..1.0);
            let len: f64 = rng.gen_range(0.5..5.0);
            let t1 = if rng.gen_bool(0.2) {
                t0 - len
            } else {
                t0 + len
            };
            let mut pts: Vec<f64> = (0..rng.gen_range(0..6))
                .map(|_| rng.gen_range(t0.min(t1)..t0.max(t1)))
                .collect();
            pts.sort_by(f64::total_cmp);
            if t1 < t0 {
                pts.reverse();
            }
            t_start.push(t0);
            t_end.push(t1);
            t_eval.push(pts);
        }
        let problem = IvpBatch::new(
            BatchVec::from_vec(n, d, y0).unwrap(),
            t_start,
            t_end,
            t_eval,
        )
        .unwrap();
        let tol = 10f64.powf(rng.gen_range(-9.0..-3.0));
        let tab = if rng.gen_bool(0.5) { dopri5() } else { tsit5() };
        let controller = match rng.gen_range(0..=PID_PRESETS.len()) {
            0 => Controller::integral(),
            k => Controller::pid(PidCoefficients::preset(PID_PRESETS[k - 1].0).unwrap()),
        };
        let config = SolverConfig::default()
            .with_tableau(tab)
            .with_tolerances(tol, tol)
            .with_controller(controller)
            .with_trace();
        Self {
            problem,
            a,
            w,
            config,
        }
    }

    fn solve(&self, problem: &IvpBatch<f64>) -> Solution<f64> {
        let (a, w) = (&self.a, self.w);
        let f = RowWise(move |t: f64, y: &[f64], dy: &mut [f64]| {
            let d = y.len();
            for j in 0..d {
                dy[j] = -a[j] * y[j] + w * t.sin() * y[(j + 1) % d] + 0.1 * y[j].cos();
            }
        });
        solve(problem, &f, &self.config).unwrap()
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Compares instance `i` of a batch solve to instance 0 of a single solve.
fn instance_matches(batch: &Solution<f64>, i: usize, single: &Solution<f64>) -> Result<(), String> {
    let ys_bits = |s: &Solution<f64>, k: usize| -> Vec<Option<Vec<u64>>> {
        s.ys[k].iter().map(|y| y.as_deref().map(bits)).collect()
    };
    if ys_bits(batch, i) != ys_bits(single, 0) {
        return Err(format!("instance {i}: emitted states differ"));
    }
    let trace = |s: &Solution<f64>, k: usize| -> Vec<(u64, u64, bool)> {
        s.trace.as_ref().unwrap()[k]
            .iter()
            .map(|r| (r.t.to_bits(), r.dt.to_bits(), r.accepted))
            .collect()
    };
    if trace(batch, i) != trace(single, 0) {
        return Err(format!("instance {i}: dt sequence or accept mask differs"));
    }
    if batch.status[i] != single.status[0] {
        return Err(format!("instance {i}: status differs"));
    }
    let (b, s) = (&batch.stats, &single.stats);
    if b.n_steps[i] != s.n_steps[0]
        || b.n_accepted[i] != s.n_accepted[0]
        || b.final_dt[i].to_bits() != s.final_dt[0].to_bits()
    {
        return Err(format!("instance {i}: step statistics differ"));
    }
    for (key, values) in &b.extra {
        if values[i].to_bits() != s.extra[key][0].to_bits() {
            return Err(format!("instance {i}: extra statistic {key} differs"));
        }
    }
    Ok(())
}

#[test]
fn criterion_2_batch_independence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut failures = Vec::new();
    let mut instances = 0;
    for _ in 0..10 {
        let rp = RandomProblem::new(&mut rng);
        let batch = rp.solve(&rp.problem);
        for i in 0..rp.problem.n() {
            let single = rp.solve(&rp.problem.instance(i));
            instances += 1;
            if let Err(e) = instance_matches(&batch, i, &single) {
                failures.push(e);
            }
        }
    }
    let detail = format!(
        "{instances} instances over 10 problems, {} mismatches {:?}",
        failures.len(),
        failures
    );
    report(
        2,
        "batch independence (bit-exact)",
        failures.is_empty(),
        &detail,
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_3_joint_batching_pathology() {
    let start = Instant::now();
    let batch = vdp_batch::<f64>(4, 25.0, MAX_STIFFNESS_SPREAD, 2).unwrap();
    let config = SolverConfig::default().with_tolerances(1e-5, 1e-5);
    let indep = solve(&batch.problem, &batch.dynamics, &config).unwrap();
    let joint = solve_joint(&batch.problem, &batch.dynamics, &config).unwrap();
    let max_indep = *indep.stats.n_steps.iter().max().unwrap();
    let joint_steps = joint.stats.n_steps[0];
    let ratio = joint_steps as f64 / max_indep as f64;
    let ok = indep.all_success() && joint.all_success() && ratio >= 1.5;
    let detail = format!(
        "independent steps {:?}, joint {joint_steps}, ratio {ratio:.3} (need >= 1.5)",
        indep.stats.n_steps
    );
    report(
        3,
        "joint batching pathology",
        ok,
        &detail,
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_4_vdp_configuration_runs() {
    let start = Instant::now();
    let batch = vdp_batch::<f64>(256, 2.0, 2.0 * std::f64::consts::PI, 200).unwrap();
    let sol = solve(
        &batch.problem,
        &batch.dynamics,
        &SolverConfig::default().with_tolerances(1e-5, 1e-5),
    )
    .unwrap();
    let reference_config = SolverConfig::default()
        .with_tolerances(1e-10, 1e-10)
        .with_max_steps(1_000_000);
    let reference = solve(&batch.problem, &batch.dynamics, &reference_config).unwrap();
    let all_success = sol.all_success() && reference.all_success();
    let emitted = sol
        .ys
        .iter()
        .all(|ys| ys.len() == 200 && ys.iter().all(Option::is_some));
    let max_err = (0..256)
        .map(|i| {
            let (a, b) = (sol.last(i).unwrap(), reference.last(i).unwrap());
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let ok = all_success && emitted && max_err < 1e-3;
    let detail = format!("all SUCCESS: {all_success}, 200 points each: {emitted}, max final-state error {max_err:.3e} (need < 1e-3)");
    report(
        4,
        "256 Van der Pol runs at mu = 2",
        ok,
        &detail,
        start.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_5_pid_tradeoff() {
    let start = Instant::now();
    let rows = pid_sweep::<f64>(
        &[5.0, 15.0, 25.0, 40.0],
        &default_presets(),
        4,
        &SolverOptions::default(),
    )
    .unwrap();
    let all_ok = rows.iter().all(|r| r.ratio.is_some());
    let ratios = |mu: f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.mu == mu && r.preset != "integral")
            .filter_map(|r| r.ratio)
            .collect()
    };
    let worst_5 = ratios(5.0).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let best_40 = ratios(40.0).into_iter().fold(f64::INFINITY, f64::min);
    let saving_40 = 1.0 - best_40;
    let ok = all_ok && worst_5 >= 1.0 && (0.01..=0.10).contains(&saving_40);
    let detail = format!(
        "mu=5 worst preset ratio {worst_5:.4} (need >= 1); mu=40 best saving {:.2}% (need 1-10%)",
        saving_40 * 100.0
    );
    report(
        5,
        "PID trade-off",
        ok,
        &detail,
        start.elapsed(),
        Duration::from_secs(60),
    );
}

fn fsal_formula(accepted: usize, attempted: usize) -> usize {
    1 + 6 * accepted + 7 * (attempted - accepted)
}

#[test]
fn criterion_6_statistics_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let mut problems = Vec::new();
    for case in 0..20 {
        let mut rp = RandomProblem::new(&mut rng);
        rp.config.tableau = dopri5();
        if case % 2 == 0 {
            // Tight tolerances on a rough start force rejections.
            rp.config.tol = batchode::Tolerances::new(1e-10, 1e-10);
        }
        problems.push(rp);
    }
    let mut errors = Vec::new();
    let mut rejected_total = 0;
    for (p, rp) in problems.iter().enumerate() {
        let sol = rp.solve(&rp.problem);
        let s = &sol.stats;
        if s.n_f_evals.iter().any(|&e| e != s.n_f_evals[0]) {
            errors.push(format!("problem {p}: n_f_evals differ across instances"));
        }
        if s.n_f_evals[0] != fsal_formula(s.batch_accepted, s.batch_steps) {
            errors.push(format!(
                "problem {p}: batch evaluations do not follow the FSAL formula"
            ));
        }
        rejected_total += s.batch_steps - s.batch_accepted;
        for i in 0..rp.problem.n() {
            let single = rp.solve(&rp.problem.instance(i));
            let st = &single.stats;
            if st.n_f_evals[0] != fsal_formula(st.n_accepted[0], st.n_steps[0]) {
                errors.push(format!(
                    "problem {p} instance {i}: single solve breaks the FSAL formula"
                ));
            }
            if st.n_accepted[0] > st.n_steps[0] {
                errors.push(format!(
                    "problem {p} instance {i}: more accepted than attempted steps"
                ));
            }
        }
    }
    let detail = format!(
        "20 random batches, {rejected_total} rejected batch steps, {} violations {:?}",
        errors.len(),
        errors
    );
    report(
        6,
        "statistics invariants",
        errors.is_empty() && rejected_total > 0,
        &detail,
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_7_interpolant_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let f = RowWise(|t: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = y[1];
        dy[1] = -y[0] + t.cos() * y[1];
    });
    let mut endpoint_err: f64 = 0.0;
    for tab in [dopri5::<f64>(), tsit5()] {
        let n = 16;
        let y0 = BatchVec::from_vec(n, 2, (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dt: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut f0 = BatchVec::zeros(n, 2);
        batchode::Dynamics::eval(&f, &t, &y0, &mut f0);
        let step = rk_step(&f, &tab, &t, &dt, &y0, &f0);
        for (theta, target) in [(0.0, &y0), (1.0, step.y_next())] {
            let y = interpolate(&step, &tab, &y0, &dt, &vec![theta; n]).unwrap();
            for (a, b) in y.as_slice().iter().zip(target.as_slice()) {
                endpoint_err = endpoint_err.max((a - b).abs());
            }
        }
    }

    let mut horner_rel: f64 = 0.0;
    for _ in 0..1000 {
        let degree = rng.gen_range(0..=8);
        let coeffs: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let x: f64 = rng.gen_range(-1.0..=1.0);
        let power: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| c * x.powi(m as i32))
            .sum();
        // Relative to the sum of term magnitudes, the scale of the rounding error of either form.
        let scale: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| (c * x.powi(m as i32)).abs())
            .sum();
        let rel = (horner(&coeffs, x) - power).abs() / scale.max(f64::MIN_POSITIVE);
        horner_rel = horner_rel.max(rel);
    }
    let ok = endpoint_err <= 1e-12 && horner_rel <= 1e-12;
    let detail = format!("endpoint error {endpoint_err:.2e}, Horner vs power form {horner_rel:.2e} (both need <= 1e-12)");
    report(
        7,
        "interpolant correctness",
        ok,
        &detail,
        start.elapsed(),
        Duration::from_secs(1),
    );
}

/// Reference integral controller written independently of the library.
fn integral_reference(norms: &[f64], dt0: f64) -> Vec<(u64, bool)> {
    let (safety, fmin, fmax, k) = (0.9, 0.2, 10.0, 5.0);
    let mut dt = dt0;
    norms
        .iter()
        .map(|&e| {
            let accept = e <= 1.0;
            let raw = safety * e.max(1e-10).powf(-(1.0 / k));
            let upper = if accept { fmax } else { 1.0 };
            dt *= raw.max(fmin).min(upper);
            (dt.to_bits(), accept)
        })
        .collect()
}

#[test]
fn criterion_8_controller_reduction() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
    let pid = Controller::pid(PidCoefficients::new(1.0, 0.0, 0.0));
    let integral = Controller::<f64>::integral();
    let mut mismatches = 0;
    for _ in 0..100 {
        let len = rng.gen_range(1..200);
        let norms: Vec<f64> = (0..len)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => rng.gen_range(1.0..1e6),
                _ => 10f64.powf(rng.gen_range(-8.0..1.0)),
            })
            .collect();
        let dt0 = rng.gen_range(1e-4..1.0);
        let run = |c: &Controller<f64>| -> Vec<(u64, bool)> {
            let mut state = ControllerState::new(vec![dt0]);
            let mut accept = [false];
            norms
                .iter()
                .map(|&e| {
                    c.adapt_step(&mut state, &[e], &[true], 4, &mut accept);
                    (state.dt()[0].to_bits(), accept[0])
                })
                .collect()
        };
        let reference = integral_reference(&norms, dt0);
        if run(&pid) != reference || run(&integral) != reference {
            mismatches += 1;
        }
    }
    let detail = format!("100 random norm sequences, {mismatches} trajectories differ");
    report(
        8,
        "PID(1,0,0) reduces to integral",
        mismatches == 0,
        &detail,
        start.elapsed(),
        Duration::from_secs(1),
    );
}
