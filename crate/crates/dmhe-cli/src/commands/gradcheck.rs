//! Gradient verification against independent oracles.
//!
//! Horizon problems are captured live from a closed-loop episode on the
//! configured scenario, then each fixture runs three checks:
//!
//! 1. `kalman_vs_direct` — the filter/smoother recursion against a dense LU
//!    solve of the full differentiated optimality system (same matrices,
//!    independent algorithm). Also checks the recursion's internal duals.
//! 2. `diff_kkt_residual_*` — both solutions substituted back into the
//!    differentiated system; the worst residual entry must vanish.
//! 3. `fd_through_solver` — the tracking-loss gradient dL/dθ assembled from
//!    the analytic sensitivities against central finite differences that
//!    re-solve the horizon problem at perturbed weights.
//!
//! The report (`gradcheck_report.json`) is machine-readable: per-check
//! pass/fail with the worst error, plus the worst relative FD error for every
//! θ component. Any failed check exits with code 2.

use crate::CliError;
use dmhe_core::config::HarnessConfig;
use dmhe_core::gradient::{
    build_diff_kkt, diff_kkt_residual, direct_kkt_solve, kalman_gradient, DiffKktMatrices,
};
use dmhe_core::learning::{chain_rule_direct, tracking_loss, tracking_loss_gradient, LossWeights};
use dmhe_core::mhe::{solve, HorizonSolution, MheOptions, MheProblem, QuadrotorModel};
use dmhe_core::control::ReferencePoint;
use dmhe_core::scenarios::{
    run_closed_loop, EpisodeError, Tuner, TunerContext, TunerUpdate,
};
use dmhe_core::weights::ThetaParams;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tolerances of the three checks, in report order.
const TOL_EQUIVALENCE: f64 = 1e-7;
const TOL_RESIDUAL: f64 = 1e-7;
const TOL_FD: f64 = 1e-3;
/// Step scale and degenerate-gradient floor of the FD check. The step is
/// deliberately on the large side: the loss is smooth in θ, so truncation
/// stays small, while the inner solves only reach the 1e-10 tolerance and
/// that noise divided by the step must stay below the check tolerance.
const FD_STEP_SCALE: f64 = 4e-4;
const FD_FLOOR: f64 = 1e-9;

/// One horizon problem frozen out of the episode.
struct Fixture {
    step: usize,
    problem: MheProblem<QuadrotorModel>,
    solution: HorizonSolution,
    references: Vec<ReferencePoint>,
    theta: ThetaParams,
}

/// Tuner that freezes full-horizon problems at a fixed stride.
struct CaptureTuner {
    horizon: usize,
    stride: usize,
    wanted: usize,
    next_step: usize,
    fixtures: Vec<Fixture>,
}

impl Tuner for CaptureTuner {
    fn observe(&mut self, ctx: &TunerContext<'_>) -> Result<TunerUpdate, EpisodeError> {
        if self.fixtures.len() < self.wanted
            && ctx.problem.horizon == self.horizon
            && ctx.step >= self.next_step
        {
            self.next_step = ctx.step + self.stride;
            self.fixtures.push(Fixture {
                step: ctx.step,
                problem: ctx.problem.clone(),
                solution: ctx.solution.clone(),
                references: ctx.references.to_vec(),
                theta: ctx.theta.clone(),
            });
        }
        Ok(TunerUpdate::none())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckReport {
    name: String,
    pass: bool,
    /// Worst error across fixtures (absolute for the first two checks,
    /// relative for the FD check).
    worst: f64,
    tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GradcheckReport {
    fixtures: usize,
    horizon: usize,
    theta_dim: usize,
    flip_e_sign: bool,
    checks: Vec<CheckReport>,
    /// Worst relative FD error per θ component, across fixtures.
    per_component_rel_error: Vec<f64>,
    pass: bool,
}

/// Per-fixture raw errors, merged into the report after the parallel phase.
struct FixtureErrors {
    equivalence: f64,
    residual_kalman: f64,
    residual_direct: f64,
    fd_rel: Vec<f64>,
}

pub fn run(
    config: &HarnessConfig,
    scenario: &str,
    out: &Path,
    fixtures: usize,
    flip_e_sign: bool,
    workers: usize,
) -> Result<(), CliError> {
    if fixtures == 0 {
        return Err(CliError::Config("gradcheck needs at least one fixture".into()));
    }
    let captured = capture_fixtures(config, fixtures)?;
    println!(
        "gradcheck: {} fixture(s) at horizon {} from scenario '{scenario}' (steps {:?})",
        captured.len(),
        config.horizon,
        captured.iter().map(|f| f.step).collect::<Vec<_>>()
    );

    let errors = check_fixtures(&captured, config, flip_e_sign, workers)?;
    let theta_dim = config.theta.flatten().len();
    let report = merge_report(&errors, config.horizon, theta_dim, flip_e_sign, captured.len());

    for check in &report.checks {
        println!(
            "  {:24} {}  worst {:.3e}  (tolerance {:.1e})",
            check.name,
            if check.pass { "pass" } else { "FAIL" },
            check.worst,
            check.tolerance
        );
    }
    crate::write_json(&out.join("gradcheck_report.json"), &report)?;
    println!("report: {}", out.join("gradcheck_report.json").display());

    if report.pass {
        Ok(())
    } else {
        Err(CliError::Verification(
            "one or more gradient checks failed; see gradcheck_report.json".into(),
        ))
    }
}

fn capture_fixtures(config: &HarnessConfig, wanted: usize) -> Result<Vec<Fixture>, CliError> {
    let setup = config.setup().map_err(CliError::config)?;
    let steps = config.sim.steps();
    let warmup = config.horizon; // first full-horizon problem appears here
    if steps <= warmup {
        return Err(CliError::Config(format!(
            "episode too short to fill the horizon: {steps} steps at horizon {}",
            config.horizon
        )));
    }
    let stride = ((steps - warmup) / wanted).max(1);
    let mut tuner = CaptureTuner {
        horizon: config.horizon,
        stride,
        wanted,
        next_step: warmup,
        fixtures: Vec::new(),
    };
    let outcome = run_closed_loop(&setup, &config.theta, &config.gains, &mut tuner)
        .map_err(CliError::config)?;
    if let Some(failure) = &outcome.failure {
        return Err(CliError::Divergence(format!(
            "capture episode aborted after {} steps: {failure}",
            outcome.log.len()
        )));
    }
    if tuner.fixtures.is_empty() {
        return Err(CliError::Config("no full-horizon problems were captured".into()));
    }
    Ok(tuner.fixtures)
}

/// Round-robin the fixtures over scoped worker threads; results are indexed,
/// so the merged output does not depend on the worker count.
fn check_fixtures(
    fixtures: &[Fixture],
    config: &HarnessConfig,
    flip_e_sign: bool,
    workers: usize,
) -> Result<Vec<FixtureErrors>, CliError> {
    let loss = config.loss;
    let workers = workers.min(fixtures.len());
    let mut slots: Vec<Option<Result<FixtureErrors, String>>> =
        (0..fixtures.len()).map(|_| None).collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..workers {
            handles.push(scope.spawn(move || {
                let mut results = Vec::new();
                for (index, fixture) in fixtures.iter().enumerate() {
                    if index % workers == worker {
                        results.push((index, check_one(fixture, &loss, flip_e_sign)));
                    }
                }
                results
            }));
        }
        for handle in handles {
            for (index, result) in handle.join().expect("gradcheck worker panicked") {
                slots[index] = Some(result);
            }
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.expect("fixture left unchecked"))
        .map(|r| r.map_err(CliError::Config))
        .collect()
}

fn check_one(
    fixture: &Fixture,
    loss: &LossWeights,
    flip_e_sign: bool,
) -> Result<FixtureErrors, String> {
    let problem = &fixture.problem;
    let matrices = build_diff_kkt(problem, &fixture.solution, &fixture.theta)
        .map_err(|e| format!("step {}: cannot build sensitivity system: {e}", fixture.step))?;

    // The self-test corruption is applied to the recursion's input only; the
    // direct solve and the residual keep the clean matrices, so every check
    // must detect the flip.
    let trajectory = if flip_e_sign {
        let mut corrupted = matrices.clone();
        for e in &mut corrupted.e {
            *e = -&*e;
        }
        kalman_gradient(&corrupted)
    } else {
        kalman_gradient(&matrices)
    }
    .map_err(|e| format!("step {}: sensitivity recursion failed: {e}", fixture.step))?;

    let (x_direct, lambda_direct) = direct_kkt_solve(&matrices)
        .map_err(|e| format!("step {}: direct solve failed: {e}", fixture.step))?;

    let equivalence = max_abs_difference(&trajectory.x_hat, &x_direct)
        .max(max_abs_difference(&trajectory.lambda, &lambda_direct));
    let residual_kalman = diff_kkt_residual(&matrices, &trajectory.x_hat, &trajectory.lambda);
    let residual_direct = diff_kkt_residual(&matrices, &x_direct, &lambda_direct);

    let fd_rel = fd_check(fixture, loss, &matrices, &trajectory)?;

    Ok(FixtureErrors { equivalence, residual_kalman, residual_direct, fd_rel })
}

fn max_abs_difference(a: &[nalgebra::DMatrix<f64>], b: &[nalgebra::DMatrix<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (ma, mb) in a.iter().zip(b.iter()) {
        worst = worst.max((ma - mb).abs().max());
    }
    worst
}

/// dL/dθ from the analytic sensitivities against central differences that
/// re-solve the window at perturbed weights (warm-started, tight tolerance).
fn fd_check(
    fixture: &Fixture,
    loss: &LossWeights,
    _matrices: &DiffKktMatrices,
    trajectory: &dmhe_core::gradient::GradientTrajectory,
) -> Result<Vec<f64>, String> {
    let rows = tracking_loss_gradient(&fixture.solution.states, &fixture.references, loss);
    let analytic = chain_rule_direct(&rows, trajectory)
        .map_err(|e| format!("step {}: chain rule failed: {e}", fixture.step))?;

    let flat = fixture.theta.flatten();
    let options = MheOptions { tolerance: 1e-10, max_iterations: 200, ..MheOptions::default() };
    let n = fixture.problem.horizon;
    let dims = (fixture.theta.p.len(), fixture.theta.r.len(), fixture.theta.q.len());
    let gamma_slots = [dims.0, dims.0 + 1 + dims.1];

    let mut rel_errors = Vec::with_capacity(flat.len());
    for j in 0..flat.len() {
        let mut h = FD_STEP_SCALE * flat[j].abs().max(1.0);
        if gamma_slots.contains(&j) {
            // Keep both probes strictly inside the forgetting-factor bounds.
            let room = (1.0 - flat[j]).min(flat[j] - fixture.theta.gamma_min);
            h = h.min(0.45 * room);
        }
        let loss_at = |value: f64| -> Result<f64, String> {
            let mut perturbed = flat.clone();
            perturbed[j] = value;
            let theta = ThetaParams::from_flat(
                &perturbed,
                dims.0,
                dims.1,
                dims.2,
                fixture.theta.gamma_min,
            )
            .map_err(|e| format!("step {}: bad perturbed θ[{j}]: {e}", fixture.step))?;
            let mut problem = fixture.problem.clone();
            problem.weights = theta
                .expand(n)
                .map_err(|e| format!("step {}: cannot expand θ[{j}]: {e}", fixture.step))?;
            let solution = solve(&problem, Some(&fixture.solution), &options)
                .map_err(|e| format!("step {}: FD re-solve failed at θ[{j}]: {e}", fixture.step))?;
            Ok(tracking_loss(&solution.states, &fixture.references, loss).total)
        };
        let fd = (loss_at(flat[j] + h)? - loss_at(flat[j] - h)?) / (2.0 * h);
        let denominator = fd.abs().max(FD_FLOOR);
        rel_errors.push((analytic[j] - fd).abs() / denominator);
    }
    Ok(rel_errors)
}

fn merge_report(
    errors: &[FixtureErrors],
    horizon: usize,
    theta_dim: usize,
    flip_e_sign: bool,
    fixtures: usize,
) -> GradcheckReport {
    let worst = |f: &dyn Fn(&FixtureErrors) -> f64| {
        errors.iter().map(|e| f(e)).fold(0.0_f64, f64::max)
    };
    let mut per_component = vec![0.0_f64; theta_dim];
    for e in errors {
        for (j, rel) in e.fd_rel.iter().enumerate() {
            per_component[j] = per_component[j].max(*rel);
        }
    }
    let fd_worst = per_component.iter().copied().fold(0.0_f64, f64::max);

    let checks = vec![
        CheckReport {
            name: "kalman_vs_direct".into(),
            pass: worst(&|e| e.equivalence) < TOL_EQUIVALENCE,
            worst: worst(&|e| e.equivalence),
            tolerance: TOL_EQUIVALENCE,
        },
        CheckReport {
            name: "diff_kkt_residual_kalman".into(),
            pass: worst(&|e| e.residual_kalman) < TOL_RESIDUAL,
            worst: worst(&|e| e.residual_kalman),
            tolerance: TOL_RESIDUAL,
        },
        CheckReport {
            name: "diff_kkt_residual_direct".into(),
            pass: worst(&|e| e.residual_direct) < TOL_RESIDUAL,
            worst: worst(&|e| e.residual_direct),
            tolerance: TOL_RESIDUAL,
        },
        CheckReport {
            name: "fd_through_solver".into(),
            pass: fd_worst < TOL_FD,
            worst: fd_worst,
            tolerance: TOL_FD,
        },
    ];
    let pass = checks.iter().all(|c| c.pass);
    GradcheckReport {
        fixtures,
        horizon,
        theta_dim,
        flip_e_sign,
        checks,
        per_component_rel_error: per_component,
        pass,
    }
}
