//! Moving-horizon estimator: solve, per control step, the horizon problem
//!
//!   min  ½‖x₀ − x̄₀‖²_P + ½ Σ_k ‖ȳ_k − H x_k‖²_{R_k} + ½ Σ_k ‖η_k‖²_{Q_k}
//!   s.t. x_{k+1} = f(x_k, u_k, η_k),   k = 0..N−2,
//!
//! over a window of N measurements (stage 0 oldest). The solver is a damped
//! Gauss–Newton method in single-shooting form: the decision variables are
//! the first state and the N−1 process-noise vectors, the dynamics are
//! eliminated by forward rollout, and the constraint duals λ_k are recovered
//! by the backward adjoint recursion
//!
//!   λ_{N−2} = Hᵀ R_{N−1} (ȳ_{N−1} − H x_{N−1}),
//!   λ_{k−1} = A_kᵀ λ_k + Hᵀ R_k (ȳ_k − H x_k),
//!
//! which makes the interior stationarity conditions hold exactly and reduces
//! the KKT residual to the noise-stationarity and boundary rows — precisely
//! the gradient of the reduced problem that Gauss–Newton drives to zero.
//!
//! Everything is generic over [`EstimationModel`] so the scalar random-walk
//! fixture below runs through the identical code path as the quadrotor.

use crate::rigid_body::{
    self, ControlInput, QuadrotorParams, NW as QUAD_NW, NX as QUAD_NX, NY as QUAD_NY,
};
use crate::weights::{StageWeights, ThetaError, ThetaParams};
use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use std::fmt;

/// Discrete-time model seen by the estimator.
///
/// Contract: the measurement is the first `ny` state components, and the step
/// map is affine in the process noise `w` (so its state Jacobian does not
/// depend on `w` and its noise Jacobian is constant). Both properties hold for
/// random-walk disturbance models and are relied on throughout the solver and
/// the gradient engine.
pub trait EstimationModel {
    /// Per-stage exogenous input.
    type Input: Clone;

    fn nx(&self) -> usize;
    fn nw(&self) -> usize;
    fn ny(&self) -> usize;

    /// One discrete step x⁺ = f(x, u, w).
    fn step(&self, x: &DVector<f64>, u: &Self::Input, w: &DVector<f64>) -> DVector<f64>;
    /// A = ∂f/∂x (independent of w by the affinity contract).
    fn jac_x(&self, x: &DVector<f64>, u: &Self::Input) -> DMatrix<f64>;
    /// B = ∂f/∂w, constant.
    fn jac_w(&self) -> DMatrix<f64>;
    /// G = ∂(Aᵀλ)/∂x, the dual-contracted Hessian of f.
    fn curvature(&self, x: &DVector<f64>, u: &Self::Input, lambda: &DVector<f64>) -> DMatrix<f64>;
}

/// The quadrotor extended dynamics as an [`EstimationModel`] (forward-Euler
/// discretization at the control period).
#[derive(Debug, Clone)]
pub struct QuadrotorModel {
    pub params: QuadrotorParams,
    pub dt: f64,
}

impl QuadrotorModel {
    pub fn new(params: QuadrotorParams, dt: f64) -> Self {
        Self { params, dt }
    }
}

impl EstimationModel for QuadrotorModel {
    type Input = ControlInput;

    fn nx(&self) -> usize {
        QUAD_NX
    }
    fn nw(&self) -> usize {
        QUAD_NW
    }
    fn ny(&self) -> usize {
        QUAD_NY
    }

    fn step(&self, x: &DVector<f64>, u: &ControlInput, w: &DVector<f64>) -> DVector<f64> {
        let xs = rigid_body::StateVec::from_column_slice(x.as_slice());
        let ws = rigid_body::NoiseVec::from_column_slice(w.as_slice());
        let next = rigid_body::euler_step(&xs, u, &ws, self.dt, &self.params);
        DVector::from_column_slice(next.as_slice())
    }

    fn jac_x(&self, x: &DVector<f64>, u: &ControlInput) -> DMatrix<f64> {
        let xs = rigid_body::StateVec::from_column_slice(x.as_slice());
        let (a, _, _) = rigid_body::jacobians(&xs, u, self.dt, &self.params);
        DMatrix::from_column_slice(QUAD_NX, QUAD_NX, a.as_slice())
    }

    fn jac_w(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(QUAD_NX, QUAD_NW);
        for i in 0..QUAD_NW {
            b[(rigid_body::DIST_F + i, i)] = self.dt;
        }
        b
    }

    fn curvature(&self, x: &DVector<f64>, u: &ControlInput, lambda: &DVector<f64>) -> DMatrix<f64> {
        let xs = rigid_body::StateVec::from_column_slice(x.as_slice());
        let ls = rigid_body::StateVec::from_column_slice(lambda.as_slice());
        let g = rigid_body::curvature_term(&xs, &ls, u, self.dt, &self.params);
        DMatrix::from_column_slice(QUAD_NX, QUAD_NX, g.as_slice())
    }
}

/// Minimal linear fixture: a scalar random walk x⁺ = x + w with direct state
/// measurement. Exists so the solver and gradient engine can be checked
/// against closed-form filtering results and finite differences.
#[derive(Debug, Clone, Copy)]
pub struct ScalarRandomWalk;

impl EstimationModel for ScalarRandomWalk {
    type Input = ();

    fn nx(&self) -> usize {
        1
    }
    fn nw(&self) -> usize {
        1
    }
    fn ny(&self) -> usize {
        1
    }

    fn step(&self, x: &DVector<f64>, _u: &(), w: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] + w[0])
    }

    fn jac_x(&self, _x: &DVector<f64>, _u: &()) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    fn jac_w(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    fn curvature(&self, _x: &DVector<f64>, _u: &(), _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
}

/// One horizon problem: window data plus expanded stage weights.
#[derive(Debug, Clone)]
pub struct MheProblem<M: EstimationModel> {
    pub model: M,
    /// Number of measurement stages N (≥ 2).
    pub horizon: usize,
    /// Arrival-cost prior for the first state.
    pub prior: DVector<f64>,
    /// Measurements ȳ_0..ȳ_{N−1}, oldest first.
    pub measurements: Vec<DVector<f64>>,
    /// Inputs u_0..u_{N−2} applied between consecutive stages.
    pub controls: Vec<M::Input>,
    pub weights: StageWeights,
}

impl<M: EstimationModel> MheProblem<M> {
    pub fn validate(&self) -> Result<(), MheError> {
        let n = self.horizon;
        let ok = n >= 2
            && self.measurements.len() == n
            && self.controls.len() == n - 1
            && self.weights.r_diag.len() == n
            && self.weights.q_diag.len() == n - 1
            && self.prior.len() == self.model.nx()
            && self.prior.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(MheError::InvalidProblem(format!(
                "horizon {n}: {} measurements, {} controls, {}/{} weight stages",
                self.measurements.len(),
                self.controls.len(),
                self.weights.r_diag.len(),
                self.weights.q_diag.len(),
            )))
        }
    }
}

/// Solution of one horizon problem.
#[derive(Debug, Clone)]
pub struct HorizonSolution {
    /// Smoothed states x̂_{k|N}, k = 0..N−1.
    pub states: Vec<DVector<f64>>,
    /// Process noises η_k, k = 0..N−2.
    pub noises: Vec<DVector<f64>>,
    /// Dynamics-constraint duals λ_k, k = 0..N−2 (the terminal dual is zero
    /// by the absence of a terminal cost and is not stored).
    pub duals: Vec<DVector<f64>>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MheError {
    InvalidProblem(String),
    /// NaN or infinity appeared while evaluating the given stage.
    NonFinite { stage: usize },
    /// The Gauss–Newton normal matrix could not be factorized.
    SingularHessian,
    Theta(ThetaError),
}

impl fmt::Display for MheError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MheError::InvalidProblem(msg) => write!(f, "invalid MHE problem: {msg}"),
            MheError::NonFinite { stage } => {
                write!(f, "non-finite value while evaluating stage {stage}")
            }
            MheError::SingularHessian => write!(f, "Gauss-Newton normal matrix is singular"),
            MheError::Theta(e) => write!(f, "weight expansion failed: {e}"),
        }
    }
}

impl std::error::Error for MheError {}

impl From<ThetaError> for MheError {
    fn from(e: ThetaError) -> Self {
        MheError::Theta(e)
    }
}

/// Solver knobs. Defaults: KKT tolerance 1e-8, 50 iterations, Armijo c = 1e-4.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub armijo_c: f64,
}

impl Default for MheOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 50, armijo_c: 1e-4 }
    }
}

/// Scratch holding the decision variables (first state + noise sequence) and
/// the rolled-out trajectory.
struct Shooting {
    x1: DVector<f64>,
    noises: Vec<DVector<f64>>,
    states: Vec<DVector<f64>>,
}

impl Shooting {
    fn rollout<M: EstimationModel>(&mut self, problem: &MheProblem<M>) {
        self.states.clear();
        self.states.push(self.x1.clone());
        for k in 0..problem.horizon - 1 {
            let next = problem.model.step(&self.states[k], &problem.controls[k], &self.noises[k]);
            self.states.push(next);
        }
    }
}

fn stage_cost<M: EstimationModel>(problem: &MheProblem<M>, sh: &Shooting) -> f64 {
    let ny = problem.model.ny();
    let mut cost = 0.0;
    let prior_err = &sh.states[0] - &problem.prior;
    for i in 0..prior_err.len() {
        cost += 0.5 * problem.weights.p_diag[i] * prior_err[i] * prior_err[i];
    }
    for k in 0..problem.horizon {
        let r = &problem.weights.r_diag[k];
        for i in 0..ny {
            let e = problem.measurements[k][i] - sh.states[k][i];
            cost += 0.5 * r[i] * e * e;
        }
    }
    for k in 0..problem.horizon - 1 {
        let q = &problem.weights.q_diag[k];
        for i in 0..q.len() {
            cost += 0.5 * q[i] * sh.noises[k][i] * sh.noises[k][i];
        }
    }
    cost
}

/// Hᵀ R_k (ȳ_k − H x_k) embedded in state space: the measurement pull at
/// stage k.
fn measurement_pull<M: EstimationModel>(
    problem: &MheProblem<M>,
    states: &[DVector<f64>],
    k: usize,
) -> DVector<f64> {
    let nx = problem.model.nx();
    let ny = problem.model.ny();
    let mut m = DVector::zeros(nx);
    let r = &problem.weights.r_diag[k];
    for i in 0..ny {
        m[i] = r[i] * (problem.measurements[k][i] - states[k][i]);
    }
    m
}

/// Backward adjoint recursion: duals λ_0..λ_{N−2} given the stage Jacobians.
fn recover_duals<M: EstimationModel>(
    problem: &MheProblem<M>,
    states: &[DVector<f64>],
    jac: &[DMatrix<f64>],
) -> Vec<DVector<f64>> {
    let n = problem.horizon;
    let mut duals = vec![DVector::zeros(problem.model.nx()); n - 1];
    duals[n - 2] = measurement_pull(problem, states, n - 1);
    for k in (1..n - 1).rev() {
        duals[k - 1] = jac[k].tr_mul(&duals[k]) + measurement_pull(problem, states, k);
    }
    duals
}

/// Gradient of the reduced (single-shooting) cost with respect to
/// (x₀, η_0..η_{N−2}): equals the non-trivially-zero KKT rows.
fn reduced_gradient<M: EstimationModel>(
    problem: &MheProblem<M>,
    sh: &Shooting,
    jac: &[DMatrix<f64>],
    duals: &[DVector<f64>],
    b: &DMatrix<f64>,
) -> DVector<f64> {
    let nx = problem.model.nx();
    let nw = problem.model.nw();
    let n = problem.horizon;
    let mut g = DVector::zeros(nx + (n - 1) * nw);

    let prior_err = &sh.states[0] - &problem.prior;
    let mut gx = DVector::zeros(nx);
    for i in 0..nx {
        gx[i] = problem.weights.p_diag[i] * prior_err[i];
    }
    gx -= measurement_pull(problem, &sh.states, 0);
    gx -= jac[0].tr_mul(&duals[0]);
    g.rows_mut(0, nx).copy_from(&gx);

    for k in 0..n - 1 {
        let q = &problem.weights.q_diag[k];
        let bt_lambda = b.tr_mul(&duals[k]);
        for i in 0..nw {
            g[nx + k * nw + i] = q[i] * sh.noises[k][i] - bt_lambda[i];
        }
    }
    g
}

/// Solve the horizon problem, optionally warm-starting from a previous
/// solution (its first state and noise sequence are reused; the noise
/// sequence is truncated or zero-padded to the current horizon).
pub fn solve<M: EstimationModel>(
    problem: &MheProblem<M>,
    warm_start: Option<&HorizonSolution>,
    options: &MheOptions,
) -> Result<HorizonSolution, MheError> {
    problem.validate()?;
    let nx = problem.model.nx();
    let nw = problem.model.nw();
    let ny = problem.model.ny();
    let n = problem.horizon;
    let nz = nx + (n - 1) * nw;

    let mut sh = Shooting {
        x1: warm_start
            .map(|w| w.states[0].clone())
            .unwrap_or_else(|| problem.prior.clone()),
        noises: (0..n - 1)
            .map(|k| {
                warm_start
                    .and_then(|w| w.noises.get(k).cloned())
                    .unwrap_or_else(|| DVector::zeros(nw))
            })
            .collect(),
        states: Vec::with_capacity(n),
    };
    sh.rollout(problem);
    check_finite(&sh, 0)?;

    let b = problem.model.jac_w();
    let mut cost = stage_cost(problem, &sh);
    let mut jac: Vec<DMatrix<f64>> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    // Sensitivity of each rolled-out state w.r.t. the decision vector; stage k
    // only depends on the first nx + k·nw entries, which keeps the normal-
    // equation accumulation banded.
    let mut sens = DMatrix::<f64>::zeros(nx, nz);
    let mut jtj = DMatrix::<f64>::zeros(nz, nz);
    let mut scaled_rows = DMatrix::<f64>::zeros(ny, nz);

    let mut final_grad_norm;
    loop {
        jac.clear();
        for k in 0..n - 1 {
            jac.push(problem.model.jac_x(&sh.states[k], &problem.controls[k]));
        }
        let duals = recover_duals(problem, &sh.states, &jac);
        let grad = reduced_gradient(problem, &sh, &jac, &duals, &b);
        final_grad_norm = grad.amax();
        if !final_grad_norm.is_finite() {
            return Err(MheError::NonFinite { stage: 0 });
        }
        if final_grad_norm < options.tolerance {
            converged = true;
            break;
        }
        if iterations >= options.max_iterations {
            break;
        }

        // Assemble J^T J for the least-squares residual stack.
        jtj.fill(0.0);
        for i in 0..nx {
            jtj[(i, i)] = problem.weights.p_diag[i];
        }
        for k in 0..n - 1 {
            let q = &problem.weights.q_diag[k];
            for i in 0..nw {
                let at = nx + k * nw + i;
                jtj[(at, at)] += q[i];
            }
        }
        sens.fill(0.0);
        for i in 0..nx {
            sens[(i, i)] = 1.0;
        }
        for k in 0..n {
            let width = (nx + k * nw).min(nz);
            {
                let r = &problem.weights.r_diag[k];
                let src = sens.view((0, 0), (ny, width));
                let mut dst = scaled_rows.view_mut((0, 0), (ny, width));
                dst.copy_from(&src);
                for i in 0..ny {
                    let s = r[i].sqrt();
                    for c in 0..width {
                        dst[(i, c)] *= s;
                    }
                }
            }
            {
                let rows = scaled_rows.view((0, 0), (ny, width));
                let mut block = jtj.view_mut((0, 0), (width, width));
                block.gemm_tr(1.0, &rows, &rows, 1.0);
            }
            if k < n - 1 {
                // Propagate sensitivities: S ← A_k S (active columns), then the
                // η_k block picks up B.
                let width_next = (nx + (k + 1) * nw).min(nz);
                let prod = &jac[k] * sens.view((0, 0), (nx, width));
                sens.view_mut((0, 0), (nx, width)).copy_from(&prod);
                sens.view_mut((0, nx + k * nw), (nx, nw)).copy_from(&b);
                let _ = width_next;
            }
        }

        let delta = nalgebra::Cholesky::new(jtj.clone())
            .map(|ch| ch.solve(&(-&grad)))
            .or_else(|| jtj.clone().lu().solve(&(-&grad)))
            .ok_or(MheError::SingularHessian)?;

        // Armijo backtracking on the true cost.
        let directional = grad.dot(&delta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = Shooting {
                x1: &sh.x1 + alpha * delta.rows(0, nx),
                noises: (0..n - 1)
                    .map(|k| &sh.noises[k] + alpha * delta.rows(nx + k * nw, nw))
                    .collect(),
                states: Vec::with_capacity(n),
            };
            trial.rollout(problem);
            if let Err(e) = check_finite(&trial, 0) {
                let _ = e;
                alpha *= 0.5;
                continue;
            }
            let trial_cost = stage_cost(problem, &trial);
            // The absolute slack admits steps whose true decrease is below
            // the floating-point resolution of the cost; without it the
            // search stalls prematurely near tight optima.
            let slack = 4.0 * f64::EPSILON * (1.0 + cost.abs());
            if trial_cost <= cost + options.armijo_c * alpha * directional + slack {
                sh = trial;
                cost = trial_cost;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // Line search stalled: report the best iterate, flagged.
            break;
        }
    }

    jac.clear();
    for k in 0..n - 1 {
        jac.push(problem.model.jac_x(&sh.states[k], &problem.controls[k]));
    }
    let duals = recover_duals(problem, &sh.states, &jac);
    let grad = reduced_gradient(problem, &sh, &jac, &duals, &b);

    Ok(HorizonSolution {
        states: sh.states,
        noises: sh.noises,
        duals,
        cost,
        kkt_residual: grad.amax(),
        iterations,
        converged,
    })
}

fn check_finite(sh: &Shooting, _at: usize) -> Result<(), MheError> {
    for (k, s) in sh.states.iter().enumerate() {
        if !s.iter().all(|v| v.is_finite()) {
            return Err(MheError::NonFinite { stage: k });
        }
    }
    Ok(())
}

/// Full stationarity residual of a (problem, solution) pair: the max-norm
/// over the interior state rows, the noise rows, the dynamics defects, and
/// the boundary row (scaled through by P so no inverse is needed). Zero for
/// an exact KKT point.
pub fn kkt_residual<M: EstimationModel>(
    problem: &MheProblem<M>,
    solution: &HorizonSolution,
) -> f64 {
    let n = problem.horizon;
    let nx = problem.model.nx();
    let states = &solution.states;
    let b = problem.model.jac_w();
    let mut worst: f64 = 0.0;

    let jac: Vec<DMatrix<f64>> = (0..n - 1)
        .map(|k| problem.model.jac_x(&states[k], &problem.controls[k]))
        .collect();

    // Dynamics defects.
    for k in 0..n - 1 {
        let defect =
            &states[k + 1] - problem.model.step(&states[k], &problem.controls[k], &solution.noises[k]);
        worst = worst.max(defect.amax());
    }
    // Interior stationarity: −HᵀR_k(ȳ_k − Hx_k) + λ_{k−1} − A_kᵀλ_k = 0.
    for k in 1..n {
        let mut row = -measurement_pull(problem, states, k);
        row += &solution.duals[k - 1];
        if k < n - 1 {
            row -= jac[k].tr_mul(&solution.duals[k]);
        }
        worst = worst.max(row.amax());
    }
    // Noise stationarity: Q_kη_k − Bᵀλ_k = 0.
    for k in 0..n - 1 {
        let q = &problem.weights.q_diag[k];
        let bt_lambda = b.tr_mul(&solution.duals[k]);
        for i in 0..q.len() {
            worst = worst.max((q[i] * solution.noises[k][i] - bt_lambda[i]).abs());
        }
    }
    // Boundary: P(x₀ − x̄₀) − HᵀR_0(ȳ_0 − Hx_0) − A_0ᵀλ_0 = 0.
    let prior_err = &states[0] - &problem.prior;
    let mut row = DVector::zeros(nx);
    for i in 0..nx {
        row[i] = problem.weights.p_diag[i] * prior_err[i];
    }
    row -= measurement_pull(problem, states, 0);
    row -= jac[0].tr_mul(&solution.duals[0]);
    worst = worst.max(row.amax());

    worst
}

/// Sliding measurement/control buffer maintaining the arrival-cost prior and
/// warm starts across solves.
///
/// Startup: the prior stays anchored at the initial state guess while the
/// window grows from 2 to `capacity` stages; once the window slides, the prior
/// for the new first stage is the previous solve's estimate of that same
/// physical time — its second state.
#[derive(Debug, Clone)]
pub struct SlidingWindow<M: EstimationModel> {
    model: M,
    capacity: usize,
    measurements: VecDeque<DVector<f64>>,
    controls: VecDeque<M::Input>,
    prior: DVector<f64>,
    previous: Option<HorizonSolution>,
}

impl<M: EstimationModel + Clone> SlidingWindow<M> {
    pub fn new(model: M, capacity: usize, initial_prior: DVector<f64>) -> Self {
        assert!(capacity >= 2, "window capacity must be at least 2");
        assert_eq!(initial_prior.len(), model.nx());
        Self {
            model,
            capacity,
            measurements: VecDeque::new(),
            controls: VecDeque::new(),
            prior: initial_prior,
            previous: None,
        }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn prior(&self) -> &DVector<f64> {
        &self.prior
    }

    /// Append the newest measurement, sliding the window (and advancing the
    /// prior to the previous solve's second state) once full.
    pub fn push_measurement(&mut self, y: DVector<f64>) {
        if self.measurements.len() == self.capacity {
            self.measurements.pop_front();
            self.controls.pop_front();
            if let Some(prev) = &self.previous {
                self.prior = prev.states[1].clone();
            }
        }
        self.measurements.push_back(y);
    }

    /// Append the control applied after the newest measurement.
    pub fn push_control(&mut self, u: M::Input) {
        self.controls.push_back(u);
    }

    /// Record the solution of the current window (enables warm starting and
    /// the prior update on the next slide).
    pub fn record_solution(&mut self, solution: HorizonSolution) {
        self.previous = Some(solution);
    }

    /// Build the horizon problem for the current window contents, or `None`
    /// until at least two measurements are buffered.
    pub fn problem(&self, theta: &ThetaParams) -> Result<Option<MheProblem<M>>, ThetaError> {
        let n = self.measurements.len();
        if n < 2 {
            return Ok(None);
        }
        let weights = theta.expand(n)?;
        Ok(Some(MheProblem {
            model: self.model.clone(),
            horizon: n,
            prior: self.prior.clone(),
            measurements: self.measurements.iter().cloned().collect(),
            controls: self.controls.iter().cloned().collect(),
            weights,
        }))
    }

    /// Warm start for the current window, shifted from the previous solution:
    /// on a slide the old second state becomes the new first, the noise
    /// sequence drops its oldest entry; while growing, the previous solution
    /// is reused as-is and `solve` zero-pads the missing newest noise.
    pub fn warm_start(&self) -> Option<HorizonSolution> {
        let prev = self.previous.as_ref()?;
        let n = self.measurements.len();
        if prev.states.len() + 1 == n || prev.states.len() == self.capacity {
            // Window grew by one stage, or both windows are at capacity
            // (slide). For the slide, shift everything left by one.
            if prev.states.len() == self.capacity && n == self.capacity {
                let mut shifted = prev.clone();
                shifted.states.remove(0);
                shifted.noises.remove(0);
                if !shifted.duals.is_empty() {
                    shifted.duals.remove(0);
                }
                return Some(shifted);
            }
            return Some(prev.clone());
        }
        Some(prev.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_body::{rest_state, ControlInput, Wrench, DIST_F, NX, NY};
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn quad_theta() -> ThetaParams {
        ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.4, 0.8)
    }

    /// Build a consistent (noise-free) quadrotor window by rolling the
    /// estimator's own model forward from a hovering state with the given
    /// constant disturbance force.
    fn consistent_problem(
        n: usize,
        d_f: Vector3<f64>,
        prior_d: Vector3<f64>,
    ) -> MheProblem<QuadrotorModel> {
        let params = QuadrotorParams::default();
        let model = QuadrotorModel::new(params.clone(), 0.01);
        let u = ControlInput::from_wrench(&params, &Wrench::hover(&params), f64::INFINITY);

        let mut x = rest_state(&Vector3::new(0.0, 0.0, -1.5));
        for i in 0..3 {
            x[DIST_F + i] = d_f[i];
        }
        let x0 = DVector::from_column_slice(x.as_slice());

        let mut states = vec![x0.clone()];
        for _ in 0..n - 1 {
            let next = model.step(states.last().unwrap(), &u, &DVector::zeros(6));
            states.push(next);
        }
        let measurements = states.iter().map(|s| s.rows(0, NY).into_owned()).collect();

        let mut prior = x0;
        for i in 0..3 {
            prior[DIST_F + i] = prior_d[i];
        }

        MheProblem {
            model,
            horizon: n,
            prior,
            measurements,
            controls: vec![u; n - 1],
            weights: quad_theta().expand(n).unwrap(),
        }
    }

    #[test]
    fn noiseless_consistent_data_is_interpolated_exactly() {
        let problem = consistent_problem(8, Vector3::zeros(), Vector3::zeros());
        let truth: Vec<DVector<f64>> = {
            // Rebuild the same rollout for comparison.
            let mut states = vec![problem.prior.clone()];
            for k in 0..problem.horizon - 1 {
                states.push(problem.model.step(&states[k], &problem.controls[k], &DVector::zeros(6)));
            }
            states
        };
        let sol = solve(&problem, None, &MheOptions::default()).unwrap();
        assert!(sol.converged, "kkt residual {}", sol.kkt_residual);
        assert!(sol.cost < 1e-8);
        assert!(sol.kkt_residual < 1e-8);
        for k in 0..problem.horizon {
            assert!((&sol.states[k] - &truth[k]).amax() < 1e-8);
        }
        for eta in &sol.noises {
            assert!(eta.amax() < 1e-8);
        }
        for lambda in &sol.duals {
            assert!(lambda.amax() < 1e-8);
        }
        assert!(kkt_residual(&problem, &sol) < 1e-8);
    }

    #[test]
    fn kkt_residual_detects_perturbations() {
        let problem = consistent_problem(6, Vector3::zeros(), Vector3::zeros());
        let sol = solve(&problem, None, &MheOptions::default()).unwrap();
        let base = kkt_residual(&problem, &sol);
        assert!(base < 1e-8);
        let mut perturbed = sol.clone();
        perturbed.states[3][2] += 1e-3;
        assert!(kkt_residual(&problem, &perturbed) >= 1e-6);
    }

    #[test]
    fn dual_noise_consistency_holds_at_solutions() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut problem = consistent_problem(10, Vector3::new(1.0, -0.5, 2.0), Vector3::zeros());
        // Add measurement noise so the solution is non-trivial.
        for y in problem.measurements.iter_mut() {
            for i in 0..NY {
                y[i] += 1e-3 * rng.gen_range(-1.0..1.0);
            }
        }
        let sol = solve(&problem, None, &MheOptions::default()).unwrap();
        assert!(sol.converged);
        let b = problem.model.jac_w();
        for k in 0..problem.horizon - 1 {
            let q = &problem.weights.q_diag[k];
            let bt = b.tr_mul(&sol.duals[k]);
            for i in 0..q.len() {
                assert!((q[i] * sol.noises[k][i] - bt[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_force_is_recovered_through_sliding_windows() {
        // Prior believes zero disturbance; the data says 5.87 N down. With
        // well-tuned forgetting factors (slow measurement discount, cheap
        // process noise deep in the window) the estimate must settle within
        // 5% in under half a second of data. Heavily discounted measurements
        // (small γ₁) make the same disturbance nearly unobservable — that
        // contrast is what the weight tuning exploits.
        let params = QuadrotorParams::default();
        let model = QuadrotorModel::new(params.clone(), 0.01);
        let u = ControlInput::from_wrench(&params, &Wrench::hover(&params), f64::INFINITY);
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.96, 0.2);

        let mut x_true = DVector::from_column_slice(
            rest_state(&Vector3::new(0.0, 0.0, -1.5)).as_slice(),
        );
        x_true[DIST_F + 2] = 5.87;
        let mut prior = x_true.clone();
        prior[DIST_F + 2] = 0.0;

        let mut window = SlidingWindow::new(model.clone(), 25, prior);
        let mut settle_step = None;
        let mut d_hat = 0.0;
        for step in 0..80 {
            window.push_measurement(x_true.rows(0, NY).into_owned());
            if let Some(problem) = window.problem(&theta).unwrap() {
                let warm = window.warm_start();
                let sol = solve(&problem, warm.as_ref(), &MheOptions::default()).unwrap();
                assert!(sol.converged, "step {step}");
                d_hat = sol.states.last().unwrap()[DIST_F + 2];
                if settle_step.is_none() && (d_hat - 5.87).abs() / 5.87 < 0.05 {
                    settle_step = Some(step);
                }
                window.record_solution(sol);
            }
            window.push_control(u);
            x_true = model.step(&x_true, &u, &DVector::zeros(6));
        }
        assert!(
            (d_hat - 5.87).abs() / 5.87 < 0.05,
            "final estimate {d_hat:.3} N vs 5.87 N"
        );
        let settle = settle_step.expect("estimate never reached 5%");
        assert!(settle <= 50, "took {settle} steps (> 0.5 s) to reach 5%");
    }

    #[test]
    fn scalar_window_matches_closed_form_kalman_filter() {
        let mut rng = StdRng::seed_from_u64(4);
        for trial in 0..20 {
            let n = rng.gen_range(2..9);
            let theta = ThetaParams {
                p: DVector::from_element(1, rng.gen_range(0.5..20.0)),
                gamma1: rng.gen_range(0.3..0.99),
                r: DVector::from_element(1, rng.gen_range(1.0..100.0)),
                gamma2: rng.gen_range(0.3..0.99),
                q: DVector::from_element(1, rng.gen_range(1.0..100.0)),
                gamma_min: 0.2,
            };
            let weights = theta.expand(n).unwrap();
            let prior = rng.gen_range(-2.0..2.0);
            let measurements: Vec<DVector<f64>> =
                (0..n).map(|_| DVector::from_element(1, rng.gen_range(-3.0..3.0))).collect();
            let problem = MheProblem {
                model: ScalarRandomWalk,
                horizon: n,
                prior: DVector::from_element(1, prior),
                measurements: measurements.clone(),
                controls: vec![(); n - 1],
                weights: weights.clone(),
            };
            let sol = solve(&problem, None, &MheOptions::default()).unwrap();
            assert!(sol.converged);

            // Classical filter with the weights read as inverse variances.
            let mut x = prior;
            let mut var = 1.0 / theta.p[0];
            for k in 0..n {
                let r_var = 1.0 / weights.r_diag[k][0];
                let gain = var / (var + r_var);
                x += gain * (measurements[k][0] - x);
                var *= 1.0 - gain;
                if k < n - 1 {
                    var += 1.0 / weights.q_diag[k][0];
                }
            }
            let mhe = sol.states[n - 1][0];
            assert!(
                (mhe - x).abs() < 1e-8,
                "trial {trial}: mhe {mhe} vs filter {x}"
            );
        }
    }

    #[test]
    fn window_grows_then_slides_with_prior_from_second_state() {
        let params = QuadrotorParams::default();
        let model = QuadrotorModel::new(params.clone(), 0.01);
        let u = ControlInput::hover(&params);
        let theta = quad_theta();
        let capacity = 5;

        let x0 = rest_state(&Vector3::new(0.0, 0.0, -1.5));
        let prior = DVector::from_column_slice(x0.as_slice());
        let mut window = SlidingWindow::new(model.clone(), capacity, prior.clone());

        let mut x_true = prior.clone();
        let mut last_solution: Option<HorizonSolution> = None;
        for step in 0..12 {
            let y = x_true.rows(0, NY).into_owned();
            window.push_measurement(y);
            let expected_len = (step + 1).min(capacity);
            assert_eq!(window.len(), expected_len);

            if let Some(problem) = window.problem(&theta).unwrap() {
                let warm = window.warm_start();
                let sol = solve(&problem, warm.as_ref(), &MheOptions::default()).unwrap();
                assert!(sol.converged);
                if window.len() == capacity {
                    if let Some(prev) = &last_solution {
                        if prev.states.len() == capacity {
                            // Prior must equal the previous solve's second state.
                            assert!((window.prior() - &prev.states[1]).amax() < 1e-15);
                        }
                    }
                }
                last_solution = Some(sol.clone());
                window.record_solution(sol);
            }
            window.push_control(u);
            x_true = model.step(&x_true, &u, &DVector::zeros(6));
        }
        assert_eq!(window.len(), capacity);
    }

    #[test]
    fn warm_start_keeps_iteration_counts_low() {
        // Noise-free dynamic scenario: thrust slightly above hover so states
        // evolve, fresh measurements each step.
        let params = QuadrotorParams::default();
        let model = QuadrotorModel::new(params.clone(), 0.01);
        let wrench = Wrench { thrust: 1.02 * params.hover_thrust(), torque: Vector3::zeros() };
        let u = ControlInput::from_wrench(&params, &wrench, f64::INFINITY);
        let theta = quad_theta();
        let mut rng = StdRng::seed_from_u64(77);

        let x0 = rest_state(&Vector3::new(0.0, 0.0, -1.5));
        let mut x_true = DVector::from_column_slice(x0.as_slice());
        let mut window = SlidingWindow::new(model.clone(), 10, x_true.clone());

        let mut max_warm_iters = 0;
        for step in 0..40 {
            let mut y = x_true.rows(0, NY).into_owned();
            for i in 0..NY {
                y[i] += 1e-3 * rng.gen_range(-1.0..1.0);
            }
            window.push_measurement(y);
            if let Some(problem) = window.problem(&theta).unwrap() {
                let warm = window.warm_start();
                let sol = solve(&problem, warm.as_ref(), &MheOptions::default()).unwrap();
                assert!(sol.converged, "step {step} kkt {}", sol.kkt_residual);
                if step > 10 {
                    max_warm_iters = max_warm_iters.max(sol.iterations);
                }
                window.record_solution(sol);
            }
            window.push_control(u);
            x_true = model.step(&x_true, &u, &DVector::zeros(6));
        }
        assert!(
            max_warm_iters <= 10,
            "warm-started solves took {max_warm_iters} iterations"
        );
    }

    #[test]
    fn solver_cost_decreases_monotonically() {
        // Recreate the solve loop manually and track accepted costs.
        let mut problem = consistent_problem(12, Vector3::new(0.5, 0.2, -1.0), Vector3::zeros());
        let mut rng = StdRng::seed_from_u64(15);
        for y in problem.measurements.iter_mut() {
            for i in 0..NY {
                y[i] += 5e-3 * rng.gen_range(-1.0..1.0);
            }
        }
        // Solve from cold start with a cap of 1, 2, 3, ... iterations and
        // check the cost sequence is non-increasing.
        let mut last_cost = f64::INFINITY;
        for cap in 1..8 {
            let opts = MheOptions { max_iterations: cap, ..Default::default() };
            let sol = solve(&problem, None, &opts).unwrap();
            assert!(sol.cost <= last_cost + 1e-12, "cost rose at cap {cap}");
            last_cost = sol.cost;
        }
    }

    #[test]
    fn invalid_problem_is_rejected() {
        let mut problem = consistent_problem(5, Vector3::zeros(), Vector3::zeros());
        problem.controls.pop();
        assert!(matches!(
            solve(&problem, None, &MheOptions::default()),
            Err(MheError::InvalidProblem(_))
        ));
        let _ = format!("{}", MheError::NonFinite { stage: 3 });
    }

    #[test]
    fn quadrotor_model_dimensions() {
        let model = QuadrotorModel::new(QuadrotorParams::default(), 0.01);
        assert_eq!((model.nx(), model.ny(), model.nw()), (NX, NY, 6));
        let b = model.jac_w();
        assert_eq!(b.nrows(), NX);
        assert_eq!(b[(DIST_F, 0)], 0.01);
    }
}
