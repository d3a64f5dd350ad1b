//! Bilevel tuning: the tracking loss over a horizon, the chain rules joining
//! it to the estimate sensitivities, per-step projected gradient descent on
//! the weights, and the small neural parameterization of weights and gains
//! with manual backpropagation.

use crate::control::{
    control_jacobians, gain_jacobians, ControlError, ControlGains, ControllerKind, ReferencePoint,
};
use crate::gradient::GradientTrajectory;
use crate::rigid_body::{rotation_of, QuadrotorParams, StateVec, NX, OMEGA, VEL};
use crate::scenarios::{
    run_closed_loop, EpisodeError, EpisodeOutcome, EpisodeSetup, ScenarioError, Tuner,
    TunerContext, TunerUpdate,
};
use crate::weights::{
    BoundedRatioMap, LearningRates, ProjectionReport, ThetaMask, ThetaParams,
};
use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Read as _;
use std::path::Path;

/// Diagonal tracking-error weighting and softmax temperature of the loss.
/// Position errors dominate; attitude and rates are not penalized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub position: f64,
    pub velocity: f64,
    /// Softmax temperature over stage indices; 0 gives uniform weights.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { position: 1.0, velocity: 0.1, beta: 0.0 }
    }
}

/// The horizon tracking loss L = Σ γ_k l_k with softmax stage weights.
#[derive(Debug, Clone)]
pub struct TrackingLoss {
    pub total: f64,
    pub stage_losses: Vec<f64>,
    /// Softmax weights; strictly positive and summing to one.
    pub stage_weights: Vec<f64>,
}

/// γ_k = softmax(β·k) over k = 0..n−1, computed stably.
pub fn softmax_stage_weights(n: usize, beta: f64) -> Vec<f64> {
    assert!(n >= 1, "softmax needs at least one stage");
    let peak = beta * (n - 1) as f64;
    let shift = if beta >= 0.0 { peak } else { 0.0 };
    let mut w: Vec<f64> = (0..n).map(|k| (beta * k as f64 - shift).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn stage_error_terms(
    state: &DVector<f64>,
    reference: &ReferencePoint,
    w: &LossWeights,
) -> (f64, [f64; 6]) {
    assert!(state.len() >= 6, "loss states need position and velocity components");
    let mut l = 0.0;
    let mut errs = [0.0; 6];
    for i in 0..3 {
        let ep = state[i] - reference.position[i];
        let ev = state[3 + i] - reference.velocity[i];
        l += w.position * ep * ep + w.velocity * ev * ev;
        errs[i] = ep;
        errs[3 + i] = ev;
    }
    (l, errs)
}

/// Weighted tracking loss of a stage sequence against its references.
/// States may be full extended states or any vector whose first six
/// components are position and velocity.
pub fn tracking_loss(
    states: &[DVector<f64>],
    references: &[ReferencePoint],
    w: &LossWeights,
) -> TrackingLoss {
    assert!(!states.is_empty(), "tracking loss needs at least one stage");
    assert_eq!(states.len(), references.len(), "states/references length mismatch");
    let gamma = softmax_stage_weights(states.len(), w.beta);
    let mut stage_losses = Vec::with_capacity(states.len());
    let mut total = 0.0;
    for (k, (x, r)) in states.iter().zip(references).enumerate() {
        let (l, _) = stage_error_terms(x, r, w);
        total += gamma[k] * l;
        stage_losses.push(l);
    }
    TrackingLoss { total, stage_losses, stage_weights: gamma }
}

/// Exact per-stage gradient rows ∂L/∂x_k of [`tracking_loss`]: nonzero only
/// on the position and velocity components (the stage weights do not depend
/// on the states).
pub fn tracking_loss_gradient(
    states: &[DVector<f64>],
    references: &[ReferencePoint],
    w: &LossWeights,
) -> Vec<DVector<f64>> {
    assert!(!states.is_empty(), "tracking loss needs at least one stage");
    assert_eq!(states.len(), references.len(), "states/references length mismatch");
    let gamma = softmax_stage_weights(states.len(), w.beta);
    states
        .iter()
        .zip(references)
        .enumerate()
        .map(|(k, (x, r))| {
            let (_, errs) = stage_error_terms(x, r, w);
            let mut row = DVector::zeros(x.len());
            for i in 0..3 {
                row[i] = 2.0 * gamma[k] * w.position * errs[i];
                row[3 + i] = 2.0 * gamma[k] * w.velocity * errs[3 + i];
            }
            row
        })
        .collect()
}

/// Error type of the chain-rule operations.
#[derive(Debug, Clone, PartialEq)]
pub enum LearningError {
    Dimension { what: &'static str },
    /// The gradient trajectory does not cover every required stage.
    MissingSensitivity { stage: usize },
    Control(ControlError),
}

impl fmt::Display for LearningError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { what } => write!(f, "dimension mismatch: {what}"),
            Self::MissingSensitivity { stage } => {
                write!(f, "no recorded sensitivity for stage {stage}")
            }
            Self::Control(e) => write!(f, "control jacobian failed: {e}"),
        }
    }
}

impl std::error::Error for LearningError {}

impl From<ControlError> for LearningError {
    fn from(e: ControlError) -> Self {
        Self::Control(e)
    }
}

/// Direct chain rule: dL/dθ = Σ_k (∂L/∂x̂_{k|N}) X̂_{k|N}, returned as a
/// |θ|-vector.
pub fn chain_rule_direct(
    loss_rows: &[DVector<f64>],
    trajectory: &GradientTrajectory,
) -> Result<DVector<f64>, LearningError> {
    if loss_rows.len() != trajectory.x_hat.len() {
        return Err(LearningError::Dimension { what: "loss rows vs sensitivity stages" });
    }
    let ntheta = trajectory
        .x_hat
        .first()
        .map(|m| m.ncols())
        .ok_or(LearningError::Dimension { what: "empty gradient trajectory" })?;
    let mut out = DVector::zeros(ntheta);
    for (row, x_hat) in loss_rows.iter().zip(&trajectory.x_hat) {
        if x_hat.nrows() != row.len() {
            return Err(LearningError::Dimension { what: "loss row vs sensitivity rows" });
        }
        out += x_hat.transpose() * row;
    }
    Ok(out)
}

/// ∂x⁺/∂u of the Euler-discretized rigid body with respect to the four motor
/// commands: velocity rows respond to thrust through −Δt·Rẑ/m, body-rate rows
/// to torque through Δt·J⁻¹, composed with the mixer.
pub fn dynamics_input_jacobian(
    x: &StateVec,
    dt: f64,
    params: &QuadrotorParams,
) -> SMatrix<f64, NX, 4> {
    let mixer = params.mixer();
    let r = rotation_of(x);
    let body_z = r * Vector3::new(0.0, 0.0, 1.0);
    let j_inv = params.inertia_inverse();
    let mut out = SMatrix::<f64, NX, 4>::zeros();
    for j in 0..4 {
        for i in 0..3 {
            out[(VEL + i, j)] = -dt * body_z[i] / params.mass * mixer[(0, j)];
            let mut acc = 0.0;
            for l in 0..3 {
                acc += j_inv[(i, l)] * mixer[(1 + l, j)];
            }
            out[(OMEGA + i, j)] = dt * acc;
        }
    }
    out
}

fn state_from_partial(v: &DVector<f64>) -> StateVec {
    let mut x = StateVec::zeros();
    let n = v.len().min(NX);
    for i in 0..n {
        x[i] = v[i];
    }
    x
}

/// Closed-loop chain rule over one estimation window:
///
///   dL/dθ = Σ_k (∂L/∂x^q_{k+1}) (∂f̄_k/∂u_k) (∂u_k/∂x̂_{k|N}) X̂_{k|N},
///
/// where the x^q are the recorded feedback states of the window (their first
/// 18 components suffice), f̄ the discrete rigid-body dynamics, and the sum
/// runs over k = 0..n−3 — the feedback path of the newest transition is
/// excluded. L here weighs the feedback states, not the estimates; θ enters
/// only through the controls, which is exactly the path this rule follows.
#[allow(clippy::too_many_arguments)]
pub fn chain_rule_closed_loop(
    feedback: &[DVector<f64>],
    references: &[ReferencePoint],
    estimates: &[DVector<f64>],
    trajectory: &GradientTrajectory,
    controller: ControllerKind,
    gains: &ControlGains,
    params: &QuadrotorParams,
    dt: f64,
    w: &LossWeights,
) -> Result<DVector<f64>, LearningError> {
    let n = feedback.len();
    if n < 3 {
        return Err(LearningError::Dimension { what: "closed-loop rule needs n >= 3 stages" });
    }
    if references.len() != n || estimates.len() != n {
        return Err(LearningError::Dimension { what: "window slices disagree in length" });
    }
    if trajectory.x_hat.len() < n - 2 {
        return Err(LearningError::MissingSensitivity { stage: trajectory.x_hat.len() });
    }
    let ntheta = trajectory.x_hat[0].ncols();
    let rows = tracking_loss_gradient(feedback, references, w);
    let mut out = DVector::zeros(ntheta);
    for k in 0..n - 2 {
        let x_q = state_from_partial(&feedback[k]);
        let x_hat = state_from_partial(&estimates[k]);
        let df_du = dynamics_input_jacobian(&x_q, dt, params);
        let du_dx = control_jacobians(controller, &references[k], &x_hat, gains, params)?;

        let row = &rows[k + 1];
        // t1 = (∂f̄/∂u)ᵀ row, restricted to the components the row covers.
        let mut t1 = SMatrix::<f64, 4, 1>::zeros();
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..row.len().min(NX) {
                acc += df_du[(i, j)] * row[i];
            }
            t1[j] = acc;
        }
        let t2 = du_dx.transpose() * t1;
        let sens = &trajectory.x_hat[k];
        if sens.nrows() != NX || sens.ncols() != ntheta {
            return Err(LearningError::Dimension { what: "sensitivity block shape" });
        }
        for c in 0..ntheta {
            let mut acc = 0.0;
            for i in 0..NX {
                acc += sens[(i, c)] * t2[i];
            }
            out[c] += acc;
        }
    }
    Ok(out)
}

/// Companion of [`chain_rule_closed_loop`] for the position-loop control
/// gains: dL/dK = Σ_k (∂L/∂x^q_{k+1}) (∂f̄_k/∂u_k) (∂u_k/∂K_c), a 6-vector
/// over [k_p; k_v].
pub fn gain_gradient(
    feedback: &[DVector<f64>],
    references: &[ReferencePoint],
    estimates: &[DVector<f64>],
    controller: ControllerKind,
    gains: &ControlGains,
    params: &QuadrotorParams,
    dt: f64,
    w: &LossWeights,
) -> Result<DVector<f64>, LearningError> {
    let n = feedback.len();
    if n < 3 {
        return Err(LearningError::Dimension { what: "gain rule needs n >= 3 stages" });
    }
    if references.len() != n || estimates.len() != n {
        return Err(LearningError::Dimension { what: "window slices disagree in length" });
    }
    let rows = tracking_loss_gradient(feedback, references, w);
    let mut out = DVector::zeros(6);
    for k in 0..n - 2 {
        let x_q = state_from_partial(&feedback[k]);
        let x_hat = state_from_partial(&estimates[k]);
        let df_du = dynamics_input_jacobian(&x_q, dt, params);
        let du_dk = gain_jacobians(controller, &references[k], &x_hat, gains, params)?;
        let row = &rows[k + 1];
        let mut t1 = SMatrix::<f64, 4, 1>::zeros();
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..row.len().min(NX) {
                acc += df_du[(i, j)] * row[i];
            }
            t1[j] = acc;
        }
        out += DVector::from_column_slice((du_dk.transpose() * t1).as_slice());
    }
    Ok(out)
}

/// Per-step projected gradient descent on the 50 weights: at every control
/// step with an active window, evaluate the tracking loss of the window
/// estimates, chain it through the sensitivity recursion, and take one
/// projected step with the per-group learning rates.
#[derive(Debug, Clone)]
pub struct GradientDescentTuner {
    pub rates: LearningRates,
    pub loss_weights: LossWeights,
    pub updates: usize,
    pub last_gradient_norm: f64,
    pub last_report: ProjectionReport,
}

impl GradientDescentTuner {
    pub fn new(rates: LearningRates, loss_weights: LossWeights) -> Self {
        Self {
            rates,
            loss_weights,
            updates: 0,
            last_gradient_norm: 0.0,
            last_report: ProjectionReport::default(),
        }
    }
}

impl Tuner for GradientDescentTuner {
    fn wants_gradient(&self) -> bool {
        true
    }

    fn observe(&mut self, ctx: &TunerContext<'_>) -> Result<TunerUpdate, EpisodeError> {
        let Some(trajectory) = ctx.gradient else {
            return Ok(TunerUpdate::none());
        };
        let rows =
            tracking_loss_gradient(&ctx.solution.states, ctx.references, &self.loss_weights);
        let grad = chain_rule_direct(&rows, trajectory).map_err(|e| EpisodeError::Tuner {
            step: ctx.step,
            message: e.to_string(),
        })?;
        let g1 = ctx.theta.p.len();
        let g2 = g1 + 1 + ctx.theta.r.len();
        if !grad[g1].is_finite() || !grad[g2].is_finite() {
            return Err(EpisodeError::Tuner {
                step: ctx.step,
                message: "non-finite forgetting-factor gradient".to_string(),
            });
        }
        let (theta_next, report) = ctx.theta.project_update(&grad, &self.rates);
        self.updates += 1;
        self.last_gradient_norm = grad.norm();
        self.last_report = report;
        Ok(TunerUpdate { theta: Some(theta_next), gains: None })
    }
}

/// Loss and weight trace of a multi-episode training run.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    /// Mean per-step loss of each episode.
    pub mean_losses: Vec<f64>,
    /// Weights after each episode.
    pub thetas: Vec<ThetaParams>,
    /// Final weights.
    pub theta: ThetaParams,
    /// Episodes that aborted early.
    pub failures: usize,
}

/// One training episode: runs the closed loop with the gradient-descent tuner
/// and returns the adapted weights with the episode outcome.
pub fn train_episode(
    setup: &EpisodeSetup,
    theta: &ThetaParams,
    gains: &ControlGains,
    rates: &LearningRates,
    loss_weights: &LossWeights,
) -> Result<EpisodeOutcome, ScenarioError> {
    let mut tuner = GradientDescentTuner::new(rates.clone(), *loss_weights);
    run_closed_loop(setup, theta, gains, &mut tuner)
}

/// Multi-episode weight training. Episode e runs with seed `base_seed + e`;
/// weights carry over between episodes. Aborted episodes keep the weight
/// progress made before the failure and are counted.
pub fn train_weights(
    setup: &EpisodeSetup,
    theta0: &ThetaParams,
    gains: &ControlGains,
    rates: &LearningRates,
    loss_weights: &LossWeights,
    episodes: usize,
) -> Result<TrainingTrace, ScenarioError> {
    let mut theta = theta0.clone();
    let mut trace = TrainingTrace {
        mean_losses: Vec::with_capacity(episodes),
        thetas: Vec::with_capacity(episodes),
        theta: theta.clone(),
        failures: 0,
    };
    for e in 0..episodes {
        let mut episode_setup = setup.clone();
        episode_setup.sim.seed = setup.sim.seed.wrapping_add(e as u64);
        let outcome = train_episode(&episode_setup, &theta, gains, rates, loss_weights)?;
        if outcome.failure.is_some() {
            trace.failures += 1;
        }
        theta = outcome.theta_final;
        trace.mean_losses.push(outcome.log.mean_loss());
        trace.thetas.push(theta.clone());
    }
    trace.theta = theta;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Neural parameterization
// ---------------------------------------------------------------------------

/// One-hidden-layer perceptron: 50 PReLU units with per-unit learnable slopes
/// and a sigmoid output layer, so every output lies strictly in (0, 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// PReLU negative-side slopes, one per hidden unit.
    pub slope: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Cached activations of one forward pass, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: DVector<f64>,
    pub z1: DVector<f64>,
    pub hidden: DVector<f64>,
    pub output: DVector<f64>,
}

/// Parameter gradients with the same shapes as [`MlpPolicy`].
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub slope: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

pub const PRELU_INITIAL_SLOPE: f64 = 0.25;

impl MlpPolicy {
    /// Fresh network with uniform ±1/√fan_in weight init and slopes at 0.25.
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let lim1 = 1.0 / (inputs as f64).sqrt();
        let lim2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(hidden, inputs, |_, _| rng.gen_range(-lim1..lim1)),
            b1: DVector::zeros(hidden),
            slope: DVector::from_element(hidden, PRELU_INITIAL_SLOPE),
            w2: DMatrix::from_fn(outputs, hidden, |_, _| rng.gen_range(-lim2..lim2)),
            b2: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        self.forward_cached(input).output
    }

    pub fn forward_cached(&self, input: &DVector<f64>) -> MlpCache {
        assert_eq!(input.len(), self.inputs());
        let z1 = &self.w1 * input + &self.b1;
        let hidden =
            DVector::from_fn(z1.len(), |i, _| if z1[i] > 0.0 { z1[i] } else { self.slope[i] * z1[i] });
        let z2 = &self.w2 * &hidden + &self.b2;
        let output = z2.map(|v| 1.0 / (1.0 + (-v).exp()));
        MlpCache { input: input.clone(), z1, hidden, output }
    }

    /// Manual backward pass: exact parameter gradients of
    /// upstreamᵀ·output(input) for the cached forward pass.
    pub fn backward(&self, cache: &MlpCache, upstream: &DVector<f64>) -> MlpGradients {
        assert_eq!(upstream.len(), self.outputs());
        let g_out = DVector::from_fn(upstream.len(), |i, _| {
            let o = cache.output[i];
            upstream[i] * o * (1.0 - o)
        });
        let w2_grad = &g_out * cache.hidden.transpose();
        let g_hidden = self.w2.transpose() * &g_out;
        let g_z1 = DVector::from_fn(g_hidden.len(), |i, _| {
            g_hidden[i] * if cache.z1[i] > 0.0 { 1.0 } else { self.slope[i] }
        });
        let slope_grad = DVector::from_fn(g_hidden.len(), |i, _| {
            if cache.z1[i] > 0.0 {
                0.0
            } else {
                g_hidden[i] * cache.z1[i]
            }
        });
        let w1_grad = &g_z1 * cache.input.transpose();
        MlpGradients { w1: w1_grad, b1: g_z1, slope: slope_grad, w2: w2_grad, b2: g_out }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.slope.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters as one flat vector (w1 column-major, b1, slope, w2
    /// column-major, b2) — the layout used by the optimizer and the binary
    /// serialization.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.b1.as_slice());
        out.extend_from_slice(self.slope.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(self.b2.as_slice());
        DVector::from_vec(out)
    }

    /// Inverse of [`MlpPolicy::flatten`].
    pub fn assign(&mut self, flat: &DVector<f64>) {
        assert_eq!(flat.len(), self.parameter_count());
        let mut at = 0;
        let mut take = |len: usize| {
            let s = flat.as_slice()[at..at + len].to_vec();
            at += len;
            s
        };
        let (h, i, o) = (self.hidden(), self.inputs(), self.outputs());
        self.w1 = DMatrix::from_column_slice(h, i, &take(h * i));
        self.b1 = DVector::from_vec(take(h));
        self.slope = DVector::from_vec(take(h));
        self.w2 = DMatrix::from_column_slice(o, h, &take(o * h));
        self.b2 = DVector::from_vec(take(o));
    }

    /// Persist as a JSON header (`<base>.json`) plus flat little-endian f64
    /// binary (`<base>.bin`).
    pub fn save(&self, base: &Path) -> std::io::Result<()> {
        let header = MlpHeader {
            inputs: self.inputs(),
            hidden: self.hidden(),
            outputs: self.outputs(),
            parameter_count: self.parameter_count(),
            layout: MLP_FLAT_LAYOUT.to_string(),
        };
        let json = serde_json::to_string_pretty(&header)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        std::fs::write(base.with_extension("json"), json)?;
        let flat = self.flatten();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(base.with_extension("bin"), bytes)
    }

    /// Load a policy saved by [`MlpPolicy::save`].
    pub fn load(base: &Path) -> std::io::Result<Self> {
        let mut json = String::new();
        std::fs::File::open(base.with_extension("json"))?.read_to_string(&mut json)?;
        let header: MlpHeader = serde_json::from_str(&json)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let bytes = std::fs::read(base.with_extension("bin"))?;
        if bytes.len() != header.parameter_count * 8 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "binary length does not match parameter count",
            ));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut policy = Self {
            w1: DMatrix::zeros(header.hidden, header.inputs),
            b1: DVector::zeros(header.hidden),
            slope: DVector::zeros(header.hidden),
            w2: DMatrix::zeros(header.outputs, header.hidden),
            b2: DVector::zeros(header.outputs),
        };
        policy.assign(&DVector::from_vec(flat));
        Ok(policy)
    }
}

const MLP_FLAT_LAYOUT: &str = "w1 column-major, b1, prelu slopes, w2 column-major, b2";

#[derive(Serialize, Deserialize)]
struct MlpHeader {
    inputs: usize,
    hidden: usize,
    outputs: usize,
    parameter_count: usize,
    layout: String,
}

impl MlpGradients {
    /// Same layout as [`MlpPolicy::flatten`].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out =
            Vec::with_capacity(self.w1.len() + self.b1.len() + self.slope.len() + self.w2.len() + self.b2.len());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.b1.as_slice());
        out.extend_from_slice(self.slope.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(self.b2.as_slice());
        DVector::from_vec(out)
    }
}

/// Adaptive-moment first-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }

    /// One in-place update step with bias-corrected moments.
    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Per-element bounds of the masked θ subset and the position-loop gains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyBounds {
    pub theta: BoundedRatioMap,
    pub gains: BoundedRatioMap,
}

impl PolicyBounds {
    /// Stock bounds: p ∈ (1, 100), r and q ∈ (5, 500), forgetting factors
    /// ∈ (0.2, 0.99); position gains ∈ (4, 40), velocity gains ∈ (2, 20).
    pub fn default_quadrotor(template: &ThetaParams, mask: &ThetaMask) -> Self {
        let np = template.p.len();
        let nr = template.r.len();
        let g1 = np;
        let g2 = np + 1 + nr;
        let mut mins = Vec::with_capacity(mask.len());
        let mut maxs = Vec::with_capacity(mask.len());
        for &j in &mask.indices {
            let (lo, hi) = if j == g1 || j == g2 {
                (0.2, 0.99)
            } else if j < np {
                (1.0, 100.0)
            } else {
                (5.0, 500.0)
            };
            mins.push(lo);
            maxs.push(hi);
        }
        let gain_mins = DVector::from_vec(vec![4.0, 4.0, 4.0, 2.0, 2.0, 2.0]);
        let gain_maxs = DVector::from_vec(vec![40.0, 40.0, 40.0, 20.0, 20.0, 20.0]);
        Self {
            theta: BoundedRatioMap::new(DVector::from_vec(mins), DVector::from_vec(maxs)),
            gains: BoundedRatioMap::new(gain_mins, gain_maxs),
        }
    }
}

/// Neural tuner: two small networks map the position/velocity tracking error
/// to bounded ratios for the masked θ subset and for the position-loop gains.
/// Both are trained online per step: the closed-loop chain rule gives dL/dθ
/// and dL/dK over the current window, and the surrogate losses (dL/dθ)·θ and
/// (dL/dK)·K are backpropagated manually through the ratio maps and networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyTuner {
    pub theta_policy: MlpPolicy,
    pub gain_policy: MlpPolicy,
    pub mask: ThetaMask,
    pub bounds: PolicyBounds,
    pub loss_weights: LossWeights,
    pub controller_kind: ControllerKind,
    base_theta: ThetaParams,
    adam_theta: AdamState,
    adam_gain: AdamState,
    pub updates: usize,
}

pub const POLICY_HIDDEN_UNITS: usize = 50;
pub const POLICY_LEARNING_RATE: f64 = 1e-4;

impl PolicyTuner {
    /// Networks initialized from the seed; unmasked θ entries stay at the
    /// template's values.
    pub fn new(
        template: &ThetaParams,
        controller_kind: ControllerKind,
        loss_weights: LossWeights,
        seed: u64,
    ) -> Self {
        let mask = ThetaMask::default_quadrotor();
        let bounds = PolicyBounds::default_quadrotor(template, &mask);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta_policy = MlpPolicy::new(6, POLICY_HIDDEN_UNITS, mask.len(), &mut rng);
        let gain_policy = MlpPolicy::new(6, POLICY_HIDDEN_UNITS, 6, &mut rng);
        let adam_theta = AdamState::new(theta_policy.parameter_count(), POLICY_LEARNING_RATE);
        let adam_gain = AdamState::new(gain_policy.parameter_count(), POLICY_LEARNING_RATE);
        Self {
            theta_policy,
            gain_policy,
            mask,
            bounds,
            loss_weights,
            controller_kind,
            base_theta: template.clone(),
            adam_theta,
            adam_gain,
            updates: 0,
        }
    }

    fn materialize(
        &self,
        ratios_theta: &DVector<f64>,
        ratios_gain: &DVector<f64>,
        current_gains: &ControlGains,
    ) -> Result<(ThetaParams, ControlGains), crate::weights::ThetaError> {
        let masked = self.bounds.theta.map(ratios_theta);
        let flat = self.mask.scatter(&self.base_theta.flatten(), &masked);
        let theta = ThetaParams::from_flat(
            &flat,
            self.base_theta.p.len(),
            self.base_theta.r.len(),
            self.base_theta.q.len(),
            self.base_theta.gamma_min,
        )?;
        let g = self.bounds.gains.map(ratios_gain);
        let mut gains = current_gains.clone();
        gains.kp = Vector3::new(g[0], g[1], g[2]);
        gains.kv = Vector3::new(g[3], g[4], g[5]);
        Ok((theta, gains))
    }
}

impl Tuner for PolicyTuner {
    fn wants_gradient(&self) -> bool {
        true
    }

    fn observe(&mut self, ctx: &TunerContext<'_>) -> Result<TunerUpdate, EpisodeError> {
        let newest = ctx.solution.states.last().expect("solution has states");
        let reference = ctx.references.last().expect("window has references");
        let input = DVector::from_fn(6, |i, _| {
            if i < 3 {
                newest[i] - reference.position[i]
            } else {
                newest[i] - reference.velocity[i - 3]
            }
        });

        let cache_theta = self.theta_policy.forward_cached(&input);
        let cache_gain = self.gain_policy.forward_cached(&input);
        let (theta_new, gains_new) = self
            .materialize(&cache_theta.output, &cache_gain.output, ctx.gains)
            .map_err(|e| EpisodeError::Tuner { step: ctx.step, message: e.to_string() })?;

        // Train the networks when a full chain is available this step.
        let n = ctx.problem.horizon;
        if let Some(trajectory) = ctx.gradient {
            if n >= 3 {
                let feedback = &ctx.problem.measurements;
                let dl_dtheta = chain_rule_closed_loop(
                    feedback,
                    ctx.references,
                    &ctx.solution.states,
                    trajectory,
                    self.controller_kind,
                    ctx.gains,
                    ctx.params,
                    ctx.control_dt,
                    &self.loss_weights,
                )
                .map_err(|e| EpisodeError::Tuner { step: ctx.step, message: e.to_string() })?;
                let dl_dgains = gain_gradient(
                    feedback,
                    ctx.references,
                    &ctx.solution.states,
                    self.controller_kind,
                    ctx.gains,
                    ctx.params,
                    ctx.control_dt,
                    &self.loss_weights,
                )
                .map_err(|e| EpisodeError::Tuner { step: ctx.step, message: e.to_string() })?;

                // Surrogate (dL/dθ)·θ: upstream on each ratio output is the
                // masked loss gradient times the ratio map's span.
                let theta_span = self.bounds.theta.derivative();
                let upstream_theta = DVector::from_fn(self.mask.len(), |slot, _| {
                    dl_dtheta[self.mask.indices[slot]] * theta_span[slot]
                });
                let gain_span = self.bounds.gains.derivative();
                let upstream_gain =
                    DVector::from_fn(6, |i, _| dl_dgains[i] * gain_span[i]);
                if upstream_theta.iter().chain(upstream_gain.iter()).any(|v| !v.is_finite()) {
                    return Err(EpisodeError::Tuner {
                        step: ctx.step,
                        message: "non-finite policy upstream gradient".to_string(),
                    });
                }

                let g_theta = self.theta_policy.backward(&cache_theta, &upstream_theta);
                let g_gain = self.gain_policy.backward(&cache_gain, &upstream_gain);
                let mut flat_theta = self.theta_policy.flatten();
                self.adam_theta.step(&mut flat_theta, &g_theta.flatten());
                self.theta_policy.assign(&flat_theta);
                let mut flat_gain = self.gain_policy.flatten();
                self.adam_gain.step(&mut flat_gain, &g_gain.flatten());
                self.gain_policy.assign(&flat_gain);
                self.updates += 1;
            }
        }

        Ok(TunerUpdate { theta: Some(theta_new), gains: Some(gains_new) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhe::{self, EstimationModel, MheOptions, MheProblem, QuadrotorModel};
    use crate::rigid_body::{measure, rest_state, ControlInput};
    use crate::scenarios::{
        ClosedLoopController, DisturbanceProfile, EpisodeSetup, ReferenceProfile, TruthIntegrator,
    };
    use crate::gradient::{build_diff_kkt, kalman_gradient};
    use rand::rngs::StdRng;

    fn tight() -> MheOptions {
        MheOptions { tolerance: 1e-10, max_iterations: 200, ..MheOptions::default() }
    }

    #[test]
    fn softmax_weights_are_uniform_at_zero_beta_and_normalized() {
        let w = softmax_stage_weights(5, 0.0);
        for v in &w {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let w = softmax_stage_weights(7, 0.8);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| *v > 0.0));
        assert!(w[6] > w[0]);
        let w = softmax_stage_weights(4, -200.0);
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_exactly_on_the_reference() {
        let refs: Vec<ReferencePoint> = (0..4)
            .map(|k| {
                let mut r = ReferencePoint::hover_at(Vector3::new(k as f64, 0.0, -1.0));
                r.velocity = Vector3::new(0.3, 0.0, 0.1 * k as f64);
                r
            })
            .collect();
        let states: Vec<DVector<f64>> = refs
            .iter()
            .map(|r| {
                let mut x = DVector::zeros(24);
                for i in 0..3 {
                    x[i] = r.position[i];
                    x[3 + i] = r.velocity[i];
                }
                x
            })
            .collect();
        let w = LossWeights::default();
        let loss = tracking_loss(&states, &refs, &w);
        assert_eq!(loss.total, 0.0);
        assert!((loss.stage_weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for row in tracking_loss_gradient(&states, &refs, &w) {
            assert_eq!(row.norm(), 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let w = LossWeights { position: 1.0, velocity: 0.1, beta: 0.35 };
        let refs: Vec<ReferencePoint> = (0..5)
            .map(|_| {
                let mut r = ReferencePoint::hover_at(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-2.0..-0.5),
                ));
                r.velocity =
                    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                r
            })
            .collect();
        let states: Vec<DVector<f64>> =
            (0..5).map(|_| DVector::from_fn(24, |_, _| rng.gen_range(-1.0..1.0))).collect();

        let rows = tracking_loss_gradient(&states, &refs, &w);
        let h = 1e-6;
        for k in 0..states.len() {
            for i in 0..24 {
                let mut sp = states.clone();
                sp[k][i] += h;
                let mut sm = states.clone();
                sm[k][i] -= h;
                let fd = (tracking_loss(&sp, &refs, &w).total
                    - tracking_loss(&sm, &refs, &w).total)
                    / (2.0 * h);
                let rel = (rows[k][i] - fd).abs() / fd.abs().max(1e-9);
                assert!(rel < 1e-7, "stage {k} comp {i}: analytic {} fd {fd}", rows[k][i]);
            }
        }
    }

    #[test]
    fn chain_rule_direct_trivial_cases() {
        let rows = vec![DVector::from_fn(24, |i, _| i as f64)];
        let zero_traj = GradientTrajectory {
            x_hat: vec![DMatrix::zeros(24, 50)],
            lambda: vec![],
            x_filt: vec![],
            p_bar: vec![],
            gain: vec![],
        };
        assert_eq!(chain_rule_direct(&rows, &zero_traj).unwrap().norm(), 0.0);

        let id_traj = GradientTrajectory {
            x_hat: vec![DMatrix::identity(24, 24)],
            lambda: vec![],
            x_filt: vec![],
            p_bar: vec![],
            gain: vec![],
        };
        let out = chain_rule_direct(&rows, &id_traj).unwrap();
        assert_eq!(out, rows[0]);
    }

    /// Builds a converged quadrotor window from a short disturbed flight with
    /// fixed noise, as a fixture for the end-to-end chain-rule checks.
    fn quadrotor_fixture(
        theta: &ThetaParams,
        n: usize,
        seed: u64,
    ) -> (MheProblem<QuadrotorModel>, Vec<ReferencePoint>) {
        let params = QuadrotorParams::default();
        let model = QuadrotorModel::new(params.clone(), 0.01);
        let gains = ControlGains::default();
        let mut rng = StdRng::seed_from_u64(seed);

        let start = Vector3::new(0.25, -0.15, -1.3);
        let target = Vector3::new(0.0, 0.0, -1.0);
        let mut x = rest_state(&start);
        let reference = ReferencePoint::hover_at(target);
        let mut measurements = Vec::with_capacity(n);
        let mut controls: Vec<ControlInput> = Vec::with_capacity(n - 1);
        let mut refs = Vec::with_capacity(n);
        let prior = DVector::from_column_slice(x.as_slice());
        for k in 0..n {
            let mut y = measure(&x);
            for i in 0..y.len() {
                y[i] += 1e-3 * rng.gen_range(-1.0..1.0);
            }
            measurements.push(DVector::from_column_slice(y.as_slice()));
            refs.push(reference.clone());
            if k + 1 < n {
                let u = crate::control::geometric_control(&reference, &x, &gains, &params)
                    .expect("control");
                x = model.step(
                    &DVector::from_column_slice(x.as_slice()),
                    &u,
                    &DVector::zeros(6),
                )
                .fixed_rows::<24>(0)
                .into_owned();
                controls.push(u);
            }
        }
        let problem = MheProblem {
            model,
            horizon: n,
            prior,
            measurements,
            controls,
            weights: theta.expand(n).unwrap(),
        };
        (problem, refs)
    }

    #[test]
    fn direct_chain_rule_matches_solver_finite_differences() {
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.6, 0.8);
        let (problem, refs) = quadrotor_fixture(&theta, 5, 3);
        let w = LossWeights::default();
        let solution = mhe::solve(&problem, None, &tight()).unwrap();
        assert!(solution.converged);

        let trajectory =
            kalman_gradient(&build_diff_kkt(&problem, &solution, &theta).unwrap()).unwrap();
        let rows = tracking_loss_gradient(&solution.states, &refs, &w);
        let grad = chain_rule_direct(&rows, &trajectory).unwrap();

        for &j in &[2, 20, 24, 27, 43, 45] {
            let flat = theta.flatten();
            let h = 1e-4 * flat[j].abs().max(1.0);
            let loss_at = |v: f64| {
                let mut f = flat.clone();
                f[j] = v;
                let t = ThetaParams::from_flat(&f, 24, 18, 6, theta.gamma_min).unwrap();
                let mut p = problem.clone();
                p.weights = t.expand(5).unwrap();
                let s = mhe::solve(&p, Some(&solution), &tight()).unwrap();
                assert!(s.converged, "perturbed solve did not converge at θ[{j}]");
                tracking_loss(&s.states, &refs, &w).total
            };
            let fd = (loss_at(flat[j] + h) - loss_at(flat[j] - h)) / (2.0 * h);
            // The floor covers components the loss barely sees (both sides
            // numerically zero), e.g. torque-disturbance prior weights.
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-3, "θ[{j}]: analytic {} vs fd {fd} (rel {rel})", grad[j]);
        }
    }

    #[test]
    fn closed_loop_chain_rule_is_zero_parallel_to_perfect_tracking() {
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.6, 0.8);
        let (problem, _) = quadrotor_fixture(&theta, 5, 11);
        let solution = mhe::solve(&problem, None, &tight()).unwrap();
        let trajectory =
            kalman_gradient(&build_diff_kkt(&problem, &solution, &theta).unwrap()).unwrap();

        // References that exactly match the feedback states: every loss row
        // vanishes, so the gradient must vanish regardless of sensitivities.
        let perfect: Vec<ReferencePoint> = problem
            .measurements
            .iter()
            .map(|y| {
                let mut r = ReferencePoint::hover_at(Vector3::new(y[0], y[1], y[2]));
                r.velocity = Vector3::new(y[3], y[4], y[5]);
                r
            })
            .collect();
        let grad = chain_rule_closed_loop(
            &problem.measurements,
            &perfect,
            &solution.states,
            &trajectory,
            ControllerKind::Geometric,
            &ControlGains::default(),
            &QuadrotorParams::default(),
            0.01,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn closed_loop_chain_rule_sees_nothing_through_unused_estimate_channels() {
        // The PD baseline ignores the torque-disturbance estimate, so a
        // sensitivity confined to those state rows contributes nothing.
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.6, 0.8);
        let (problem, refs) = quadrotor_fixture(&theta, 5, 13);
        let solution = mhe::solve(&problem, None, &tight()).unwrap();
        let mut trajectory =
            kalman_gradient(&build_diff_kkt(&problem, &solution, &theta).unwrap()).unwrap();
        for m in &mut trajectory.x_hat {
            for i in 0..24 {
                if !(21..24).contains(&i) {
                    for c in 0..m.ncols() {
                        m[(i, c)] = 0.0;
                    }
                }
            }
        }
        let grad = chain_rule_closed_loop(
            &problem.measurements,
            &refs,
            &solution.states,
            &trajectory,
            ControllerKind::PdBaseline,
            &ControlGains::default(),
            &QuadrotorParams::default(),
            0.01,
            &LossWeights::default(),
        )
        .unwrap();
        assert!(grad.norm() < 1e-12, "leak through d_tau columns: {}", grad.norm());
    }

    /// The closed-loop rule differentiates the one-window surrogate it
    /// defines: predicted next feedback states f̄(x^q_k, u(r_k, x̂_{k|N}(θ)))
    /// scored against the references, with the recorded feedback trajectory
    /// held fixed. Finite differences of that surrogate — re-solving the
    /// window at perturbed θ, re-evaluating the controls, and stepping once —
    /// must agree with the analytic chain.
    #[test]
    fn closed_loop_chain_rule_matches_surrogate_finite_differences() {
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.6, 0.8);
        let n = 4;
        let (problem, refs) = quadrotor_fixture(&theta, n, 17);
        let w = LossWeights::default();
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let solution = mhe::solve(&problem, None, &tight()).unwrap();
        let trajectory =
            kalman_gradient(&build_diff_kkt(&problem, &solution, &theta).unwrap()).unwrap();
        let grad = chain_rule_closed_loop(
            &problem.measurements,
            &refs,
            &solution.states,
            &trajectory,
            ControllerKind::Geometric,
            &gains,
            &params,
            0.01,
            &w,
        )
        .unwrap();

        let gamma = softmax_stage_weights(n, w.beta);
        let surrogate = |states: &[DVector<f64>]| -> f64 {
            // Σ_{k=0}^{n-3} γ_{k+1} ‖f̄(x^q_k, u(x̂_k)) − ref_{k+1}‖²_κ
            let mut total = 0.0;
            for k in 0..n - 2 {
                let x_q = state_from_partial(&problem.measurements[k]);
                let x_hat = state_from_partial(&states[k]);
                let u = crate::control::geometric_control(&refs[k], &x_hat, &gains, &params)
                    .expect("control");
                let next = crate::rigid_body::euler_step(
                    &x_q,
                    &u,
                    &crate::rigid_body::NoiseVec::zeros(),
                    0.01,
                    &params,
                );
                let (l, _) = stage_error_terms(
                    &DVector::from_column_slice(&next.as_slice()[..6]),
                    &refs[k + 1],
                    &w,
                );
                total += gamma[k + 1] * l;
            }
            total
        };

        let flat = theta.flatten();
        let mut checked = 0;
        for &j in &[2, 20, 24, 27, 43, 45] {
            let h = 1e-4 * flat[j].abs().max(1.0);
            let loss_at = |v: f64| {
                let mut f = flat.clone();
                f[j] = v;
                let t = ThetaParams::from_flat(&f, 24, 18, 6, theta.gamma_min).unwrap();
                let mut p = problem.clone();
                p.weights = t.expand(n).unwrap();
                let s = mhe::solve(&p, Some(&solution), &tight()).unwrap();
                assert!(s.converged);
                surrogate(&s.states)
            };
            let fd = (loss_at(flat[j] + h) - loss_at(flat[j] - h)) / (2.0 * h);
            if fd.abs() < 1e-12 && grad[j].abs() < 1e-12 {
                continue;
            }
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-2, "θ[{j}]: analytic {} vs fd {fd} (rel {rel})", grad[j]);
            checked += 1;
        }
        assert!(checked >= 4, "too few informative components ({checked})");
    }

    #[test]
    fn dynamics_input_jacobian_matches_finite_differences() {
        let params = QuadrotorParams::default();
        let mut rng = StdRng::seed_from_u64(5);
        let mut x = rest_state(&Vector3::new(0.2, -0.4, -1.1));
        for i in 3..6 {
            x[i] = rng.gen_range(-0.5..0.5);
        }
        for i in 15..18 {
            x[i] = rng.gen_range(-0.5..0.5);
        }
        let dt = 0.01;
        let jac = dynamics_input_jacobian(&x, dt, &params);

        let u0 = ControlInput::hover(&params);
        let h = 1e-2 * u0.u[0].abs().max(1.0);
        for j in 0..4 {
            let mut up = u0.clone();
            up.u[j] += h;
            let wide_p = wrench_of(&up, &params);
            let mut um = u0.clone();
            um.u[j] -= h;
            let wide_m = wrench_of(&um, &params);
            let xp = crate::rigid_body::euler_step(
                &x,
                &wide_p,
                &crate::rigid_body::NoiseVec::zeros(),
                dt,
                &params,
            );
            let xm = crate::rigid_body::euler_step(
                &x,
                &wide_m,
                &crate::rigid_body::NoiseVec::zeros(),
                dt,
                &params,
            );
            for i in 0..NX {
                let fd = (xp[i] - xm[i]) / (2.0 * h);
                assert!(
                    (jac[(i, j)] - fd).abs() < 1e-9 * fd.abs().max(1.0),
                    "row {i} col {j}: {} vs {fd}",
                    jac[(i, j)]
                );
            }
        }
    }

    fn wrench_of(u: &ControlInput, params: &QuadrotorParams) -> ControlInput {
        let w = params.mixer() * u.u;
        ControlInput {
            u: u.u,
            wrench: crate::rigid_body::Wrench {
                thrust: w[0],
                torque: Vector3::new(w[1], w[2], w[3]),
            },
            saturated: 0,
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(21);
        let mut policy = MlpPolicy::new(6, 9, 4, &mut rng);
        // Nudge some pre-activations negative so the PReLU slopes matter.
        policy.b1 = DVector::from_fn(9, |i, _| if i % 2 == 0 { -0.4 } else { 0.2 });
        let input = DVector::from_fn(6, |i, _| 0.3 * (i as f64 - 2.5));
        let upstream = DVector::from_fn(4, |i, _| 1.0 - 0.4 * i as f64);

        let cache = policy.forward_cached(&input);
        for v in cache.output.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        let grads = policy.backward(&cache, &upstream).flatten();
        let scalar = |p: &MlpPolicy| upstream.dot(&p.forward(&input));

        let flat = policy.flatten();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..flat.len() {
            let mut fp = flat.clone();
            fp[idx] += h;
            let mut fm = flat.clone();
            fm[idx] -= h;
            let mut pp = policy.clone();
            pp.assign(&fp);
            let mut pm = policy.clone();
            pm.assign(&fm);
            let fd = (scalar(&pp) - scalar(&pm)) / (2.0 * h);
            let rel = (grads[idx] - fd).abs() / fd.abs().max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative backprop error {worst}");

        let zero = policy.backward(&cache, &DVector::zeros(4)).flatten();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn mlp_roundtrips_through_flat_layout_and_disk() {
        let mut rng = StdRng::seed_from_u64(33);
        let policy = MlpPolicy::new(6, 50, 20, &mut rng);
        let mut copy = MlpPolicy::new(6, 50, 20, &mut rng);
        copy.assign(&policy.flatten());
        let x = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2);
        assert_eq!(policy.forward(&x), copy.forward(&x));

        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("policy");
        policy.save(&base).unwrap();
        let loaded = MlpPolicy::load(&base).unwrap();
        assert_eq!(policy.forward(&x), loaded.forward(&x));
    }

    #[test]
    fn adam_descends_a_simple_quadratic() {
        let mut params = DVector::from_vec(vec![2.0, -3.0, 0.5]);
        let target = DVector::from_vec(vec![-1.0, 1.0, 0.0]);
        let mut adam = AdamState::new(3, 0.05);
        for _ in 0..2000 {
            let grad = &params - &target;
            adam.step(&mut params, &grad);
        }
        assert!((params - target).norm() < 1e-3);
    }

    #[test]
    fn gradient_descent_tuner_reduces_loss_on_a_training_scenario() {
        let params = QuadrotorParams::default();
        let mut setup = EpisodeSetup::baseline(params.clone());
        setup.sim.episode_duration = 3.0;
        setup.sim.seed = 9;
        setup.disturbance = crate::scenarios::training_composite(&params);
        setup.horizon = 10;
        let theta0 = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.4, 0.8);
        let gains = ControlGains::default();
        let trace = train_weights(
            &setup,
            &theta0,
            &gains,
            &LearningRates::default(),
            &LossWeights::default(),
            2,
        )
        .unwrap();
        assert_eq!(trace.failures, 0);
        assert_eq!(trace.mean_losses.len(), 2);
        let final_theta = &trace.theta;
        assert!(final_theta.validate().is_ok());
        // The weights must actually move under training.
        let moved = (final_theta.flatten() - theta0.flatten()).norm();
        assert!(moved > 1e-6, "weights did not move ({moved})");
    }

    #[test]
    fn policy_tuner_produces_bounded_parameters_and_updates() {
        let params = QuadrotorParams::default();
        let mut setup = EpisodeSetup::baseline(params.clone());
        setup.sim.episode_duration = 1.5;
        setup.sim.seed = 4;
        setup.horizon = 10;
        setup.truth = TruthIntegrator::Rk4Substeps;
        setup.reference = ReferenceProfile::Hover { position: [0.2, -0.1, -1.2] };
        setup.disturbance = DisturbanceProfile::None;
        setup.controller = ClosedLoopController::PdCompensated;
        let template = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.6, 0.8);
        let mut tuner = PolicyTuner::new(
            &template,
            ControllerKind::PdBaseline,
            LossWeights::default(),
            77,
        );
        let gains = ControlGains::default();
        let outcome = run_closed_loop(&setup, &template, &gains, &mut tuner).unwrap();
        assert!(outcome.is_ok(), "episode failed: {:?}", outcome.failure);
        assert!(tuner.updates > 0, "policy never updated");
        let theta = &outcome.theta_final;
        assert!(theta.validate().is_ok());
        assert!(theta.gamma1 > 0.2 && theta.gamma1 < 0.99);
        for i in 0..3 {
            assert!(outcome.gains_final.kp[i] > 4.0 && outcome.gains_final.kp[i] < 40.0);
            assert!(outcome.gains_final.kv[i] > 2.0 && outcome.gains_final.kv[i] < 20.0);
        }
        // Unmasked entries stay at the template values.
        for i in 6..18 {
            assert_eq!(theta.p[i], template.p[i]);
        }
    }
}
