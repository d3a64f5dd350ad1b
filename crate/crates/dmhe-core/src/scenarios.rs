//! Simulation scenarios: reference trajectories, disturbance profiles, and
//! the closed-loop driver tying truth propagation, sensing, estimation, and
//! control together.
//!
//! All internal math is NED (z down). Disturbance forces are inertial-frame,
//! disturbance torques body-frame, matching the extended-state layout.
//!
//! Determinism contract: every random draw of an episode comes from one
//! seeded generator in a fixed order — per control step, 18 measurement-noise
//! draws first, then 6 process-noise draws. Logs are therefore byte-identical
//! across runs with the same configuration and seed.

use crate::control::{
    geometric_control, pd_baseline, ControlError, ControlGains, ControllerKind, ReferencePoint,
};
use crate::episode::{EpisodeLog, StepRecord};
use crate::gradient::{build_diff_kkt, kalman_gradient, GradientError, GradientTrajectory};
use crate::learning::{tracking_loss, LossWeights};
use crate::linalg::quintic_smoothstep;
use crate::mhe::{
    self, HorizonSolution, MheError, MheOptions, MheProblem, QuadrotorModel, SlidingWindow,
};
use crate::rigid_body::{
    self, measure, rest_state, ControlInput, NoiseVec, QuadrotorParams, StateVec, DIST_F, NY,
};
use crate::weights::{ThetaError, ThetaParams};
use nalgebra::{DVector, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;

/// Configuration error for scenario or timing parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    /// A timing quantity (step, duration) is zero or negative.
    NonPositiveTiming,
    /// The control period is not an integer multiple of the simulation step.
    StepMismatch { control_dt: f64, sim_dt: f64 },
    /// A disturbance profile parameter is out of range.
    BadDisturbance(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonPositiveTiming => write!(f, "timing parameters must be positive"),
            Self::StepMismatch { control_dt, sim_dt } => write!(
                f,
                "control period {control_dt} is not an integer multiple of the simulation step {sim_dt}"
            ),
            Self::BadDisturbance(msg) => write!(f, "bad disturbance profile: {msg}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

/// Timing and noise configuration of a closed-loop episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Control (and estimator) period in seconds.
    pub control_dt: f64,
    /// Truth integration step; must divide `control_dt` exactly.
    pub sim_dt: f64,
    /// Episode length in seconds.
    pub episode_duration: f64,
    /// Variance of the additive measurement noise, all 18 channels.
    pub measurement_noise_variance: f64,
    /// Variance of the truth-side process noise, injected on the six wrench
    /// channels (force N, torque N·m) once per control step.
    pub process_noise_variance: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.01,
            sim_dt: 0.005,
            episode_duration: 15.71,
            measurement_noise_variance: 1e-6,
            process_noise_variance: 1e-2,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.control_dt <= 0.0
            || self.sim_dt <= 0.0
            || self.episode_duration <= 0.0
            || self.measurement_noise_variance < 0.0
            || self.process_noise_variance < 0.0
        {
            return Err(ScenarioError::NonPositiveTiming);
        }
        let ratio = self.control_dt / self.sim_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 - 1e-9 {
            return Err(ScenarioError::StepMismatch {
                control_dt: self.control_dt,
                sim_dt: self.sim_dt,
            });
        }
        Ok(())
    }

    /// Truth substeps per control step (2 at the defaults).
    pub fn substeps(&self) -> usize {
        (self.control_dt / self.sim_dt).round() as usize
    }

    /// Number of control steps in one episode (1571 at the defaults).
    pub fn steps(&self) -> usize {
        (self.episode_duration / self.control_dt).round() as usize
    }
}

/// Figure-eight trajectory parameters. The takeoff blends the whole shape in
/// with a quintic ramp, so position, velocity, and acceleration are all zero
/// at t = 0 (vehicle at rest on the ground).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemniscateParams {
    /// Half-width of the eight along x (the y lobe spans half of this).
    pub amplitude: f64,
    /// Period of one full figure-eight in seconds.
    pub period: f64,
    /// Cruise altitude in meters (height above ground; positive up).
    pub altitude: f64,
    /// Duration of the quintic blend-in ramp.
    pub takeoff_duration: f64,
}

impl Default for LemniscateParams {
    fn default() -> Self {
        // One lap per stock episode (15.71 s ≈ 5π). The pace is set by the
        // attitude loop, which carries only the heading part of the desired
        // angular velocity as feedforward: the thrust-axis precession rate
        // times the tilt amplitude must stay small against the attitude
        // bandwidth, and the three-second ramp keeps the blend's jerk (which
        // the attitude loop must follow unaided) off the motor clamps.
        Self {
            amplitude: 1.0,
            period: 5.0 * std::f64::consts::PI,
            altitude: 1.5,
            takeoff_duration: 3.0,
        }
    }
}

/// Reference at time `t` for the blended lemniscate: a quintic ramp σ(t)
/// scales [A sin ωt, (A/2) sin 2ωt, −h] with analytic first and second
/// derivatives; the heading is tangent-aligned once there is meaningful
/// horizontal speed.
pub fn lemniscate_reference(t: f64, p: &LemniscateParams) -> ReferencePoint {
    let omega = 2.0 * std::f64::consts::PI / p.period;
    let (s, ds_du, dds_du) = quintic_smoothstep(t / p.takeoff_duration);
    let sd = ds_du / p.takeoff_duration;
    let sdd = dds_du / (p.takeoff_duration * p.takeoff_duration);

    let (sin1, cos1) = (omega * t).sin_cos();
    let (sin2, cos2) = (2.0 * omega * t).sin_cos();
    let a = p.amplitude;
    let b = 0.5 * p.amplitude;

    let position = Vector3::new(a * s * sin1, b * s * sin2, -p.altitude * s);
    let velocity = Vector3::new(
        a * (sd * sin1 + s * omega * cos1),
        b * (sd * sin2 + s * 2.0 * omega * cos2),
        -p.altitude * sd,
    );
    let acceleration = Vector3::new(
        a * (sdd * sin1 + 2.0 * sd * omega * cos1 - s * omega * omega * sin1),
        b * (sdd * sin2 + 4.0 * sd * omega * cos2 - s * 4.0 * omega * omega * sin2),
        -p.altitude * sdd,
    );

    let mut heading = Vector3::new(velocity.x, velocity.y, 0.0);
    if heading.norm() > 1e-3 {
        heading /= heading.norm();
    } else {
        heading = Vector3::new(1.0, 0.0, 0.0);
    }
    ReferencePoint { position, velocity, acceleration, heading }
}

/// Reference trajectory selector for an episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceProfile {
    /// Constant hover setpoint (NED position, so airborne means z < 0).
    Hover { position: [f64; 3] },
    Lemniscate(LemniscateParams),
}

impl ReferenceProfile {
    pub fn evaluate(&self, t: f64) -> ReferencePoint {
        match self {
            Self::Hover { position } => {
                ReferencePoint::hover_at(Vector3::new(position[0], position[1], position[2]))
            }
            Self::Lemniscate(p) => lemniscate_reference(t, p),
        }
    }
}

/// ±amplitude alternating on one wrench channel, starting positive; the mean
/// over any whole period is zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareWave {
    /// Wrench channel: 0..2 force x/y/z (inertial N), 3..5 torque (body N·m).
    pub axis: usize,
    pub amplitude: f64,
    pub period: f64,
}

/// amplitude · sin(2πt/period + phase) on one wrench channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub axis: usize,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

/// Low-order in-ground-effect lift surrogate: extra lift
/// c·T_ref·(1/(1 − (ρ/(4h))²) − 1), clamped below `min_height`, capped, and
/// inactive above `active_below`. The extra lift decays toward zero with
/// height; at the stock calibration it is ≈ 2 N at h = 0.2 m.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundEffect {
    pub coefficient: f64,
    /// Thrust entering the surrogate (hover thrust of the airframe).
    pub reference_thrust: f64,
    /// Effective rotor-disc radius ρ.
    pub effective_radius: f64,
    /// Height above which the effect is exactly zero.
    pub active_below: f64,
    /// Height clamp guarding the model's singularity at h → ρ/4.
    pub min_height: f64,
    /// Upper bound on the extra lift in newtons.
    pub cap: f64,
}

impl GroundEffect {
    /// Calibrated for the given airframe: ≈ 2 N extra lift at 0.2 m height.
    pub fn calibrated(params: &QuadrotorParams) -> Self {
        Self {
            coefficient: 1.53,
            reference_thrust: params.hover_thrust(),
            effective_radius: 0.21,
            active_below: 1.0,
            min_height: 0.1,
            cap: 5.0,
        }
    }
}

/// Constant downward pull (NED z-positive) until the release time, then zero.
/// An optional pendulum-style modulation of the pre-release weight is off by
/// default (`oscillation_amplitude = 0`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadRelease {
    /// Payload weight in newtons (pulls down, so d_fz = +weight in NED).
    pub weight: f64,
    pub release_time: f64,
    /// Relative amplitude of the optional pre-release oscillation.
    pub oscillation_amplitude: f64,
    pub oscillation_period: f64,
}

impl PayloadRelease {
    pub fn new(weight: f64, release_time: f64) -> Self {
        Self { weight, release_time, oscillation_amplitude: 0.0, oscillation_period: 1.0 }
    }
}

/// Downward force plateau with quintic ramps and band-limited pseudo-noise
/// (a fixed bank of incommensurate sinusoids — deterministic by construction).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Downwash {
    pub onset: f64,
    /// Plateau duration measured between the ramp midpoints.
    pub duration: f64,
    /// Plateau force in newtons (downward, NED z-positive).
    pub peak: f64,
    /// Ramp-in/ramp-out duration.
    pub ramp: f64,
    /// Pseudo-noise amplitude relative to `peak`.
    pub noise_amplitude: f64,
}

/// Frequencies (Hz) and phases of the downwash pseudo-noise bank.
const DOWNWASH_NOISE_BANK: [(f64, f64); 5] =
    [(2.3, 0.0), (3.7, 1.3), (5.1, 2.6), (6.7, 4.1), (8.9, 0.7)];

/// Exogenous disturbance acting on the vehicle, evaluated as a 6-vector
/// [force inertial; torque body] in NED.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceProfile {
    None,
    SquareWave(SquareWave),
    Sinusoid(Sinusoid),
    GroundEffect(GroundEffect),
    PayloadRelease(PayloadRelease),
    Downwash(Downwash),
    Composite(Vec<DisturbanceProfile>),
}

impl DisturbanceProfile {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: &str| Err(ScenarioError::BadDisturbance(msg.to_string()));
        match self {
            Self::None => Ok(()),
            Self::SquareWave(w) => {
                if w.axis >= 6 {
                    return bad("square_wave axis must be 0..5");
                }
                if w.period <= 0.0 {
                    return bad("square_wave period must be positive");
                }
                Ok(())
            }
            Self::Sinusoid(s) => {
                if s.axis >= 6 {
                    return bad("sinusoid axis must be 0..5");
                }
                if s.period <= 0.0 {
                    return bad("sinusoid period must be positive");
                }
                Ok(())
            }
            Self::GroundEffect(g) => {
                if g.min_height <= g.effective_radius / 4.0 {
                    return bad("ground_effect min_height must exceed a quarter radius");
                }
                if g.cap < 0.0 || g.active_below <= 0.0 {
                    return bad("ground_effect cap/active_below must be non-negative");
                }
                Ok(())
            }
            Self::PayloadRelease(p) => {
                if p.oscillation_period <= 0.0 {
                    return bad("payload_release oscillation_period must be positive");
                }
                Ok(())
            }
            Self::Downwash(d) => {
                if d.ramp <= 0.0 || d.duration < 0.0 {
                    return bad("downwash ramp must be positive and duration non-negative");
                }
                Ok(())
            }
            Self::Composite(parts) => {
                for p in parts {
                    p.validate()?;
                }
                Ok(())
            }
        }
    }
}

/// True disturbance at time `t` given the vehicle state (the ground-effect
/// term depends on height).
pub fn evaluate_disturbance(
    profile: &DisturbanceProfile,
    t: f64,
    state: &StateVec,
) -> SVector<f64, 6> {
    let mut d = SVector::<f64, 6>::zeros();
    accumulate_disturbance(profile, t, state, &mut d);
    d
}

fn accumulate_disturbance(
    profile: &DisturbanceProfile,
    t: f64,
    state: &StateVec,
    d: &mut SVector<f64, 6>,
) {
    match profile {
        DisturbanceProfile::None => {}
        DisturbanceProfile::SquareWave(w) => {
            let phase = (t / w.period).rem_euclid(1.0);
            d[w.axis] += if phase < 0.5 { w.amplitude } else { -w.amplitude };
        }
        DisturbanceProfile::Sinusoid(s) => {
            d[s.axis] += s.amplitude * (2.0 * std::f64::consts::PI * t / s.period + s.phase).sin();
        }
        DisturbanceProfile::GroundEffect(g) => {
            let height = -state[2];
            if height < g.active_below {
                let h = height.max(g.min_height);
                let ratio = g.effective_radius / (4.0 * h);
                let gain = 1.0 / (1.0 - ratio * ratio) - 1.0;
                let lift = (g.coefficient * g.reference_thrust * gain).clamp(0.0, g.cap);
                d[2] -= lift;
            }
        }
        DisturbanceProfile::PayloadRelease(p) => {
            if t < p.release_time {
                let osc = p.oscillation_amplitude
                    * (2.0 * std::f64::consts::PI * t / p.oscillation_period).sin();
                d[2] += p.weight * (1.0 + osc);
            }
        }
        DisturbanceProfile::Downwash(w) => {
            let (up, _, _) = quintic_smoothstep((t - w.onset) / w.ramp);
            let (down, _, _) = quintic_smoothstep((t - w.onset - w.duration) / w.ramp);
            let envelope = up - down;
            if envelope > 0.0 {
                let mut noise = 0.0;
                for (freq, phase) in DOWNWASH_NOISE_BANK {
                    noise += (2.0 * std::f64::consts::PI * freq * t + phase).sin();
                }
                noise /= DOWNWASH_NOISE_BANK.len() as f64;
                d[2] += w.peak * envelope * (1.0 + w.noise_amplitude * noise);
            }
        }
        DisturbanceProfile::Composite(parts) => {
            for p in parts {
                accumulate_disturbance(p, t, state, d);
            }
        }
    }
}

/// The mixed disturbance environment used for weight training: ground effect
/// during takeoff, a ±3.5 N square wave on vertical force, two lateral force
/// sinusoids, and a small yaw-torque sinusoid.
pub fn training_composite(params: &QuadrotorParams) -> DisturbanceProfile {
    DisturbanceProfile::Composite(vec![
        DisturbanceProfile::GroundEffect(GroundEffect::calibrated(params)),
        DisturbanceProfile::SquareWave(SquareWave { axis: 2, amplitude: 3.5, period: 4.0 }),
        DisturbanceProfile::Sinusoid(Sinusoid { axis: 0, amplitude: 1.0, period: 2.5, phase: 0.0 }),
        DisturbanceProfile::Sinusoid(Sinusoid { axis: 1, amplitude: 0.8, period: 3.3, phase: 1.0 }),
        DisturbanceProfile::Sinusoid(Sinusoid { axis: 5, amplitude: 0.05, period: 3.0, phase: 0.0 }),
    ])
}

/// How the truth state advances between control steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthIntegrator {
    /// Fine-step RK4 with rotation re-orthonormalization (the default).
    Rk4Substeps,
    /// Forward-Euler at the control period — the estimator's own model.
    /// Makes noiseless closed-loop runs exactly reconstructible, which turns
    /// "estimate equals truth" into a sharp test rather than a
    /// discretization-error comparison.
    EstimatorModel,
}

/// Which control law closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedLoopController {
    /// Geometric tracking control with force and torque disturbance
    /// compensation from the estimate.
    Geometric,
    /// PD baseline with the estimated force fed forward (no torque term).
    PdCompensated,
    /// PD baseline with no disturbance information at all.
    PdUncompensated,
}

/// Everything needed to run one closed-loop episode.
#[derive(Debug, Clone)]
pub struct EpisodeSetup {
    pub sim: SimConfig,
    pub reference: ReferenceProfile,
    pub disturbance: DisturbanceProfile,
    pub params: QuadrotorParams,
    /// Estimation window capacity N.
    pub horizon: usize,
    pub controller: ClosedLoopController,
    pub truth: TruthIntegrator,
    pub solver: MheOptions,
}

impl EpisodeSetup {
    /// Stock setup: lemniscate reference, no disturbance, RK4 truth, N = 25.
    pub fn baseline(params: QuadrotorParams) -> Self {
        Self {
            sim: SimConfig::default(),
            reference: ReferenceProfile::Lemniscate(LemniscateParams::default()),
            disturbance: DisturbanceProfile::None,
            params,
            horizon: 25,
            controller: ClosedLoopController::Geometric,
            truth: TruthIntegrator::Rk4Substeps,
            solver: MheOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.sim.validate()?;
        self.disturbance.validate()?;
        if self.horizon < 2 {
            return Err(ScenarioError::BadDisturbance(
                "estimation horizon must be at least 2".to_string(),
            ));
        }
        Ok(())
    }
}

/// Failure while running an episode. The driver aborts on the step where the
/// failure occurred and returns the partial log.
#[derive(Debug)]
pub enum EpisodeError {
    Scenario(ScenarioError),
    Theta(ThetaError),
    Solver { step: usize, source: MheError },
    Gradient { step: usize, source: GradientError },
    Control { step: usize, source: ControlError },
    /// Non-finite truth or estimate.
    Diverged { step: usize },
    /// A tuner hook rejected the step (e.g. a non-finite training gradient).
    Tuner { step: usize, message: String },
}

impl fmt::Display for EpisodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Scenario(e) => write!(f, "scenario error: {e}"),
            Self::Theta(e) => write!(f, "weight error: {e}"),
            Self::Solver { step, source } => write!(f, "solver failed at step {step}: {source}"),
            Self::Gradient { step, source } => {
                write!(f, "gradient failed at step {step}: {source}")
            }
            Self::Control { step, source } => write!(f, "control failed at step {step}: {source}"),
            Self::Diverged { step } => write!(f, "simulation diverged at step {step}"),
            Self::Tuner { step, message } => write!(f, "tuner failed at step {step}: {message}"),
        }
    }
}

impl std::error::Error for EpisodeError {}

impl From<ScenarioError> for EpisodeError {
    fn from(e: ScenarioError) -> Self {
        Self::Scenario(e)
    }
}

impl From<ThetaError> for EpisodeError {
    fn from(e: ThetaError) -> Self {
        Self::Theta(e)
    }
}

/// Everything a tuner can see after one estimation step.
pub struct TunerContext<'a> {
    pub step: usize,
    pub time: f64,
    pub problem: &'a MheProblem<QuadrotorModel>,
    pub solution: &'a HorizonSolution,
    /// References aligned with the window stages (same length as the window).
    pub references: &'a [ReferencePoint],
    /// Estimate sensitivities, present when the tuner requested gradients and
    /// the inner solve converged.
    pub gradient: Option<&'a GradientTrajectory>,
    pub theta: &'a ThetaParams,
    pub gains: &'a ControlGains,
    pub params: &'a QuadrotorParams,
    pub control_dt: f64,
}

/// Parameter changes a tuner requests; applied from the next step on.
#[derive(Debug, Clone, Default)]
pub struct TunerUpdate {
    pub theta: Option<ThetaParams>,
    pub gains: Option<ControlGains>,
}

impl TunerUpdate {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Online parameter adaptation hook, called once per control step while the
/// estimation window is active.
pub trait Tuner {
    /// Whether the driver should run the sensitivity recursion this step.
    fn wants_gradient(&self) -> bool {
        false
    }

    fn observe(&mut self, ctx: &TunerContext<'_>) -> Result<TunerUpdate, EpisodeError>;
}

/// Fixed-parameter runs: no gradients, no updates.
pub struct NoTuner;

impl Tuner for NoTuner {
    fn observe(&mut self, _ctx: &TunerContext<'_>) -> Result<TunerUpdate, EpisodeError> {
        Ok(TunerUpdate::none())
    }
}

/// Result of a closed-loop episode: the (possibly partial) log, the failure
/// that ended it early if any, and the final parameters.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub log: EpisodeLog,
    pub failure: Option<EpisodeError>,
    pub theta_final: ThetaParams,
    pub gains_final: ControlGains,
}

impl EpisodeOutcome {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Run one closed-loop episode.
///
/// Per control step, in order: sample the measurement (noise drawn first),
/// solve the horizon problem, optionally run the sensitivity recursion, let
/// the tuner update parameters, compute the control from the newest estimate,
/// then advance the truth with the profile disturbance plus held process
/// noise. Estimator, gradient, or controller failures abort the episode and
/// are reported in the outcome together with the partial log.
pub fn run_closed_loop(
    setup: &EpisodeSetup,
    theta0: &ThetaParams,
    gains0: &ControlGains,
    tuner: &mut dyn Tuner,
) -> Result<EpisodeOutcome, ScenarioError> {
    setup.validate()?;
    let mut theta = theta0.clone();
    let mut gains = gains0.clone();
    if let Err(e) = theta.validate() {
        return Err(ScenarioError::BadDisturbance(format!("initial weights invalid: {e}")));
    }

    let steps = setup.sim.steps();
    let substeps = setup.sim.substeps();
    let sigma_m = setup.sim.measurement_noise_variance.sqrt();
    let sigma_p = setup.sim.process_noise_variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.sim.seed);

    let model = QuadrotorModel::new(setup.params.clone(), setup.sim.control_dt);
    let initial_reference = setup.reference.evaluate(0.0);
    let mut x_true = rest_state(&initial_reference.position);
    let prior = DVector::from_column_slice(x_true.as_slice());
    let mut window = SlidingWindow::new(model, setup.horizon, prior);
    let mut references: VecDeque<ReferencePoint> = VecDeque::with_capacity(setup.horizon);

    let mut log = EpisodeLog::default();
    let mut failure = None;

    'episode: for step in 0..steps {
        let time = step as f64 * setup.sim.control_dt;
        let reference = setup.reference.evaluate(time);

        // Measurement draws come first in the stream, then process draws.
        let mut y = measure(&x_true);
        for i in 0..NY {
            let xi: f64 = rng.sample(StandardNormal);
            y[i] += sigma_m * xi;
        }
        let mut process = NoiseVec::zeros();
        for i in 0..6 {
            let xi: f64 = rng.sample(StandardNormal);
            process[i] = sigma_p * xi;
        }

        window.push_measurement(DVector::from_column_slice(y.as_slice()));
        if references.len() == setup.horizon {
            references.pop_front();
        }
        references.push_back(reference.clone());

        let mut estimate = StateVec::from_column_slice(window.prior().as_slice());
        let mut kkt_residual = 0.0;
        let mut solver_iterations = 0;
        let mut loss = 0.0;
        let mut solved = None;

        let maybe_problem = match window.problem(&theta) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(EpisodeError::Theta(e));
                break 'episode;
            }
        };
        if let Some(problem) = maybe_problem {
            let warm = window.warm_start();
            match mhe::solve(&problem, warm.as_ref(), &setup.solver) {
                Ok(solution) => {
                    let newest = solution.states.last().expect("solution has states");
                    if newest.iter().any(|v| !v.is_finite()) {
                        failure = Some(EpisodeError::Diverged { step });
                        break 'episode;
                    }
                    estimate = StateVec::from_column_slice(newest.as_slice());
                    kkt_residual = solution.kkt_residual;
                    solver_iterations = solution.iterations;

                    let refs: Vec<ReferencePoint> = references.iter().cloned().collect();
                    loss = tracking_loss(&solution.states, &refs, &LossWeights::default()).total;

                    let gradient = if tuner.wants_gradient() && solution.converged {
                        match build_diff_kkt(&problem, &solution, &theta)
                            .and_then(|m| kalman_gradient(&m))
                        {
                            Ok(g) => Some(g),
                            Err(e) => {
                                failure = Some(EpisodeError::Gradient { step, source: e });
                                break 'episode;
                            }
                        }
                    } else {
                        None
                    };

                    let ctx = TunerContext {
                        step,
                        time,
                        problem: &problem,
                        solution: &solution,
                        references: refs.as_slice(),
                        gradient: gradient.as_ref(),
                        theta: &theta,
                        gains: &gains,
                        params: &setup.params,
                        control_dt: setup.sim.control_dt,
                    };
                    match tuner.observe(&ctx) {
                        Ok(update) => {
                            if let Some(t) = update.theta {
                                theta = t;
                            }
                            if let Some(g) = update.gains {
                                gains = g;
                            }
                        }
                        Err(e) => {
                            failure = Some(e);
                            break 'episode;
                        }
                    }
                    solved = Some(solution);
                }
                Err(e) => {
                    failure = Some(EpisodeError::Solver { step, source: e });
                    break 'episode;
                }
            }
        }

        let control = match closed_loop_control(setup.controller, &reference, &estimate, &gains, &setup.params)
        {
            Ok(c) => c,
            Err(e) => {
                failure = Some(EpisodeError::Control { step, source: e });
                break 'episode;
            }
        };
        window.push_control(control.clone());
        if let Some(solution) = solved {
            window.record_solution(solution);
        }

        let d_logged = evaluate_disturbance(&setup.disturbance, time, &x_true);
        log.push(StepRecord {
            step,
            time,
            reference: reference.clone(),
            truth: x_true,
            measurement: y,
            estimate,
            control: control.u,
            wrench: control.wrench.clone(),
            disturbance_true: d_logged,
            kkt_residual,
            solver_iterations,
            saturated_motors: control.saturated,
            loss,
            theta: theta.flatten().as_slice().to_vec(),
        });

        match setup.truth {
            TruthIntegrator::Rk4Substeps => {
                for sub in 0..substeps {
                    let t_sub = time + sub as f64 * setup.sim.sim_dt;
                    let d_true = evaluate_disturbance(&setup.disturbance, t_sub, &x_true) + process;
                    x_true = rigid_body::rk4_step(
                        &x_true,
                        &control,
                        &d_true,
                        setup.sim.sim_dt,
                        &setup.params,
                    );
                }
            }
            TruthIntegrator::EstimatorModel => {
                let d_true = evaluate_disturbance(&setup.disturbance, time, &x_true) + process;
                x_true.fixed_rows_mut::<6>(DIST_F).copy_from(&d_true);
                x_true = rigid_body::euler_step(
                    &x_true,
                    &control,
                    &NoiseVec::zeros(),
                    setup.sim.control_dt,
                    &setup.params,
                );
            }
        }
        if x_true.iter().any(|v| !v.is_finite()) {
            failure = Some(EpisodeError::Diverged { step });
            break 'episode;
        }
    }

    Ok(EpisodeOutcome { log, failure, theta_final: theta, gains_final: gains })
}

fn closed_loop_control(
    kind: ClosedLoopController,
    reference: &ReferencePoint,
    estimate: &StateVec,
    gains: &ControlGains,
    params: &QuadrotorParams,
) -> Result<ControlInput, ControlError> {
    match kind {
        ClosedLoopController::Geometric => geometric_control(reference, estimate, gains, params),
        ClosedLoopController::PdCompensated => {
            let d_f = estimate.fixed_rows::<3>(DIST_F).into_owned();
            pd_baseline(reference, estimate, &d_f, gains, params)
        }
        ClosedLoopController::PdUncompensated => {
            pd_baseline(reference, estimate, &Vector3::zeros(), gains, params)
        }
    }
}

/// The [`ControllerKind`] whose Jacobians describe a closed-loop controller
/// choice (the uncompensated baseline shares the PD structure).
pub fn jacobian_kind(controller: ClosedLoopController) -> ControllerKind {
    match controller {
        ClosedLoopController::Geometric => ControllerKind::Geometric,
        ClosedLoopController::PdCompensated | ClosedLoopController::PdUncompensated => {
            ControllerKind::PdBaseline
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemniscate_starts_at_rest_on_the_ground() {
        let p = LemniscateParams::default();
        let r = lemniscate_reference(0.0, &p);
        assert_eq!(r.position, Vector3::zeros());
        assert_eq!(r.velocity, Vector3::zeros());
        assert_eq!(r.acceleration, Vector3::zeros());
        assert!((r.heading.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lemniscate_velocity_and_acceleration_match_finite_differences() {
        let p = LemniscateParams::default();
        let h = 1e-6;
        // Spans the takeoff blend, the transition, and cruise.
        for &t in &[0.5, 1.3, 1.999, 2.5, 4.0, 7.9] {
            let plus = lemniscate_reference(t + h, &p);
            let minus = lemniscate_reference(t - h, &p);
            let here = lemniscate_reference(t, &p);
            let v_fd = (plus.position - minus.position) / (2.0 * h);
            let a_fd = (plus.velocity - minus.velocity) / (2.0 * h);
            let v_err = (here.velocity - v_fd).norm() / v_fd.norm().max(1.0);
            let a_err = (here.acceleration - a_fd).norm() / a_fd.norm().max(1.0);
            assert!(v_err < 1e-6, "velocity FD mismatch {v_err} at t={t}");
            assert!(a_err < 1e-5, "acceleration FD mismatch {a_err} at t={t}");
        }
    }

    #[test]
    fn lemniscate_is_periodic_after_takeoff() {
        let p = LemniscateParams::default();
        for &t in &[3.5, 4.7, 6.0] {
            let a = lemniscate_reference(t, &p);
            let b = lemniscate_reference(t + p.period, &p);
            assert!((a.position - b.position).norm() < 1e-9);
            assert!((a.velocity - b.velocity).norm() < 1e-9);
        }
    }

    #[test]
    fn lemniscate_heading_is_tangent_aligned() {
        let p = LemniscateParams::default();
        let r = lemniscate_reference(4.0, &p);
        let tangent = Vector3::new(r.velocity.x, r.velocity.y, 0.0).normalize();
        assert!((r.heading.dot(&tangent) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sim_config_rejects_non_divisible_steps() {
        let mut c = SimConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.substeps(), 2);
        assert_eq!(c.steps(), 1571);
        c.sim_dt = 0.003;
        assert!(matches!(c.validate(), Err(ScenarioError::StepMismatch { .. })));
    }

    #[test]
    fn square_wave_alternates_with_zero_mean() {
        let w = DisturbanceProfile::SquareWave(SquareWave { axis: 2, amplitude: 3.5, period: 4.0 });
        let x = rest_state(&Vector3::zeros());
        assert_eq!(evaluate_disturbance(&w, 0.1, &x)[2], 3.5);
        assert_eq!(evaluate_disturbance(&w, 2.1, &x)[2], -3.5);
        let n = 4000;
        let mean: f64 =
            (0..n).map(|i| evaluate_disturbance(&w, 4.0 * i as f64 / n as f64, &x)[2]).sum::<f64>()
                / n as f64;
        assert!(mean.abs() < 1e-12, "square-wave mean {mean}");
    }

    #[test]
    fn sinusoid_starts_at_zero_without_phase() {
        let s = DisturbanceProfile::Sinusoid(Sinusoid {
            axis: 0,
            amplitude: 1.0,
            period: 2.5,
            phase: 0.0,
        });
        let x = rest_state(&Vector3::zeros());
        assert_eq!(evaluate_disturbance(&s, 0.0, &x)[0], 0.0);
        assert!((evaluate_disturbance(&s, 0.625, &x)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ground_effect_matches_calibration_and_decays() {
        let params = QuadrotorParams::default();
        let g = DisturbanceProfile::GroundEffect(GroundEffect::calibrated(&params));
        let at = |height: f64| {
            let x = rest_state(&Vector3::new(0.0, 0.0, -height));
            evaluate_disturbance(&g, 0.0, &x)[2]
        };
        // Lift is upward: negative z-force in NED, ≈ 2 N at 0.2 m.
        assert!((-at(0.2) - 2.0).abs() < 0.04, "calibration lift {} at 0.2 m", -at(0.2));
        assert_eq!(at(1.5), 0.0);
        // Monotone decay with height and capped near the ground.
        assert!(-at(0.12) > -at(0.2) && -at(0.2) > -at(0.5));
        assert!(-at(0.05) <= 5.0 + 1e-12);
    }

    #[test]
    fn payload_release_switches_off_at_release_time() {
        let p = DisturbanceProfile::PayloadRelease(PayloadRelease::new(5.87, 20.5));
        let x = rest_state(&Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(evaluate_disturbance(&p, 20.0, &x)[2], 5.87);
        assert_eq!(evaluate_disturbance(&p, 21.0, &x)[2], 0.0);
    }

    #[test]
    fn downwash_plateau_and_silence_outside_window() {
        let d = DisturbanceProfile::Downwash(Downwash {
            onset: 2.0,
            duration: 3.0,
            peak: 4.0,
            ramp: 0.5,
            noise_amplitude: 0.0,
        });
        let x = rest_state(&Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(evaluate_disturbance(&d, 1.0, &x)[2], 0.0);
        assert!((evaluate_disturbance(&d, 3.5, &x)[2] - 4.0).abs() < 1e-12);
        assert_eq!(evaluate_disturbance(&d, 7.0, &x)[2], 0.0);
    }

    #[test]
    fn composite_sums_parts() {
        let params = QuadrotorParams::default();
        let c = training_composite(&params);
        assert!(c.validate().is_ok());
        let x = rest_state(&Vector3::new(0.0, 0.0, -2.0));
        let d = evaluate_disturbance(&c, 0.1, &x);
        let square = 3.5;
        let sin0 = (2.0 * std::f64::consts::PI * 0.1 / 2.5).sin();
        assert!((d[2] - square).abs() < 1e-12);
        assert!((d[0] - sin0).abs() < 1e-12);
        assert!(d[5].abs() > 0.0);
    }

    /// Noiseless zero-disturbance episode from a perfect initial estimate:
    /// the estimator must track the truth at sub-millimeter level (residual
    /// is pure Euler-vs-RK4 discretization), and the position-loop tracking
    /// error must stay at the level the attitude cascade supports — the
    /// desired thrust-axis rotation rate has no feedforward beyond the
    /// heading rate, which bounds achievable tracking on a curving path.
    #[test]
    fn noiseless_tracking_follows_the_lemniscate() {
        let params = QuadrotorParams::default();
        let mut setup = EpisodeSetup::baseline(params);
        setup.sim.measurement_noise_variance = 0.0;
        setup.sim.process_noise_variance = 0.0;
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.4, 0.8);
        let gains = ControlGains::default();
        let outcome = run_closed_loop(&setup, &theta, &gains, &mut NoTuner).unwrap();
        assert!(outcome.is_ok(), "episode failed: {:?}", outcome.failure);
        assert_eq!(outcome.log.len(), 1571);

        let mut est_sq = 0.0;
        for rec in &outcome.log.records {
            for i in 0..3 {
                est_sq += (rec.estimate[i] - rec.truth[i]).powi(2);
            }
        }
        let est_rms = (est_sq / outcome.log.len() as f64).sqrt();
        assert!(est_rms < 1e-3, "estimation RMS {est_rms} too large");

        let rms = outcome.log.position_rms();
        assert!(rms < 0.015, "tracking RMS {rms} too large");
    }

    #[test]
    fn seeded_episode_logs_are_byte_identical() {
        let params = QuadrotorParams::default();
        let mut setup = EpisodeSetup::baseline(params.clone());
        setup.sim.episode_duration = 1.0;
        setup.sim.seed = 42;
        setup.disturbance = training_composite(&params);
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.4, 0.8);
        let gains = ControlGains::default();

        let mut bytes = Vec::new();
        for _ in 0..2 {
            let outcome = run_closed_loop(&setup, &theta, &gains, &mut NoTuner).unwrap();
            assert!(outcome.is_ok(), "episode failed: {:?}", outcome.failure);
            let mut buf = Vec::new();
            outcome.log.write_csv(&mut buf).unwrap();
            bytes.push(buf);
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn estimator_model_truth_is_reconstructed_exactly() {
        let params = QuadrotorParams::default();
        let mut setup = EpisodeSetup::baseline(params);
        setup.sim.measurement_noise_variance = 0.0;
        setup.sim.process_noise_variance = 0.0;
        setup.sim.episode_duration = 1.0;
        setup.truth = TruthIntegrator::EstimatorModel;
        setup.horizon = 10;
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.4, 0.8);
        let gains = ControlGains::default();
        let outcome = run_closed_loop(&setup, &theta, &gains, &mut NoTuner).unwrap();
        assert!(outcome.is_ok(), "episode failed: {:?}", outcome.failure);
        let worst = outcome
            .log
            .records
            .iter()
            .map(|r| (r.estimate - r.truth).amax())
            .fold(0.0_f64, f64::max);
        assert!(worst < 1e-6, "worst estimate-truth deviation {worst}");
    }
}
