//! Multi-episode weight tuning.
//!
//! Default mode descends θ directly: every control step the closed-loop
//! driver computes the estimate sensitivities, the tuner takes one projected
//! gradient step, and θ carries over to the next episode. `--policy` instead
//! trains the neural tuning policy (two small networks mapping the tracking
//! error to bounded θ ratios and position-loop gains).
//!
//! Episodes run with seeds `base + episode` until the mean per-step loss
//! changes by less than the configured relative tolerance over two
//! consecutive episode transitions, or the episode cap is reached. The full
//! training state is persisted after every episode, so an interrupted run
//! resumed with `--resume` reproduces the uninterrupted run bit-for-bit.
//!
//! Artifacts: `config.json`, `theta_trace.csv` (θ after every episode),
//! `theta_final.json`, `train_state.json`, `train_manifest.json`, and in
//! policy mode `policy_theta.{json,bin}` / `policy_gains.{json,bin}`.

use crate::CliError;
use dmhe_core::config::HarnessConfig;
use dmhe_core::control::{ControlGains, ControllerKind};
use dmhe_core::episode::CSV_SCHEMA_VERSION;
use dmhe_core::learning::{train_episode, PolicyTuner};
use dmhe_core::scenarios::{run_closed_loop, ClosedLoopController, EpisodeOutcome};
use dmhe_core::weights::ThetaParams;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    next_episode: usize,
    mean_losses: Vec<f64>,
    theta: ThetaParams,
    gains: ControlGains,
    /// Present in `--policy` mode: networks, optimizer moments, bounds.
    policy: Option<PolicyTuner>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainManifest {
    csv_schema_version: u32,
    package_version: String,
    seed: u64,
    scenario: String,
    mode: String,
    episodes_run: usize,
    converged: bool,
    mean_losses: Vec<f64>,
}

pub fn run(
    config: &HarnessConfig,
    scenario: &str,
    out: &Path,
    resume: bool,
    policy: bool,
) -> Result<(), CliError> {
    let base_setup = config.setup().map_err(CliError::config)?;
    let state_path = out.join("train_state.json");
    let trace_path = out.join("theta_trace.csv");

    let mut state = if resume {
        let state: TrainState = crate::read_json(&state_path)?;
        if state.policy.is_some() != policy {
            return Err(CliError::Config(
                "resume mode mismatch: the recorded state and the --policy flag disagree".into(),
            ));
        }
        state
    } else {
        let tuner = policy.then(|| {
            PolicyTuner::new(
                &config.theta,
                jacobian_kind(config.controller),
                config.loss,
                config.sim.seed,
            )
        });
        let state = TrainState {
            next_episode: 0,
            mean_losses: Vec::new(),
            theta: config.theta.clone(),
            gains: config.gains,
            policy: tuner,
        };
        std::fs::write(&trace_path, trace_header(&state.theta)).map_err(|e| {
            CliError::Config(format!("cannot write {}: {e}", trace_path.display()))
        })?;
        state
    };

    config.save(&out.join("config.json")).map_err(CliError::config)?;

    let cap = config.training.max_episodes;
    let tol = config.training.convergence_rel_tol;
    while state.next_episode < cap && !converged(&state.mean_losses, tol) {
        let episode = state.next_episode;
        let mut setup = base_setup.clone();
        setup.sim.seed = config.sim.seed.wrapping_add(episode as u64);

        let outcome = run_one(&setup, config, &mut state).map_err(CliError::config)?;
        let failure = outcome.failure;
        let mean_loss = outcome.log.mean_loss();
        state.theta = outcome.theta_final;
        state.gains = outcome.gains_final;
        state.mean_losses.push(mean_loss);
        state.next_episode += 1;

        append_trace(&trace_path, episode, setup.sim.seed, mean_loss, &state.theta)?;
        persist(out, config, scenario, &state, policy)?;

        if let Some(failure) = failure {
            return Err(CliError::Divergence(format!(
                "training episode {episode} aborted: {failure}"
            )));
        }
        println!("episode {episode}: mean loss {mean_loss:.6}");
    }

    let done = converged(&state.mean_losses, tol);
    persist(out, config, scenario, &state, policy)?;
    println!(
        "train: {} episode(s), {}",
        state.next_episode,
        if done { "loss plateaued" } else { "episode cap reached" }
    );
    println!("artifacts: {}", out.display());
    Ok(())
}

fn run_one(
    setup: &dmhe_core::scenarios::EpisodeSetup,
    config: &HarnessConfig,
    state: &mut TrainState,
) -> Result<EpisodeOutcome, dmhe_core::scenarios::ScenarioError> {
    match &mut state.policy {
        Some(tuner) => run_closed_loop(setup, &state.theta, &state.gains, tuner),
        None => train_episode(setup, &state.theta, &state.gains, &config.rates, &config.loss),
    }
}

/// The loss has plateaued when the relative change stays below `tol` for two
/// consecutive episode transitions.
fn converged(losses: &[f64], tol: f64) -> bool {
    let n = losses.len();
    if n < 3 {
        return false;
    }
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    rel(losses[n - 1], losses[n - 2]) < tol && rel(losses[n - 2], losses[n - 3]) < tol
}

fn jacobian_kind(controller: ClosedLoopController) -> ControllerKind {
    match controller {
        ClosedLoopController::Geometric => ControllerKind::Geometric,
        ClosedLoopController::PdCompensated | ClosedLoopController::PdUncompensated => {
            ControllerKind::PdBaseline
        }
    }
}

fn trace_header(theta: &ThetaParams) -> String {
    let mut line = String::from("episode,seed,mean_loss");
    for i in 0..theta.flatten().len() {
        let _ = write!(line, ",theta{i}");
    }
    line.push('\n');
    line
}

fn append_trace(
    path: &Path,
    episode: usize,
    seed: u64,
    mean_loss: f64,
    theta: &ThetaParams,
) -> Result<(), CliError> {
    let mut line = format!("{episode},{seed},{mean_loss:.17e}");
    for v in theta.flatten().iter() {
        let _ = write!(line, ",{v:.17e}");
    }
    line.push('\n');
    let mut existing = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    existing.push_str(&line);
    std::fs::write(path, existing)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn persist(
    out: &Path,
    config: &HarnessConfig,
    scenario: &str,
    state: &TrainState,
    policy: bool,
) -> Result<(), CliError> {
    crate::write_json(&out.join("train_state.json"), state)?;
    crate::write_json(&out.join("theta_final.json"), &state.theta)?;
    if let Some(tuner) = &state.policy {
        tuner
            .theta_policy
            .save(&out.join("policy_theta"))
            .and_then(|()| tuner.gain_policy.save(&out.join("policy_gains")))
            .map_err(|e| CliError::Config(format!("cannot write policy files: {e}")))?;
    }
    let manifest = TrainManifest {
        csv_schema_version: CSV_SCHEMA_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.sim.seed,
        scenario: scenario.to_string(),
        mode: if policy { "neural_policy" } else { "gradient_descent" }.to_string(),
        episodes_run: state.next_episode,
        converged: converged(&state.mean_losses, config.training.convergence_rel_tol),
        mean_losses: state.mean_losses.clone(),
    };
    crate::write_json(&out.join("train_manifest.json"), &manifest)
}
