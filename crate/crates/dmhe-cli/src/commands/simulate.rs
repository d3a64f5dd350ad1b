//! One recorded closed-loop episode with fixed parameters.
//!
//! Artifacts in the output directory:
//! * `config.json`   — the effective configuration (overrides applied)
//! * `episode.csv`   — per-step log, float format round-trips f64 exactly
//! * `manifest.json` — schema version, seed, scenario, θ, summary statistics

use crate::CliError;
use dmhe_core::config::HarnessConfig;
use dmhe_core::episode::RunManifest;
use dmhe_core::scenarios::{run_closed_loop, EpisodeOutcome, NoTuner};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub fn run(config: &HarnessConfig, scenario: &str, out: &Path) -> Result<(), CliError> {
    let setup = config.setup().map_err(CliError::config)?;
    let outcome = run_closed_loop(&setup, &config.theta, &config.gains, &mut NoTuner)
        .map_err(CliError::config)?;

    write_artifacts(config, scenario, out, &outcome)?;
    println!(
        "simulate: {} steps, position rms {:.4} m, disturbance rms {:.4}, mean loss {:.6}",
        outcome.log.len(),
        outcome.log.position_rms(),
        outcome.log.disturbance_rms(),
        outcome.log.mean_loss(),
    );
    println!("artifacts: {}", out.display());

    match &outcome.failure {
        None => Ok(()),
        Some(failure) => Err(CliError::Divergence(format!(
            "episode aborted after {} steps: {failure}",
            outcome.log.len()
        ))),
    }
}

/// Also used by replay to regenerate the log bytes.
pub fn csv_bytes(outcome: &EpisodeOutcome) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    outcome
        .log
        .write_csv(&mut buf)
        .map_err(|e| CliError::Config(format!("cannot serialize episode log: {e}")))?;
    Ok(buf)
}

fn write_artifacts(
    config: &HarnessConfig,
    scenario: &str,
    out: &Path,
    outcome: &EpisodeOutcome,
) -> Result<(), CliError> {
    config.save(&out.join("config.json")).map_err(CliError::config)?;

    let csv_path = out.join("episode.csv");
    let file = File::create(&csv_path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", csv_path.display())))?;
    let mut writer = BufWriter::new(file);
    outcome
        .log
        .write_csv(&mut writer)
        .and_then(|()| writer.flush())
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", csv_path.display())))?;

    let manifest = RunManifest::new(
        config.sim.seed,
        scenario,
        config.theta.clone(),
        outcome.theta_final.clone(),
        &outcome.log,
    );
    crate::write_json(&out.join("manifest.json"), &manifest)
}
