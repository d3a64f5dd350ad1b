//! Determinism verification: re-run a recorded episode from its own
//! artifacts and demand the regenerated CSV matches byte-for-byte.

use crate::CliError;
use dmhe_core::config::HarnessConfig;
use dmhe_core::episode::{RunManifest, CSV_SCHEMA_VERSION};
use dmhe_core::scenarios::{run_closed_loop, NoTuner};
use std::path::Path;

pub fn run(out: &Path) -> Result<(), CliError> {
    let config = HarnessConfig::load(&out.join("config.json")).map_err(CliError::config)?;
    let manifest: RunManifest = crate::read_json(&out.join("manifest.json"))?;
    if manifest.csv_schema_version != CSV_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "recorded CSV schema v{} does not match this binary's v{CSV_SCHEMA_VERSION}",
            manifest.csv_schema_version
        )));
    }
    if manifest.seed != config.sim.seed {
        return Err(CliError::Config(format!(
            "manifest seed {} disagrees with the recorded config seed {}",
            manifest.seed, config.sim.seed
        )));
    }

    let csv_path = out.join("episode.csv");
    let recorded = std::fs::read(&csv_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", csv_path.display())))?;

    let setup = config.setup().map_err(CliError::config)?;
    let outcome = run_closed_loop(&setup, &config.theta, &config.gains, &mut NoTuner)
        .map_err(CliError::config)?;
    let regenerated = super::simulate::csv_bytes(&outcome)?;

    if regenerated == recorded {
        println!(
            "replay: episode.csv reproduced byte-for-byte ({} bytes, {} steps, seed {})",
            recorded.len(),
            outcome.log.len(),
            manifest.seed
        );
        if let Some(failure) = &outcome.failure {
            println!("note: the recorded episode ends in a failure ({failure}), reproduced too");
        }
        Ok(())
    } else {
        let at = regenerated
            .iter()
            .zip(recorded.iter())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| regenerated.len().min(recorded.len()));
        Err(CliError::Verification(format!(
            "episode.csv diverges from the recording at byte {at} \
             (recorded {} bytes, regenerated {} bytes)",
            recorded.len(),
            regenerated.len()
        )))
    }
}
