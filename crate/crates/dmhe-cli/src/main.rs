//! `dmhe` — command-line harness around the dmhe-core toolkit.
//!
//! One subcommand per invocation:
//!
//! * `simulate`  — run one closed-loop episode, record a CSV log + manifest
//! * `train`     — tune the estimator weights across episodes (gradient
//!                 descent on θ, or the neural tuning policy with `--policy`)
//! * `gradcheck` — verify the analytic weight sensitivities against
//!                 independent oracles, emitting a machine-readable report
//! * `bench`     — time the sensitivity recursion across horizon lengths
//! * `replay`    — re-run a recorded episode and byte-compare the log
//!
//! Exit codes: 0 success, 1 configuration error, 2 verification failure,
//! 3 episode divergence. Every command is deterministic given the same
//! configuration and seed, except `bench` (wall-clock timings).

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use dmhe_core::config::HarnessConfig;
use dmhe_core::scenarios::{
    training_composite, DisturbanceProfile, Downwash, PayloadRelease, ReferenceProfile,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "dmhe",
    version,
    about = "Moving-horizon disturbance estimation with differentiable auto-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving all artifacts of this invocation.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Named preset overriding the configured reference/disturbance pair:
    /// composite, hover, noiseless, payload, downwash.
    #[arg(long, global = true)]
    scenario: Option<String>,

    /// Worker threads for commands that evaluate independent fixtures.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one closed-loop episode and record it.
    Simulate,
    /// Tune the estimator weights across episodes until the mean loss
    /// plateaus or the episode cap is reached.
    Train {
        /// Continue from the training state already present in --out.
        #[arg(long)]
        resume: bool,
        /// Train the neural tuning policy instead of descending θ directly.
        #[arg(long)]
        policy: bool,
    },
    /// Check the analytic sensitivities against a direct sparse solve, finite
    /// differences through the solver, and the differentiated-system residual.
    Gradcheck {
        /// Number of horizon problems captured from the episode and checked.
        #[arg(long, default_value_t = 4)]
        fixtures: usize,
        /// Self-test of the checker: negate the weight-derivative right-hand
        /// side before the recursion, which must make the checks fail.
        #[arg(long, hide = true)]
        flip_e_sign: bool,
    },
    /// Time one sensitivity-recursion pass per control step over an episode,
    /// for horizons 10 through 50.
    Bench {
        /// Episode length per horizon value, seconds.
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
    },
    /// Re-run the episode recorded in --out and verify the CSV log is
    /// reproduced byte-for-byte.
    Replay,
}

/// Command-level failure, carrying the process exit code.
#[derive(Debug)]
enum CliError {
    /// Bad configuration, arguments, or unreadable/unwritable files.
    Config(String),
    /// A verification command found a mismatch.
    Verification(String),
    /// The simulated vehicle or the estimator diverged.
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Verification(_) => 2,
            Self::Divergence(_) => 3,
        }
    }

    fn config(e: impl fmt::Display) -> Self {
        Self::Config(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Verification(msg) => write!(f, "verification failure: {msg}"),
            Self::Divergence(msg) => write!(f, "divergence: {msg}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Replay = cli.command {
        // Replay takes everything from the recorded artifacts; the config,
        // seed, and scenario flags do not apply.
        return commands::replay::run(&cli.out);
    }

    let (config, scenario) = effective_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| {
        CliError::Config(format!("cannot create output directory {}: {e}", cli.out.display()))
    })?;

    match &cli.command {
        Command::Simulate => commands::simulate::run(&config, &scenario, &cli.out),
        Command::Train { resume, policy } => {
            commands::train::run(&config, &scenario, &cli.out, *resume, *policy)
        }
        Command::Gradcheck { fixtures, flip_e_sign } => commands::gradcheck::run(
            &config,
            &scenario,
            &cli.out,
            *fixtures,
            *flip_e_sign,
            cli.workers.max(1),
        ),
        Command::Bench { duration } => commands::bench::run(&config, &cli.out, *duration),
        Command::Replay => unreachable!("handled above"),
    }
}

/// The configuration this invocation actually runs: file (or defaults) with
/// the scenario preset and seed override applied, re-validated.
fn effective_config(cli: &Cli) -> Result<(HarnessConfig, String), CliError> {
    let mut config = match &cli.config {
        Some(path) => HarnessConfig::load(path).map_err(CliError::config)?,
        None => HarnessConfig::default(),
    };
    let scenario_name = cli.scenario.clone().unwrap_or_else(|| "config".to_string());
    if let Some(name) = &cli.scenario {
        apply_scenario(&mut config, name)?;
    }
    if let Some(seed) = cli.seed {
        config.sim.seed = seed;
    }
    config.validate().map_err(CliError::Config)?;
    Ok((config, scenario_name))
}

fn apply_scenario(config: &mut HarnessConfig, name: &str) -> Result<(), CliError> {
    let hover = ReferenceProfile::Hover { position: [0.0, 0.0, -1.5] };
    match name {
        // Figure-eight tracking through the layered training disturbance.
        "composite" => {
            config.reference = ReferenceProfile::Lemniscate(Default::default());
            config.disturbance = training_composite(&config.params);
        }
        // Undisturbed hover.
        "hover" => {
            config.reference = hover;
            config.disturbance = DisturbanceProfile::None;
        }
        // Configured reference with every stochastic input removed.
        "noiseless" => {
            config.disturbance = DisturbanceProfile::None;
            config.sim.measurement_noise_variance = 0.0;
            config.sim.process_noise_variance = 0.0;
        }
        // Hover holding a suspended payload that drops mid-episode.
        "payload" => {
            config.reference = hover;
            config.disturbance =
                DisturbanceProfile::PayloadRelease(PayloadRelease::new(5.87, 20.5));
            config.sim.episode_duration = 23.0;
        }
        // Hover under a downwash push from a vehicle passing overhead.
        "downwash" => {
            config.reference = hover;
            config.disturbance = DisturbanceProfile::Downwash(Downwash {
                onset: 5.0,
                duration: 3.0,
                peak: 4.0,
                ramp: 0.5,
                noise_amplitude: 0.05,
            });
            config.sim.episode_duration = 12.0;
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown scenario '{other}' \
                 (available: composite, hover, noiseless, payload, downwash)"
            )))
        }
    }
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
}
