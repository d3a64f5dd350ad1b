//! Wall-clock timing of the sensitivity recursion.
//!
//! For each horizon length, one closed-loop episode runs on the configured
//! scenario and every full-horizon step times one pass of building the
//! differentiated optimality system plus the filter/smoother recursion — the
//! work a tuner adds per control step. `bench.csv` lists the mean per-pass
//! time next to the reference envelope; this is the one command whose output
//! is not deterministic.

use crate::CliError;
use dmhe_core::config::HarnessConfig;
use dmhe_core::gradient::{build_diff_kkt, kalman_gradient};
use dmhe_core::scenarios::{run_closed_loop, EpisodeError, Tuner, TunerContext, TunerUpdate};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Horizon sweep and the reference mean per-pass milliseconds for each entry.
const SWEEP: [(usize, f64); 5] =
    [(10, 3.0), (20, 5.6), (30, 8.7), (40, 11.9), (50, 13.1)];
const BENCH_CSV_SCHEMA_VERSION: u32 = 1;

struct TimingTuner {
    horizon: usize,
    nanos: Vec<u128>,
}

impl Tuner for TimingTuner {
    fn observe(&mut self, ctx: &TunerContext<'_>) -> Result<TunerUpdate, EpisodeError> {
        if ctx.problem.horizon == self.horizon {
            let start = Instant::now();
            let matrices = build_diff_kkt(ctx.problem, ctx.solution, ctx.theta)
                .map_err(|e| EpisodeError::Tuner { step: ctx.step, message: e.to_string() })?;
            let trajectory = kalman_gradient(&matrices)
                .map_err(|e| EpisodeError::Tuner { step: ctx.step, message: e.to_string() })?;
            self.nanos.push(start.elapsed().as_nanos());
            std::hint::black_box(&trajectory);
        }
        Ok(TunerUpdate::none())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchRow {
    horizon: usize,
    samples: usize,
    mean_ms: f64,
    reference_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchManifest {
    bench_csv_schema_version: u32,
    package_version: String,
    seed: u64,
    episode_seconds: f64,
    theta_dim: usize,
    rows: Vec<BenchRow>,
}

pub fn run(config: &HarnessConfig, out: &Path, duration: f64) -> Result<(), CliError> {
    if duration <= 0.0 {
        return Err(CliError::Config("bench duration must be positive".into()));
    }
    let base_setup = config.setup().map_err(CliError::config)?;
    let theta_dim = config.theta.flatten().len();

    let mut rows = Vec::with_capacity(SWEEP.len());
    for (horizon, reference_ms) in SWEEP {
        let mut setup = base_setup.clone();
        setup.horizon = horizon;
        setup.sim.episode_duration = duration;
        let mut tuner = TimingTuner { horizon, nanos: Vec::new() };
        let outcome = run_closed_loop(&setup, &config.theta, &config.gains, &mut tuner)
            .map_err(CliError::config)?;
        if let Some(failure) = &outcome.failure {
            return Err(CliError::Divergence(format!(
                "bench episode at horizon {horizon} aborted: {failure}"
            )));
        }
        if tuner.nanos.is_empty() {
            return Err(CliError::Config(format!(
                "bench episode too short to fill horizon {horizon}; raise --duration"
            )));
        }
        let samples = tuner.nanos.len();
        let mean_ms =
            tuner.nanos.iter().sum::<u128>() as f64 / samples as f64 / 1.0e6;
        println!(
            "horizon {horizon:2}: {mean_ms:7.3} ms over {samples} passes (reference {reference_ms} ms)"
        );
        rows.push(BenchRow { horizon, samples, mean_ms, reference_ms });
    }

    let monotonic = rows.windows(2).all(|w| w[1].mean_ms > w[0].mean_ms);
    let last = rows.last().expect("sweep is non-empty");
    let within_envelope = last.mean_ms <= 2.0 * last.reference_ms;
    println!(
        "scaling: {}, horizon-50 envelope (≤{:.1} ms): {}",
        if monotonic { "monotonic in the horizon" } else { "NOT monotonic (noisy machine?)" },
        2.0 * last.reference_ms,
        if within_envelope { "met" } else { "MISSED" },
    );

    let mut csv = String::from("horizon,samples,mean_ms,reference_ms\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{}",
            row.horizon, row.samples, row.mean_ms, row.reference_ms
        );
    }
    let csv_path = out.join("bench.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", csv_path.display())))?;

    let manifest = BenchManifest {
        bench_csv_schema_version: BENCH_CSV_SCHEMA_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.sim.seed,
        episode_seconds: duration,
        theta_dim,
        rows,
    };
    crate::write_json(&out.join("bench_manifest.json"), &manifest)?;
    println!("artifacts: {}", out.display());
    Ok(())
}
