//! Episode recording: one [`StepRecord`] per control step, CSV export with a
//! fixed column schema, and a JSON run manifest.
//!
//! The CSV writer is deliberately hand-rolled with a fixed float format
//! (`{:.17e}`, which round-trips f64 exactly): byte-identical output for
//! identical runs is a verification primitive here (the replay command
//! re-runs an episode and compares files), not a nicety. Timestamps appear
//! only in the manifest, never in the CSV.
//!
//! All in-memory records are NED/FRD like the rest of the core. The CSV
//! export — and only the export — converts to ENU/FLU so altitude and lift
//! plot positive-up: inertial vectors map through (x, y, z) → (y, x, −z),
//! body-frame vectors through (x, y, z) → (x, −y, −z), and the attitude
//! matrix picks up both changes of basis, which keeps it a proper rotation.

use crate::control::ReferencePoint;
use crate::rigid_body::{MeasVec, StateVec, Wrench, NX, NY};
use crate::weights::ThetaParams;
use nalgebra::{SVector, Vector4};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

/// Version of the CSV column layout; recorded in the manifest.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Everything observed at one control step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub reference: ReferencePoint,
    pub truth: StateVec,
    pub measurement: MeasVec,
    pub estimate: StateVec,
    /// Motor commands (squared rotor speeds).
    pub control: Vector4<f64>,
    /// Wrench realized by the (possibly clamped) motors.
    pub wrench: Wrench,
    /// True disturbance injected this step (force inertial, torque body).
    pub disturbance_true: SVector<f64, 6>,
    pub kkt_residual: f64,
    pub solver_iterations: usize,
    pub saturated_motors: u8,
    /// Horizon tracking loss at this step (zero until the window is active).
    pub loss: f64,
    /// Flat θ in effect when this step's estimate was produced.
    pub theta: Vec<f64>,
}

/// Time-indexed record of a closed-loop episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn push(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// RMS of the position tracking error over the episode.
    pub fn position_rms(&self) -> f64 {
        self.rms_over(|r| {
            let mut s = 0.0;
            for i in 0..3 {
                let e = r.truth[i] - r.reference.position[i];
                s += e * e;
            }
            s
        })
    }

    /// RMS of the disturbance estimation error (all six channels) over steps
    /// where an estimate exists.
    pub fn disturbance_rms(&self) -> f64 {
        self.rms_over(|r| {
            let mut s = 0.0;
            for i in 0..6 {
                let e = r.estimate[18 + i] - r.disturbance_true[i];
                s += e * e;
            }
            s
        })
    }

    /// Mean of the per-step losses over steps with an active window.
    pub fn mean_loss(&self) -> f64 {
        let active: Vec<f64> =
            self.records.iter().map(|r| r.loss).filter(|l| *l > 0.0).collect();
        if active.is_empty() {
            0.0
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        }
    }

    fn rms_over(&self, f: impl Fn(&StepRecord) -> f64) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.records.iter().map(&f).sum();
        (sum / self.records.len() as f64).sqrt()
    }

    /// Column names in CSV order.
    pub fn csv_header(theta_dim: usize) -> String {
        // Extended-state column names, reused for truth and estimate blocks;
        // named after the figure axes they plot against (z, d_fz, ...).
        fn state_cols(cols: &mut Vec<String>, prefix: &str, dist_prefix: &str) {
            for axis in ["x", "y", "z", "vx", "vy", "vz"] {
                cols.push(format!("{prefix}_{axis}"));
            }
            for i in 1..=3 {
                for j in 1..=3 {
                    cols.push(format!("{prefix}_r{i}{j}"));
                }
            }
            for axis in ["wx", "wy", "wz"] {
                cols.push(format!("{prefix}_{axis}"));
            }
            for axis in ["fx", "fy", "fz", "tx", "ty", "tz"] {
                cols.push(format!("{dist_prefix}_{axis}"));
            }
        }

        let mut cols: Vec<String> = vec!["step".into(), "time".into()];
        for (prefix, count) in [
            ("ref_p", 3),
            ("ref_v", 3),
            ("ref_a", 3),
            ("ref_b1", 3),
        ] {
            for i in 0..count {
                cols.push(format!("{prefix}{i}"));
            }
        }
        state_cols(&mut cols, "truth", "truth_d");
        for i in 0..NY {
            cols.push(format!("meas{i}"));
        }
        state_cols(&mut cols, "est", "dhat");
        for i in 0..4 {
            cols.push(format!("u{i}"));
        }
        cols.push("thrust".into());
        for axis in ["x", "y", "z"] {
            cols.push(format!("tau_{axis}"));
        }
        for axis in ["fx", "fy", "fz", "tx", "ty", "tz"] {
            cols.push(format!("d_{axis}"));
        }
        cols.extend(
            ["kkt_residual", "solver_iterations", "saturated_motors", "loss"]
                .map(String::from),
        );
        for i in 0..theta_dim {
            cols.push(format!("theta{i}"));
        }
        cols.join(",")
    }

    /// Write the full log as CSV in the ENU/FLU export frame. The float
    /// format round-trips f64 exactly.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let theta_dim = self.records.first().map_or(0, |r| r.theta.len());
        writeln!(out, "{}", Self::csv_header(theta_dim))?;
        let mut line = String::with_capacity(4096);
        for r in &self.records {
            let r = export_record(r);
            line.clear();
            line.push_str(&r.step.to_string());
            push_f(&mut line, r.time);
            for v in [&r.reference.position, &r.reference.velocity, &r.reference.acceleration, &r.reference.heading]
            {
                for i in 0..3 {
                    push_f(&mut line, v[i]);
                }
            }
            for i in 0..NX {
                push_f(&mut line, r.truth[i]);
            }
            for i in 0..NY {
                push_f(&mut line, r.measurement[i]);
            }
            for i in 0..NX {
                push_f(&mut line, r.estimate[i]);
            }
            for i in 0..4 {
                push_f(&mut line, r.control[i]);
            }
            push_f(&mut line, r.wrench.thrust);
            for i in 0..3 {
                push_f(&mut line, r.wrench.torque[i]);
            }
            for i in 0..6 {
                push_f(&mut line, r.disturbance_true[i]);
            }
            push_f(&mut line, r.kkt_residual);
            line.push(',');
            line.push_str(&r.solver_iterations.to_string());
            line.push(',');
            line.push_str(&r.saturated_motors.to_string());
            push_f(&mut line, r.loss);
            for v in &r.theta {
                push_f(&mut line, *v);
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn push_f(line: &mut String, v: f64) {
    use std::fmt::Write as _;
    line.push(',');
    let _ = write!(line, "{v:.17e}");
}

/// NED → ENU for the inertial 3-vector starting at `at`.
fn swap_inertial(buf: &mut [f64], at: usize) {
    buf.swap(at, at + 1);
    buf[at + 2] = -buf[at + 2];
}

/// FRD → FLU for the body-frame 3-vector starting at `at`.
fn flip_body(buf: &mut [f64], at: usize) {
    buf[at + 1] = -buf[at + 1];
    buf[at + 2] = -buf[at + 2];
}

/// Rewrites the row-major rotation block at `at` with the inertial basis
/// change on the left and the body basis change on the right, so the export
/// stays a proper rotation (both changes have determinant −1).
fn convert_rotation(buf: &mut [f64], at: usize) {
    let el = |i: usize, j: usize| at + 3 * i + j;
    for j in 0..3 {
        buf.swap(el(0, j), el(1, j));
        buf[el(2, j)] = -buf[el(2, j)];
    }
    for i in 0..3 {
        buf[el(i, 1)] = -buf[el(i, 1)];
        buf[el(i, 2)] = -buf[el(i, 2)];
    }
}

/// Copy of a record with every frame-bound quantity moved to the export
/// frame. Frame-free columns (motor commands, thrust magnitude, residuals,
/// loss, θ) pass through untouched.
fn export_record(r: &StepRecord) -> StepRecord {
    let mut out = r.clone();
    for v in [
        &mut out.reference.position,
        &mut out.reference.velocity,
        &mut out.reference.acceleration,
        &mut out.reference.heading,
    ] {
        swap_inertial(v.as_mut_slice(), 0);
    }
    for state in [&mut out.truth, &mut out.estimate] {
        let s = state.as_mut_slice();
        swap_inertial(s, 0);
        swap_inertial(s, 3);
        convert_rotation(s, 6);
        flip_body(s, 15);
        swap_inertial(s, 18);
        flip_body(s, 21);
    }
    let m = out.measurement.as_mut_slice();
    swap_inertial(m, 0);
    swap_inertial(m, 3);
    convert_rotation(m, 6);
    flip_body(m, 15);
    flip_body(out.wrench.torque.as_mut_slice(), 0);
    let d = out.disturbance_true.as_mut_slice();
    swap_inertial(d, 0);
    flip_body(d, 3);
    out
}

/// Summary statistics of an episode, serialized into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSummary {
    pub position_rms: f64,
    pub disturbance_rms: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

/// JSON sidecar describing one recorded run. The only place wall-clock time
/// is allowed to appear.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub csv_schema_version: u32,
    pub package_version: String,
    pub created_unix_seconds: u64,
    pub seed: u64,
    pub scenario: String,
    pub theta_initial: ThetaParams,
    pub theta_final: ThetaParams,
    pub summary: LossSummary,
}

impl RunManifest {
    pub fn new(
        seed: u64,
        scenario: &str,
        theta_initial: ThetaParams,
        theta_final: ThetaParams,
        log: &EpisodeLog,
    ) -> Self {
        let created_unix_seconds = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            csv_schema_version: CSV_SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix_seconds,
            seed,
            scenario: scenario.to_string(),
            theta_initial,
            theta_final,
            summary: LossSummary {
                position_rms: log.position_rms(),
                disturbance_rms: log.disturbance_rms(),
                mean_loss: log.mean_loss(),
                steps: log.len(),
            },
        }
    }
}
