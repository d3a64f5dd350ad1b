//! Differentiable moving-horizon estimation (DMHE) for quadrotor disturbance
//! rejection.
//!
//! The library estimates time-varying disturbance forces and torques acting on
//! a simulated quadrotor with a moving-horizon estimator (MHE), computes the
//! analytic sensitivity of every estimate with respect to the estimator's
//! tuning weights through a Kalman-filter-style recursion on the differential
//! KKT system, and uses those sensitivities to auto-tune the weights online
//! from tracking error alone — no ground-truth disturbance labels required.
//!
//! Module map:
//! - [`rigid_body`]: quadrotor dynamics on the 24-dim extended state, its
//!   discretizations, and all analytic Jacobians.
//! - [`weights`]: the 50-element tuning vector θ (arrival cost, measurement
//!   and process weights, two forgetting factors) and its update rules.
//! - [`mhe`]: the sliding-window Gauss–Newton estimator with dual recovery.
//! - [`gradient`]: ∂x̂/∂θ via the matrix-valued Kalman recursion, plus a dense
//!   differential-KKT solve used as a test oracle.
//! - [`control`]: geometric tracking controller and PD baseline, with the
//!   analytic control Jacobians needed for closed-loop gradients.
//! - [`learning`]: tracking loss, chain rules, per-step gradient descent on θ,
//!   and the small MLP policy parameterization with manual backprop.
//! - [`scenarios`]: disturbance profiles, reference trajectories, and the
//!   closed-loop simulation loop.
//! - [`episode`]: per-step episode logs (CSV) and run manifests (JSON).
//! - [`config`]: JSON configuration mirroring the module layout.
//!
//! All internal math uses the North-East-Down (NED) frame; East-North-Up
//! appears only in CSV export columns.

pub mod config;
pub mod control;
pub mod episode;
pub mod gradient;
pub mod learning;
pub mod linalg;
pub mod mhe;
pub mod rigid_body;
pub mod scenarios;
pub mod weights;
