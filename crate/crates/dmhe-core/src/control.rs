//! Geometric tracking controller on SE(3) with disturbance feedforward, a
//! PD variant with a fixed attitude loop, and their analytic input Jacobians.
//!
//! Axes are NED (ẑ points down). The position loop forms a desired inertial
//! force
//!
//!   Φ = m·a_d − m·g·ẑ − K_p∘e_p − K_v∘e_v − d̂_f,
//!
//! realizes its component along the (estimated) thrust axis, f = −Φᵀ R̂ ẑ,
//! and tilts the vehicle toward b₃_d = −Φ/‖Φ‖. The attitude loop runs on the
//! rotation error e_R = ½ vee(R_dᵀR̂ − R̂ᵀR_d) and the rate error
//! e_ω = ω − χ̇·R̂ᵀẑ, with gyroscopic feedforward and (for the full
//! controller) torque-disturbance cancellation. χ̇ is the part of the desired
//! angular velocity recoverable from a single reference point: when the
//! heading is tangent-aligned, the rotation rate of the velocity direction.
//! Without it, rate damping fights the steady rotation a curving trajectory
//! demands, the weak-authority yaw axis accumulates errors past 90°, and the
//! rotation-error metric then couples yaw error into roll/pitch hard enough
//! to corrupt the thrust axis. Motor commands come from the inverse mixer,
//! clamped per rotor.
//!
//! The estimator's rotation block drifts slightly off SO(3) (Euler
//! discretization), so every use of R̂ here goes through the polar projection;
//! the Jacobians differentiate through that projection as well.

use crate::linalg::{polar_rotation, polar_rotation_differential, vee};
use crate::rigid_body::{
    rotation_of, ControlInput, QuadrotorParams, StateVec, Wrench, DIST_F, DIST_TAU, OMEGA, POS,
    VEL,
};
use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Motor commands are clamped to [0, 1.5×hover] squared speed.
pub const MOTOR_CLAMP_FACTOR: f64 = 1.5;
/// Attitude gains of the PD baseline (not tunable there by design). The yaw
/// entries are far below roll/pitch: the drag-coefficient yaw authority of
/// the mixer is two orders of magnitude weaker than the arm-lever axes, and
/// matching gains would saturate every motor on small heading errors.
pub const PD_ATTITUDE_KR: [f64; 3] = [2.5, 2.5, 0.15];
pub const PD_ATTITUDE_KOMEGA: [f64; 3] = [0.3, 0.3, 0.1];

const DEGENERACY_EPS: f64 = 1e-6;

/// One point of the reference trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Desired heading direction (projected into the attitude construction).
    pub heading: Vector3<f64>,
}

impl ReferencePoint {
    /// Stationary reference at a point, heading along +x.
    pub fn hover_at(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
            heading: Vector3::new(1.0, 0.0, 0.0),
        }
    }
}

/// Diagonal loop gains. `kp`/`kv` are force gains (N per m, N per m/s);
/// `kr`/`komega` drive the attitude loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlGains {
    pub kp: Vector3<f64>,
    pub kv: Vector3<f64>,
    pub kr: Vector3<f64>,
    pub komega: Vector3<f64>,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            kp: Vector3::from_element(16.0),
            kv: Vector3::from_element(8.0),
            kr: Vector3::from(PD_ATTITUDE_KR),
            komega: Vector3::from(PD_ATTITUDE_KOMEGA),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlError {
    /// The desired force or the heading construction collapsed; no attitude
    /// can be extracted.
    DegenerateAttitude { norm: f64 },
}

impl fmt::Display for ControlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlError::DegenerateAttitude { norm } => {
                write!(f, "degenerate attitude construction (norm {norm:.3e})")
            }
        }
    }
}

impl std::error::Error for ControlError {}

/// Which control law a Jacobian refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Geometric,
    PdBaseline,
}

struct AttitudeSetpoint {
    b3: Vector3<f64>,
    r_d: Matrix3<f64>,
    phi_norm: f64,
}

fn desired_force(
    reference: &ReferencePoint,
    x_hat: &StateVec,
    d_f: &Vector3<f64>,
    gains: &ControlGains,
    params: &QuadrotorParams,
) -> Vector3<f64> {
    let p = x_hat.fixed_rows::<3>(POS).into_owned();
    let v = x_hat.fixed_rows::<3>(VEL).into_owned();
    let e_p = p - reference.position;
    let e_v = v - reference.velocity;
    params.mass * reference.acceleration
        - params.mass * params.gravity * Vector3::z()
        - gains.kp.component_mul(&e_p)
        - gains.kv.component_mul(&e_v)
        - d_f
}

fn attitude_setpoint(
    phi: &Vector3<f64>,
    heading: &Vector3<f64>,
) -> Result<AttitudeSetpoint, ControlError> {
    let phi_norm = phi.norm();
    if phi_norm < DEGENERACY_EPS {
        return Err(ControlError::DegenerateAttitude { norm: phi_norm });
    }
    let b3 = -phi / phi_norm;
    let b2_raw = b3.cross(heading);
    let b2_norm = b2_raw.norm();
    if b2_norm < DEGENERACY_EPS {
        return Err(ControlError::DegenerateAttitude { norm: b2_norm });
    }
    let b2 = b2_raw / b2_norm;
    let b1 = b2.cross(&b3);
    Ok(AttitudeSetpoint { b3, r_d: Matrix3::from_columns(&[b1, b2, b3]), phi_norm })
}

fn rotation_error(r_d: &Matrix3<f64>, r: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * vee(&(r_d.transpose() * r - r.transpose() * r_d))
}

/// Rotation rate of the reference heading about inertial ẑ, reconstructible
/// only when the heading is aligned with the horizontal velocity direction
/// (then χ = atan2(ẏ_d, ẋ_d) and χ̇ follows from v_d, a_d). Zero otherwise,
/// which covers hover and externally framed headings.
pub fn heading_rate(reference: &ReferencePoint) -> f64 {
    let vx = reference.velocity[0];
    let vy = reference.velocity[1];
    let speed_sq = vx * vx + vy * vy;
    if speed_sq < 1e-6 {
        return 0.0;
    }
    let h = reference.heading;
    let h_norm = (h[0] * h[0] + h[1] * h[1]).sqrt();
    if h_norm < DEGENERACY_EPS {
        return 0.0;
    }
    let aligned = (vx * h[0] + vy * h[1]) / (speed_sq.sqrt() * h_norm);
    if aligned < 0.999 {
        return 0.0;
    }
    (vx * reference.acceleration[1] - vy * reference.acceleration[0]) / speed_sq
}

#[allow(clippy::too_many_arguments)]
fn wrench_from_parts(
    phi: &Vector3<f64>,
    setpoint: &AttitudeSetpoint,
    r: &Matrix3<f64>,
    omega: &Vector3<f64>,
    chi_dot: f64,
    kr: &Vector3<f64>,
    komega: &Vector3<f64>,
    d_tau: &Vector3<f64>,
    params: &QuadrotorParams,
) -> Wrench {
    let thrust = -phi.dot(&(r * Vector3::z()));
    let e_r = rotation_error(&setpoint.r_d, r);
    let e_omega = omega - chi_dot * (r.transpose() * Vector3::z());
    let j = params.inertia_matrix();
    let torque = -kr.component_mul(&e_r) - komega.component_mul(&e_omega)
        + omega.cross(&(j * omega))
        - d_tau;
    Wrench { thrust, torque }
}

/// Full geometric controller: position loop with force feedforward, attitude
/// loop with torque feedforward.
pub fn geometric_control(
    reference: &ReferencePoint,
    x_hat: &StateVec,
    gains: &ControlGains,
    params: &QuadrotorParams,
) -> Result<ControlInput, ControlError> {
    let d_f = x_hat.fixed_rows::<3>(DIST_F).into_owned();
    let d_tau = x_hat.fixed_rows::<3>(DIST_TAU).into_owned();
    let phi = desired_force(reference, x_hat, &d_f, gains, params);
    let setpoint = attitude_setpoint(&phi, &reference.heading)?;
    let r = polar_rotation(&rotation_of(x_hat));
    let omega = x_hat.fixed_rows::<3>(OMEGA).into_owned();
    let wrench = wrench_from_parts(
        &phi,
        &setpoint,
        &r,
        &omega,
        heading_rate(reference),
        &gains.kr,
        &gains.komega,
        &d_tau,
        params,
    );
    Ok(ControlInput::from_wrench(params, &wrench, MOTOR_CLAMP_FACTOR))
}

/// PD baseline: same position loop (with the force feedforward `d_f`, passed
/// explicitly so callers can disable it), fixed attitude gains, and no
/// torque-disturbance compensation.
pub fn pd_baseline(
    reference: &ReferencePoint,
    x_hat: &StateVec,
    d_f: &Vector3<f64>,
    gains: &ControlGains,
    params: &QuadrotorParams,
) -> Result<ControlInput, ControlError> {
    let phi = desired_force(reference, x_hat, d_f, gains, params);
    let setpoint = attitude_setpoint(&phi, &reference.heading)?;
    let r = polar_rotation(&rotation_of(x_hat));
    let omega = x_hat.fixed_rows::<3>(OMEGA).into_owned();
    let wrench = wrench_from_parts(
        &phi,
        &setpoint,
        &r,
        &omega,
        heading_rate(reference),
        &Vector3::from(PD_ATTITUDE_KR),
        &Vector3::from(PD_ATTITUDE_KOMEGA),
        &Vector3::zeros(),
        params,
    );
    Ok(ControlInput::from_wrench(params, &wrench, MOTOR_CLAMP_FACTOR))
}

/// Directional derivative of the attitude setpoint columns for a desired-force
/// perturbation dΦ.
fn setpoint_differential(
    setpoint: &AttitudeSetpoint,
    heading: &Vector3<f64>,
    d_phi: &Vector3<f64>,
) -> Matrix3<f64> {
    let n = -setpoint.b3; // unit vector along Φ
    let db3 = -(d_phi - n * n.dot(d_phi)) / setpoint.phi_norm;
    let b2_raw = setpoint.b3.cross(heading);
    let b2_norm = b2_raw.norm();
    let b2 = b2_raw / b2_norm;
    let db2_raw = db3.cross(heading);
    let db2 = (db2_raw - b2 * b2.dot(&db2_raw)) / b2_norm;
    let db1 = db2.cross(&setpoint.b3) + b2.cross(&db3);
    Matrix3::from_columns(&[db1, db2, db3])
}

/// ∂u/∂x̂ of the selected control law at the given operating point: 4×24,
/// columns in state order [p, v, vec(R), ω, d_f, d_τ].
///
/// Differentiates through the polar projection of the rotation block and the
/// inverse mixer; rows of motors pinned at their clamp are zero. Returns the
/// degeneracy error at (and only at) points where the controller itself
/// fails.
pub fn control_jacobians(
    kind: ControllerKind,
    reference: &ReferencePoint,
    x_hat: &StateVec,
    gains: &ControlGains,
    params: &QuadrotorParams,
) -> Result<SMatrix<f64, 4, 24>, ControlError> {
    let d_f = x_hat.fixed_rows::<3>(DIST_F).into_owned();
    let d_tau = match kind {
        ControllerKind::Geometric => x_hat.fixed_rows::<3>(DIST_TAU).into_owned(),
        ControllerKind::PdBaseline => Vector3::zeros(),
    };
    let (kr, komega) = match kind {
        ControllerKind::Geometric => (gains.kr, gains.komega),
        ControllerKind::PdBaseline => (
            Vector3::from(PD_ATTITUDE_KR),
            Vector3::from(PD_ATTITUDE_KOMEGA),
        ),
    };

    let phi = desired_force(reference, x_hat, &d_f, gains, params);
    let setpoint = attitude_setpoint(&phi, &reference.heading)?;
    let r_raw = rotation_of(x_hat);
    let r = polar_rotation(&r_raw);
    let omega = x_hat.fixed_rows::<3>(OMEGA).into_owned();
    let j = params.inertia_matrix();
    let chi_dot = heading_rate(reference);

    // Clamp mask from the unclamped motor solve at this operating point.
    let wrench =
        wrench_from_parts(&phi, &setpoint, &r, &omega, chi_dot, &kr, &komega, &d_tau, params);
    let k_inv = params.mixer_inverse();
    let raw_u = k_inv * wrench.as_vector();
    let clamp_hi = MOTOR_CLAMP_FACTOR * params.hover_motor_speed_sq();
    let clamped: [bool; 4] =
        std::array::from_fn(|i| raw_u[i] <= 0.0 || raw_u[i] >= clamp_hi);

    let b3_hat = r * Vector3::z();
    let mut out = SMatrix::<f64, 4, 24>::zeros();

    for col in 0..24 {
        // State-direction slices of the basis vector e_col.
        let mut d_phi = Vector3::zeros();
        let mut d_r_raw = Matrix3::zeros();
        let mut d_omega = Vector3::zeros();
        let mut d_dtau = Vector3::zeros();

        match col {
            c if c < 3 => d_phi = -gains.kp[c] * Vector3::ith(c, 1.0),
            c if c < 6 => d_phi = -gains.kv[c - 3] * Vector3::ith(c - 3, 1.0),
            c if c < 15 => {
                let flat = c - 6;
                d_r_raw[(flat / 3, flat % 3)] = 1.0;
            }
            c if c < 18 => d_omega = Vector3::ith(c - 15, 1.0),
            c if c < 21 => {
                // d̂_f enters the desired force directly.
                d_phi = -Vector3::ith(c - 18, 1.0);
            }
            c => {
                if kind == ControllerKind::Geometric {
                    d_tau_direction(&mut d_dtau, c - 21);
                }
            }
        }

        let d_r = if d_r_raw != Matrix3::zeros() {
            polar_rotation_differential(&r_raw, &d_r_raw).unwrap_or_else(Matrix3::zeros)
        } else {
            Matrix3::zeros()
        };

        let d_rd = if d_phi != Vector3::zeros() {
            setpoint_differential(&setpoint, &reference.heading, &d_phi)
        } else {
            Matrix3::zeros()
        };

        let d_thrust = -d_phi.dot(&b3_hat) - phi.dot(&(d_r * Vector3::z()));
        let d_er = 0.5
            * vee(
                &(d_rd.transpose() * r + setpoint.r_d.transpose() * d_r
                    - d_r.transpose() * setpoint.r_d
                    - r.transpose() * d_rd),
            );
        // χ̇ depends only on the reference, so the rate-error differential
        // picks up the rotation differential alone.
        let d_eomega = d_omega - chi_dot * (d_r.transpose() * Vector3::z());
        let d_torque = -kr.component_mul(&d_er) - komega.component_mul(&d_eomega)
            + d_omega.cross(&(j * omega))
            + omega.cross(&(j * d_omega))
            - d_dtau;

        let d_wrench = nalgebra::Vector4::new(d_thrust, d_torque[0], d_torque[1], d_torque[2]);
        let d_u = k_inv * d_wrench;
        for row in 0..4 {
            if !clamped[row] {
                out[(row, col)] = d_u[row];
            }
        }
    }
    Ok(out)
}

fn d_tau_direction(d_dtau: &mut Vector3<f64>, axis: usize) {
    *d_dtau = Vector3::ith(axis, 1.0);
}

/// ∂u/∂[k_p; k_v] (4×6) of the position-loop gains for the selected control
/// law: the gain sensitivities the policy tuner needs. Columns are
/// [k_p,x k_p,y k_p,z k_v,x k_v,y k_v,z].
pub fn gain_jacobians(
    kind: ControllerKind,
    reference: &ReferencePoint,
    x_hat: &StateVec,
    gains: &ControlGains,
    params: &QuadrotorParams,
) -> Result<SMatrix<f64, 4, 6>, ControlError> {
    let d_f = x_hat.fixed_rows::<3>(DIST_F).into_owned();
    let d_tau = match kind {
        ControllerKind::Geometric => x_hat.fixed_rows::<3>(DIST_TAU).into_owned(),
        ControllerKind::PdBaseline => Vector3::zeros(),
    };
    let (kr, komega) = match kind {
        ControllerKind::Geometric => (gains.kr, gains.komega),
        ControllerKind::PdBaseline => (
            Vector3::from(PD_ATTITUDE_KR),
            Vector3::from(PD_ATTITUDE_KOMEGA),
        ),
    };
    let phi = desired_force(reference, x_hat, &d_f, gains, params);
    let setpoint = attitude_setpoint(&phi, &reference.heading)?;
    let r_raw = rotation_of(x_hat);
    let r = polar_rotation(&r_raw);
    let omega = x_hat.fixed_rows::<3>(OMEGA).into_owned();

    let wrench = wrench_from_parts(
        &phi,
        &setpoint,
        &r,
        &omega,
        heading_rate(reference),
        &kr,
        &komega,
        &d_tau,
        params,
    );
    let k_inv = params.mixer_inverse();
    let raw_u = k_inv * wrench.as_vector();
    let clamp_hi = MOTOR_CLAMP_FACTOR * params.hover_motor_speed_sq();
    let clamped: [bool; 4] =
        std::array::from_fn(|i| raw_u[i] <= 0.0 || raw_u[i] >= clamp_hi);

    let p = x_hat.fixed_rows::<3>(POS).into_owned();
    let v = x_hat.fixed_rows::<3>(VEL).into_owned();
    let e_p = p - reference.position;
    let e_v = v - reference.velocity;
    let b3_hat = r * Vector3::z();

    let mut out = SMatrix::<f64, 4, 6>::zeros();
    for col in 0..6 {
        let d_phi = if col < 3 {
            -e_p[col] * Vector3::ith(col, 1.0)
        } else {
            -e_v[col - 3] * Vector3::ith(col - 3, 1.0)
        };
        let d_rd = setpoint_differential(&setpoint, &reference.heading, &d_phi);
        let d_thrust = -d_phi.dot(&b3_hat);
        let d_er = 0.5
            * vee(&(d_rd.transpose() * r - r.transpose() * d_rd));
        let d_torque = -kr.component_mul(&d_er);
        let d_wrench = nalgebra::Vector4::new(d_thrust, d_torque[0], d_torque[1], d_torque[2]);
        let d_u = k_inv * d_wrench;
        for row in 0..4 {
            if !clamped[row] {
                out[(row, col)] = d_u[row];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_body::{pack_state, rest_state, NX};
    use nalgebra::UnitQuaternion;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn hover_reference() -> ReferencePoint {
        ReferencePoint::hover_at(Vector3::new(0.0, 0.0, -1.5))
    }

    /// A mildly perturbed flight state away from motor clamps and attitude
    /// degeneracies, with a slightly non-orthonormal rotation block (as the
    /// estimator would emit).
    fn flight_state(rng: &mut StdRng) -> StateVec {
        let q = UnitQuaternion::from_euler_angles(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.4..0.4),
        );
        let mut x = pack_state(
            &Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                -1.5 + rng.gen_range(-0.2..0.2),
            ),
            &Vector3::from_fn(|_, _| rng.gen_range(-0.4..0.4)),
            &q.to_rotation_matrix().into_inner(),
            &Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
            &Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
            &Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05)),
        );
        for i in 6..15 {
            x[i] += rng.gen_range(-1e-4..1e-4);
        }
        x
    }

    #[test]
    fn heading_rate_recovers_the_tangent_rotation() {
        // Circular motion at radius R and angular rate Ω: tangent-aligned
        // heading rotates at exactly Ω.
        let omega: f64 = 0.7;
        let radius = 1.3;
        let t: f64 = 0.9;
        let reference = ReferencePoint {
            position: Vector3::new(radius * (omega * t).cos(), radius * (omega * t).sin(), -1.0),
            velocity: Vector3::new(
                -radius * omega * (omega * t).sin(),
                radius * omega * (omega * t).cos(),
                0.0,
            ),
            acceleration: Vector3::new(
                -radius * omega * omega * (omega * t).cos(),
                -radius * omega * omega * (omega * t).sin(),
                0.0,
            ),
            heading: Vector3::new(-(omega * t).sin(), (omega * t).cos(), 0.0),
        };
        assert!((heading_rate(&reference) - omega).abs() < 1e-12);

        // Hover and misaligned headings fall back to zero.
        assert_eq!(heading_rate(&hover_reference()), 0.0);
        let mut skewed = reference;
        skewed.heading = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(heading_rate(&skewed), 0.0);
    }

    #[test]
    fn hover_equilibrium_commands_hover_wrench() {
        let params = QuadrotorParams::default();
        let reference = hover_reference();
        let x = rest_state(&reference.position);
        let u = geometric_control(&reference, &x, &ControlGains::default(), &params).unwrap();
        assert!((u.wrench.thrust - params.mass * params.gravity).abs() < 1e-9);
        assert!(u.wrench.torque.norm() < 1e-9);
        assert_eq!(u.saturated, 0);
        let hover = ControlInput::hover(&params);
        assert!((u.u - hover.u).amax() < 1e-9);
    }

    #[test]
    fn payload_estimate_raises_thrust_by_its_weight() {
        // A downward disturbance force (+z in NED) of 5.87 N must push the
        // commanded thrust up by exactly 5.87 N at hover.
        let params = QuadrotorParams::default();
        let reference = hover_reference();
        let mut x = rest_state(&reference.position);
        x[DIST_F + 2] = 5.87;
        let u = geometric_control(&reference, &x, &ControlGains::default(), &params).unwrap();
        assert!((u.wrench.thrust - (params.mass * params.gravity + 5.87)).abs() < 1e-9);
    }

    #[test]
    fn static_force_balance_matches_linear_steady_state_error() {
        // Without feedforward, a constant 5.87 N downward force is balanced
        // exactly when the altitude error is 5.87/K_p,z: the controller then
        // commands mg + 5.87 of thrust at level attitude.
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let reference = hover_reference();
        let offset = 5.87 / gains.kp[2];
        let mut pos = reference.position;
        pos[2] += offset; // below the setpoint (NED +z is down)
        let x = rest_state(&pos);
        let u = pd_baseline(&reference, &x, &Vector3::zeros(), &gains, &params).unwrap();
        assert!((u.wrench.thrust - (params.mass * params.gravity + 5.87)).abs() < 1e-9);
        assert!(u.wrench.torque.norm() < 1e-9);
    }

    #[test]
    fn degenerate_force_is_reported() {
        let params = QuadrotorParams::default();
        let mut reference = hover_reference();
        // Free-fall reference cancels gravity exactly: Φ = 0.
        reference.acceleration = params.gravity * Vector3::z();
        let x = rest_state(&reference.position);
        assert!(matches!(
            geometric_control(&reference, &x, &ControlGains::default(), &params),
            Err(ControlError::DegenerateAttitude { .. })
        ));
    }

    #[test]
    fn control_jacobian_matches_finite_differences() {
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let mut reference = hover_reference();
        // Tangent-aligned moving reference with curvature, so the rate
        // feedforward χ̇ is active in the Jacobian under test.
        reference.velocity = Vector3::new(0.3, -0.2, 0.1);
        reference.acceleration = Vector3::new(0.1, 0.25, -0.05);
        let hnorm = (0.3f64 * 0.3 + 0.2 * 0.2).sqrt();
        reference.heading = Vector3::new(0.3 / hnorm, -0.2 / hnorm, 0.0);
        assert!(heading_rate(&reference).abs() > 0.1);
        let mut rng = StdRng::seed_from_u64(5);

        for kind in [ControllerKind::Geometric, ControllerKind::PdBaseline] {
            for _ in 0..5 {
                let x = flight_state(&mut rng);
                let jac = control_jacobians(kind, &reference, &x, &gains, &params).unwrap();
                let eval = |x: &StateVec| -> nalgebra::Vector4<f64> {
                    match kind {
                        ControllerKind::Geometric => {
                            geometric_control(&reference, x, &gains, &params).unwrap().u
                        }
                        ControllerKind::PdBaseline => pd_baseline(
                            &reference,
                            x,
                            &x.fixed_rows::<3>(DIST_F).into_owned(),
                            &gains,
                            &params,
                        )
                        .unwrap()
                        .u,
                    }
                };
                let base = eval(&x);
                assert!(base.iter().all(|v| v.is_finite()));
                for colidx in 0..NX {
                    let h = 1e-6;
                    let mut xp = x;
                    xp[colidx] += h;
                    let mut xm = x;
                    xm[colidx] -= h;
                    let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                    let an = jac.column(colidx);
                    let scale = fd.amax().max(an.amax()).max(1.0);
                    assert!(
                        (fd - an).amax() / scale < 1e-5,
                        "{kind:?} col {colidx}: fd {fd:?} vs {an:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn pd_baseline_ignores_torque_disturbance_estimates() {
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let reference = hover_reference();
        let mut rng = StdRng::seed_from_u64(8);
        let x = flight_state(&mut rng);
        let jac =
            control_jacobians(ControllerKind::PdBaseline, &reference, &x, &gains, &params).unwrap();
        for col in 21..24 {
            assert_eq!(jac.column(col).amax(), 0.0);
        }
        let jac_full =
            control_jacobians(ControllerKind::Geometric, &reference, &x, &gains, &params).unwrap();
        assert!(jac_full.columns(21, 3).amax() > 0.0);
    }

    #[test]
    fn gain_jacobian_matches_finite_differences() {
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let mut reference = hover_reference();
        reference.velocity = Vector3::new(0.2, 0.1, -0.1);
        let mut rng = StdRng::seed_from_u64(12);
        let x = flight_state(&mut rng);

        let jac =
            gain_jacobians(ControllerKind::PdBaseline, &reference, &x, &gains, &params).unwrap();
        for col in 0..6 {
            let h = 1e-6;
            let perturb = |delta: f64| -> nalgebra::Vector4<f64> {
                let mut g = gains;
                if col < 3 {
                    g.kp[col] += delta;
                } else {
                    g.kv[col - 3] += delta;
                }
                pd_baseline(&reference, &x, &x.fixed_rows::<3>(DIST_F).into_owned(), &g, &params)
                    .unwrap()
                    .u
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            let an = jac.column(col);
            let scale = fd.amax().max(an.amax()).max(1.0);
            assert!((fd - an).amax() / scale < 1e-5, "gain col {col}");
        }
    }

    #[test]
    fn yaw_rotation_equivariance_of_thrust() {
        // Rotating the whole problem (state, reference, heading) about the
        // vertical leaves the commanded thrust magnitude unchanged.
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let mut rng = StdRng::seed_from_u64(3);
        let x = flight_state(&mut rng);
        let reference = ReferencePoint {
            position: Vector3::new(0.4, -0.2, -1.3),
            velocity: Vector3::new(0.2, 0.0, 0.1),
            acceleration: Vector3::new(0.1, -0.1, 0.0),
            heading: Vector3::new(1.0, 0.2, 0.0),
        };
        let u0 = geometric_control(&reference, &x, &gains, &params).unwrap();

        let yaw = UnitQuaternion::from_euler_angles(0.0, 0.0, 1.1);
        let rz = yaw.to_rotation_matrix().into_inner();
        let mut xr = x;
        xr.fixed_rows_mut::<3>(POS).copy_from(&(rz * x.fixed_rows::<3>(POS)));
        xr.fixed_rows_mut::<3>(VEL).copy_from(&(rz * x.fixed_rows::<3>(VEL)));
        let r_rot = rz * rotation_of(&x);
        for i in 0..3 {
            for jj in 0..3 {
                xr[6 + 3 * i + jj] = r_rot[(i, jj)];
            }
        }
        xr.fixed_rows_mut::<3>(DIST_F).copy_from(&(rz * x.fixed_rows::<3>(DIST_F)));
        // Body-frame quantities (ω, d_τ) are unchanged by a world-frame yaw.
        let ref_rot = ReferencePoint {
            position: rz * reference.position,
            velocity: rz * reference.velocity,
            acceleration: rz * reference.acceleration,
            heading: rz * reference.heading,
        };
        let u1 = geometric_control(&ref_rot, &xr, &gains, &params).unwrap();
        assert!((u0.wrench.thrust - u1.wrench.thrust).abs() < 1e-8);
        assert!((u0.wrench.torque.norm() - u1.wrench.torque.norm()).abs() < 1e-8);
    }

    #[test]
    fn jacobian_zeroes_rows_of_clamped_motors() {
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let reference = hover_reference();
        // A huge downward disturbance estimate saturates all motors high.
        let mut x = rest_state(&reference.position);
        x[DIST_F + 2] = 60.0;
        let u = geometric_control(&reference, &x, &gains, &params).unwrap();
        assert_eq!(u.saturated, 4);
        let jac =
            control_jacobians(ControllerKind::Geometric, &reference, &x, &gains, &params).unwrap();
        assert_eq!(jac.amax(), 0.0);
    }

    #[test]
    fn skew_consistency_of_rotation_error() {
        // e_R vanishes iff R = R_d for proper rotations; check the sign via a
        // small roll: positive roll error must produce negative roll torque.
        let params = QuadrotorParams::default();
        let gains = ControlGains::default();
        let reference = hover_reference();
        let roll = UnitQuaternion::from_euler_angles(0.1, 0.0, 0.0);
        let x = pack_state(
            &reference.position,
            &Vector3::zeros(),
            &roll.to_rotation_matrix().into_inner(),
            &Vector3::zeros(),
            &Vector3::zeros(),
            &Vector3::zeros(),
        );
        let u = geometric_control(&reference, &x, &gains, &params).unwrap();
        assert!(u.wrench.torque[0] < -1e-3, "roll torque {}", u.wrench.torque[0]);
        assert!(u.wrench.torque[1].abs() < 1e-9);
    }
}
