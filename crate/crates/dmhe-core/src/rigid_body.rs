//! Quadrotor rigid-body dynamics on the 24-dimensional extended state, the
//! discretizations used by the estimator (forward Euler) and the simulator
//! (RK4), the measurement model, and the analytic Jacobians and curvature
//! term consumed by the estimator's gradient engine.
//!
//! State layout (all inertial quantities in NED, z down):
//!
//! | slice    | meaning                               | units   |
//! |----------|---------------------------------------|---------|
//! | `0..3`   | position p                            | m       |
//! | `3..6`   | velocity v                            | m/s     |
//! | `6..15`  | rotation entries vec(R), row-major    | —       |
//! | `15..18` | body angular rate ω                   | rad/s   |
//! | `18..21` | disturbance force d_f (inertial)      | N       |
//! | `21..24` | disturbance torque d_τ (body)         | N·m     |
//!
//! R maps body to inertial coordinates. The disturbances follow random walks
//! driven by the 6-vector process noise η. The estimator treats the rotation
//! entries as nine unconstrained reals; only the simulator (and the
//! controllers, on their input side) re-project onto SO(3).

use crate::linalg::{polar_rotation, skew};
use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Extended state dimension.
pub const NX: usize = 24;
/// Measurement dimension (everything except the disturbances).
pub const NY: usize = 18;
/// Process-noise dimension (disturbance force + torque channels).
pub const NW: usize = 6;

/// First index of each state block.
pub const POS: usize = 0;
pub const VEL: usize = 3;
pub const ROT: usize = 6;
pub const OMEGA: usize = 15;
pub const DIST_F: usize = 18;
pub const DIST_TAU: usize = 21;

pub type StateVec = SVector<f64, NX>;
pub type MeasVec = SVector<f64, NY>;
pub type NoiseVec = SVector<f64, NW>;

/// Physical parameters of the airframe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrotorParams {
    /// Mass, kg.
    pub mass: f64,
    /// Diagonal of the inertia matrix, kg·m².
    pub inertia: [f64; 3],
    /// Rotor arm length, m.
    pub arm_length: f64,
    /// Thrust coefficient b (thrust = b·u per motor), N·s².
    pub thrust_coeff: f64,
    /// Rotor drag/torque coefficient k_a, N·m·s².
    pub drag_coeff: f64,
    /// Gravitational acceleration, m/s².
    pub gravity: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.8,
            inertia: [0.0183, 0.0197, 0.0322],
            arm_length: 0.21,
            thrust_coeff: 1.024e-7,
            drag_coeff: 1.303e-9,
            gravity: 9.81,
        }
    }
}

impl QuadrotorParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    pub fn inertia_inverse(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            1.0 / self.inertia[0],
            1.0 / self.inertia[1],
            1.0 / self.inertia[2],
        ))
    }

    /// Plus-configuration mixer K mapping motor speeds squared to the wrench
    /// [f, τx, τy, τz]. Any invertible layout is behaviorally equivalent at
    /// the wrench level; this one is fixed so logs are comparable.
    pub fn mixer(&self) -> Matrix4<f64> {
        let b = self.thrust_coeff;
        let lb = self.arm_length * b;
        let k = self.drag_coeff;
        Matrix4::new(
            b, b, b, b, //
            0.0, -lb, 0.0, lb, //
            lb, 0.0, -lb, 0.0, //
            -k, k, -k, k,
        )
    }

    pub fn mixer_inverse(&self) -> Matrix4<f64> {
        self.mixer().try_inverse().expect("mixer is invertible for positive coefficients")
    }

    /// Hover thrust magnitude m·g, N.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Per-motor speed-squared at hover.
    pub fn hover_motor_speed_sq(&self) -> f64 {
        self.hover_thrust() / (4.0 * self.thrust_coeff)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.mass > 0.0
            && self.inertia.iter().all(|&j| j > 0.0)
            && self.arm_length > 0.0
            && self.thrust_coeff > 0.0
            && self.drag_coeff > 0.0
            && self.gravity > 0.0;
        if ok {
            Ok(())
        } else {
            Err(format!("non-positive quadrotor parameter: {self:?}"))
        }
    }
}

/// Collective thrust magnitude and body torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    /// Thrust along −(body z), N. Non-negative for physical commands.
    pub thrust: f64,
    /// Body torque, N·m.
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self { thrust: 0.0, torque: Vector3::zeros() }
    }

    /// Hover wrench for the given airframe.
    pub fn hover(params: &QuadrotorParams) -> Self {
        Self { thrust: params.hover_thrust(), torque: Vector3::zeros() }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }
}

/// Motor command: speeds squared plus the wrench they realize through the
/// mixer. Constructed through [`ControlInput::from_wrench`] so that the two
/// representations always agree, including after clamping.
#[derive(Debug, Clone, Copy)]
pub struct ControlInput {
    /// Motor speeds squared, (rad/s)².
    pub u: Vector4<f64>,
    /// Wrench realized by `u` (recomputed after any clamping).
    pub wrench: Wrench,
    /// Number of motor channels clamped when this command was formed.
    pub saturated: u8,
}

impl ControlInput {
    /// Build a motor command realizing `wrench` as closely as the per-motor
    /// clamp allows: u = K⁻¹ τ_c, clamped to [0, clamp_factor × hover], then
    /// the wrench is recomputed from the clamped speeds.
    pub fn from_wrench(params: &QuadrotorParams, wrench: &Wrench, clamp_factor: f64) -> Self {
        let u_raw = params.mixer_inverse() * wrench.as_vector();
        let u_max = clamp_factor * params.hover_motor_speed_sq();
        let mut u = u_raw;
        let mut saturated = 0u8;
        for i in 0..4 {
            if u[i] < 0.0 {
                u[i] = 0.0;
                saturated += 1;
            } else if u[i] > u_max {
                u[i] = u_max;
                saturated += 1;
            }
        }
        let tau_c = params.mixer() * u;
        Self {
            u,
            wrench: Wrench { thrust: tau_c[0], torque: Vector3::new(tau_c[1], tau_c[2], tau_c[3]) },
            saturated,
        }
    }

    /// Command realizing exactly the hover wrench.
    pub fn hover(params: &QuadrotorParams) -> Self {
        Self::from_wrench(params, &Wrench::hover(params), f64::INFINITY)
    }
}

/// Assemble an extended state from its blocks. `rot` is stored row-major.
pub fn pack_state(
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    rot: &Matrix3<f64>,
    omega: &Vector3<f64>,
    d_f: &Vector3<f64>,
    d_tau: &Vector3<f64>,
) -> StateVec {
    let mut x = StateVec::zeros();
    x.fixed_rows_mut::<3>(POS).copy_from(p);
    x.fixed_rows_mut::<3>(VEL).copy_from(v);
    for i in 0..3 {
        for j in 0..3 {
            x[ROT + 3 * i + j] = rot[(i, j)];
        }
    }
    x.fixed_rows_mut::<3>(OMEGA).copy_from(omega);
    x.fixed_rows_mut::<3>(DIST_F).copy_from(d_f);
    x.fixed_rows_mut::<3>(DIST_TAU).copy_from(d_tau);
    x
}

/// Extract the (row-major) rotation block as a matrix. No projection applied.
pub fn rotation_of(x: &StateVec) -> Matrix3<f64> {
    Matrix3::new(
        x[ROT], x[ROT + 1], x[ROT + 2], //
        x[ROT + 3], x[ROT + 4], x[ROT + 5], //
        x[ROT + 6], x[ROT + 7], x[ROT + 8],
    )
}

fn set_rotation(x: &mut StateVec, r: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            x[ROT + 3 * i + j] = r[(i, j)];
        }
    }
}

/// State of a quadrotor resting at `p` with identity attitude and no
/// disturbance — the canonical episode start.
pub fn rest_state(p: &Vector3<f64>) -> StateVec {
    pack_state(
        p,
        &Vector3::zeros(),
        &Matrix3::identity(),
        &Vector3::zeros(),
        &Vector3::zeros(),
        &Vector3::zeros(),
    )
}

/// Time derivative of the extended state under wrench `u` and process noise
/// `eta`:
///
/// ṗ = v,  v̇ = (m g ẑ − R f ẑ + d_f)/m,  Ṙ = R ω̂,
/// ω̇ = J⁻¹(−ω × J ω + τ_m + d_τ),  ḋ_f = η_f,  ḋ_τ = η_τ,
///
/// with ẑ = [0,0,1]ᵀ pointing down (NED).
pub fn continuous_derivative(
    x: &StateVec,
    u: &ControlInput,
    eta: &NoiseVec,
    params: &QuadrotorParams,
) -> StateVec {
    let v = x.fixed_rows::<3>(VEL).into_owned();
    let r = rotation_of(x);
    let omega = x.fixed_rows::<3>(OMEGA).into_owned();
    let d_f = x.fixed_rows::<3>(DIST_F).into_owned();
    let d_tau = x.fixed_rows::<3>(DIST_TAU).into_owned();

    let z_hat = Vector3::new(0.0, 0.0, 1.0);
    let j_mat = params.inertia_matrix();

    let v_dot =
        (params.mass * params.gravity * z_hat - r * (u.wrench.thrust * z_hat) + d_f) / params.mass;
    let r_dot = r * skew(&omega);
    let omega_dot =
        params.inertia_inverse() * (-omega.cross(&(j_mat * omega)) + u.wrench.torque + d_tau);

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(POS).copy_from(&v);
    dx.fixed_rows_mut::<3>(VEL).copy_from(&v_dot);
    set_rotation(&mut dx, &r_dot);
    dx.fixed_rows_mut::<3>(OMEGA).copy_from(&omega_dot);
    dx.fixed_rows_mut::<3>(DIST_F).copy_from(&eta.fixed_rows::<3>(0).into_owned());
    dx.fixed_rows_mut::<3>(DIST_TAU).copy_from(&eta.fixed_rows::<3>(3).into_owned());
    dx
}

/// Forward-Euler step x⁺ = x + Δt ẋ — the discrete model f(x, u, η) used by
/// the estimator and differentiated by [`jacobians`] and [`curvature_term`].
pub fn euler_step(
    x: &StateVec,
    u: &ControlInput,
    eta: &NoiseVec,
    dt: f64,
    params: &QuadrotorParams,
) -> StateVec {
    x + dt * continuous_derivative(x, u, eta, params)
}

/// Classical RK4 step of the truth model with the disturbance held at
/// `d_true` over the step. The returned state carries `d_true` in its
/// disturbance block and a re-orthonormalized rotation.
pub fn rk4_step(
    x: &StateVec,
    u: &ControlInput,
    d_true: &NoiseVec,
    dt_sim: f64,
    params: &QuadrotorParams,
) -> StateVec {
    let mut x0 = *x;
    x0.fixed_rows_mut::<6>(DIST_F).copy_from(d_true);
    let eta = NoiseVec::zeros();

    let k1 = continuous_derivative(&x0, u, &eta, params);
    let k2 = continuous_derivative(&(x0 + 0.5 * dt_sim * k1), u, &eta, params);
    let k3 = continuous_derivative(&(x0 + 0.5 * dt_sim * k2), u, &eta, params);
    let k4 = continuous_derivative(&(x0 + dt_sim * k3), u, &eta, params);

    let mut x_next = x0 + (dt_sim / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let r = polar_rotation(&rotation_of(&x_next));
    set_rotation(&mut x_next, &r);
    x_next
}

/// Analytic Jacobians of [`euler_step`]: A = ∂f/∂x (24×24), B = ∂f/∂η (24×6),
/// and the constant measurement Jacobian H = [I₁₈ | 0] (18×24).
///
/// A is independent of η (the step is affine in η) and B is constant
/// Δt·[0; I₆].
pub fn jacobians(
    x: &StateVec,
    u: &ControlInput,
    dt: f64,
    params: &QuadrotorParams,
) -> (SMatrix<f64, NX, NX>, SMatrix<f64, NX, NW>, SMatrix<f64, NY, NX>) {
    let r = rotation_of(x);
    let omega = x.fixed_rows::<3>(OMEGA).into_owned();
    let j_mat = params.inertia_matrix();
    let j_inv = params.inertia_inverse();

    let mut a = SMatrix::<f64, NX, NX>::identity();

    // ∂ṗ/∂v = I.
    for i in 0..3 {
        a[(POS + i, VEL + i)] += dt;
    }
    // ∂v̇/∂vec(R): only through −(f/m) R ẑ, i.e. the third column of R.
    for i in 0..3 {
        a[(VEL + i, ROT + 3 * i + 2)] += dt * (-u.wrench.thrust / params.mass);
    }
    // ∂v̇/∂d_f = I/m.
    for i in 0..3 {
        a[(VEL + i, DIST_F + i)] += dt / params.mass;
    }
    // ∂Ṙ/∂vec(R): each row of R evolves as rowᵢ ω̂, so the per-row block is ω̂ᵀ.
    let omega_hat_t = skew(&omega).transpose();
    for i in 0..3 {
        for jj in 0..3 {
            for b in 0..3 {
                a[(ROT + 3 * i + jj, ROT + 3 * i + b)] += dt * omega_hat_t[(jj, b)];
            }
        }
    }
    // ∂Ṙ/∂ω_l = R êₗ with êₗ the skew basis generator.
    for l in 0..3 {
        let e_l = skew(&Vector3::ith_axis(l).into_inner());
        let col = r * e_l;
        for i in 0..3 {
            for jj in 0..3 {
                a[(ROT + 3 * i + jj, OMEGA + l)] += dt * col[(i, jj)];
            }
        }
    }
    // ∂ω̇/∂ω = J⁻¹(−ω̂ J + (Jω)^).
    let d_gyro = j_inv * (-skew(&omega) * j_mat + skew(&(j_mat * omega)));
    for i in 0..3 {
        for jj in 0..3 {
            a[(OMEGA + i, OMEGA + jj)] += dt * d_gyro[(i, jj)];
        }
    }
    // ∂ω̇/∂d_τ = J⁻¹ (diagonal).
    for i in 0..3 {
        a[(OMEGA + i, DIST_TAU + i)] += dt * j_inv[(i, i)];
    }

    let mut b = SMatrix::<f64, NX, NW>::zeros();
    for i in 0..NW {
        b[(DIST_F + i, i)] = dt;
    }

    (a, b, measurement_jacobian())
}

/// Measurement model h(x): the first 18 state components.
pub fn measure(x: &StateVec) -> MeasVec {
    x.fixed_rows::<NY>(0).into_owned()
}

/// Constant measurement Jacobian H = [I₁₈ | 0].
pub fn measurement_jacobian() -> SMatrix<f64, NY, NX> {
    let mut h = SMatrix::<f64, NY, NX>::zeros();
    for i in 0..NY {
        h[(i, i)] = 1.0;
    }
    h
}

/// Curvature term G = ∂(A(x)ᵀ λ)/∂x, the Hessian of x ↦ λᵀ f(x, u, η)
/// contracted with the dual λ. For this model the only second-order terms
/// come from the attitude kinematics R ω̂ (bilinear in R and ω) and the
/// gyroscopic torque −ω × J ω (quadratic in ω), so G is symmetric with
/// non-zeros confined to the (vec(R), ω) cross blocks and the (ω, ω) block.
pub fn curvature_term(
    x: &StateVec,
    lambda: &StateVec,
    _u: &ControlInput,
    dt: f64,
    params: &QuadrotorParams,
) -> SMatrix<f64, NX, NX> {
    let _ = x; // G does not depend on x: all second derivatives are constant.
    let mut g = SMatrix::<f64, NX, NX>::zeros();

    // λ_R reshaped to 3×3 (row-major, matching the state layout).
    let lambda_r = Matrix3::new(
        lambda[ROT],
        lambda[ROT + 1],
        lambda[ROT + 2],
        lambda[ROT + 3],
        lambda[ROT + 4],
        lambda[ROT + 5],
        lambda[ROT + 6],
        lambda[ROT + 7],
        lambda[ROT + 8],
    );

    // ∂²(λ_R : R ω̂)/∂vec(R)∂ω_l = λ_R êₗᵀ.
    for l in 0..3 {
        let block = lambda_r * skew(&Vector3::ith_axis(l).into_inner()).transpose();
        for i in 0..3 {
            for jj in 0..3 {
                let val = dt * block[(i, jj)];
                g[(ROT + 3 * i + jj, OMEGA + l)] += val;
                g[(OMEGA + l, ROT + 3 * i + jj)] += val;
            }
        }
    }

    // ∂²(−λ_ωᵀ J⁻¹ (ω × J ω))/∂ω² = μ̂ J − J μ̂ with μ = J⁻¹ λ_ω.
    let j_mat = params.inertia_matrix();
    let mu = params.inertia_inverse() * x_block3(lambda, OMEGA);
    let hess = skew(&mu) * j_mat - j_mat * skew(&mu);
    for i in 0..3 {
        for jj in 0..3 {
            g[(OMEGA + i, OMEGA + jj)] += dt * hess[(i, jj)];
        }
    }

    g
}

fn x_block3(x: &StateVec, at: usize) -> Vector3<f64> {
    Vector3::new(x[at], x[at + 1], x[at + 2])
}
