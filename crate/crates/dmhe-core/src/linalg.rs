//! Shared linear-algebra helpers: SO(3) hat/vee maps, polar projection onto
//! rotations (with its directional derivative), smoothstep utilities for
//! reference generation, and a cheap conditioning proxy for LU factors.

use nalgebra::{DMatrix, Dyn, Matrix3, Vector3};

/// Hat map: the skew-symmetric matrix S with S w = v × w.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Vee map, inverse of [`skew`] on skew-symmetric matrices.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Closest proper rotation to `m` (polar factor, via SVD with sign fix).
///
/// Used by the simulator to re-orthonormalize the stored rotation after each
/// integration step, and by the controllers to project raw rotation estimates
/// back onto SO(3).
pub fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction to stay in SO(3).
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    r
}

/// Directional derivative of [`polar_rotation`] at `m` along `dm`.
///
/// Writing m = Q S with Q the polar rotation and S symmetric positive
/// definite, the rotation perturbs as dQ = Q [x]ₓ where x solves
/// (tr(S) I − S) x = vee(Qᵀ dm − dmᵀ Q). Returns `None` when that 3×3 system
/// is singular (rank-deficient `m`, far from any rotation).
pub fn polar_rotation_differential(m: &Matrix3<f64>, dm: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let q = polar_rotation(m);
    let s = q.transpose() * m;
    let s = (s + s.transpose()) * 0.5;
    let lhs = Matrix3::identity() * s.trace() - s;
    let rhs = vee(&(q.transpose() * dm - dm.transpose() * q));
    let x = lhs.lu().solve(&rhs)?;
    Some(q * skew(&x))
}

/// Quintic smoothstep on [0, 1]: value, first and second derivative with
/// respect to the normalized argument. Clamped (with zero derivatives)
/// outside the unit interval, so both endpoints are C² joins.
pub fn quintic_smoothstep(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if u >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (u2, u3) = (u * u, u * u * u);
    let s = u3 * (10.0 - 15.0 * u + 6.0 * u2);
    let ds = 30.0 * u2 * (1.0 - 2.0 * u + u2);
    let dds = 60.0 * u * (1.0 - 3.0 * u + 2.0 * u2);
    (s, ds, dds)
}

/// Conditioning proxy for a square LU factorization: ratio of the largest to
/// the smallest absolute diagonal entry of U. Not a true condition number,
/// but cheap, and it diverges exactly when the factorization degenerates.
pub fn lu_diag_condition(lu: &nalgebra::LU<f64, Dyn, Dyn>) -> f64 {
    let u: DMatrix<f64> = lu.u();
    let n = u.nrows().min(u.ncols());
    let mut max_d: f64 = 0.0;
    let mut min_d = f64::INFINITY;
    for i in 0..n {
        let d = u[(i, i)].abs();
        max_d = max_d.max(d);
        min_d = min_d.min(d);
    }
    if min_d == 0.0 {
        f64::INFINITY
    } else {
        max_d / min_d
    }
}
