//! Sensitivities of the MHE solution with respect to the tuning vector θ.
//!
//! Differentiating the horizon problem's KKT conditions at a converged
//! solution gives, for each stage (all matrices are nx×|θ|; column j is the
//! derivative in the j-th flat θ component):
//!
//!   forward    X̂_{k+1} = A_k X̂_k + B Q_k⁻¹ Bᵀ Λ_k + D_k,          k = 0..N−2
//!   backward   Λ_{k−1} = A_kᵀ Λ_k + S_k X̂_k + E_k,                k = 1..N−1
//!   boundary   (I − P⁻¹S_0) X̂_0 − P⁻¹A_0ᵀ Λ_0 = F,
//!
//! with Λ_{N−1} ≡ 0, S_k = G_k − HᵀR_kH (G_k the dual-contracted dynamics
//! Hessian, zero at the last stage), and inhomogeneities
//!
//!   D_k[:,j] = −B Q_k⁻¹ (∂Q_k/∂θ_j) Q_k⁻¹ Bᵀ λ_k,
//!   E_k[:,j] = Hᵀ (∂R_k/∂θ_j) (ȳ_k − H x̂_k),
//!   F[:,j]   = P⁻¹ ( E_0[:,j] − (∂P/∂θ_j)(x̂_0 − x̄_0) ).
//!
//! [`kalman_gradient`] solves this two-point boundary-value system in O(N) by
//! a Kalman-like sweep: a forward filter producing X̂_{k|k} and covariance-like
//! factors P̄_k, a backward dual pass, and a final correction
//! X̂_{k} = X̂_{k|k} + C_k A_kᵀ Λ_k. [`direct_kkt_solve`] solves the same
//! system as one dense linear solve and exists purely as an oracle;
//! [`diff_kkt_residual`] measures how well any candidate pair satisfies the
//! three equation families.

use crate::linalg::lu_diag_condition;
use crate::mhe::{EstimationModel, HorizonSolution, MheProblem};
use crate::weights::ThetaParams;
use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Stage data of the differentiated KKT system.
#[derive(Debug, Clone)]
pub struct DiffKktMatrices {
    pub n: usize,
    pub nx: usize,
    pub ntheta: usize,
    /// A_k, k = 0..N−2.
    pub a: Vec<DMatrix<f64>>,
    /// B Q_k⁻¹ Bᵀ, k = 0..N−2.
    pub bq_bt: Vec<DMatrix<f64>>,
    /// S_k = G_k − HᵀR_kH, k = 0..N−1.
    pub s: Vec<DMatrix<f64>>,
    /// D_k, k = 0..N−2 (nx×|θ|).
    pub d: Vec<DMatrix<f64>>,
    /// E_k, k = 0..N−1 (nx×|θ|); E_0 only enters through F.
    pub e: Vec<DMatrix<f64>>,
    /// Boundary right-hand side (nx×|θ|).
    pub f: DMatrix<f64>,
    /// Diagonal of P⁻¹.
    pub p_inv: DVector<f64>,
}

/// Solution of the differentiated KKT system plus the filter intermediates
/// (exposed for the equivalence and induction checks).
#[derive(Debug, Clone)]
pub struct GradientTrajectory {
    /// X̂_k = ∂x̂_{k|N}/∂θ, k = 0..N−1.
    pub x_hat: Vec<DMatrix<f64>>,
    /// Λ_k, k = 0..N−2.
    pub lambda: Vec<DMatrix<f64>>,
    /// Filtered sensitivities X̂_{k|k} before the dual correction.
    pub x_filt: Vec<DMatrix<f64>>,
    /// P̄_k factors of the forward sweep.
    pub p_bar: Vec<DMatrix<f64>>,
    /// C_k = (I − P̄_kS_k)⁻¹ P̄_k correction gains.
    pub gain: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradientError {
    /// The MHE solution is not at a KKT point; its residual is attached.
    NotConverged { kkt_residual: f64 },
    /// (I − P̄_kS_k) at the given stage is numerically singular.
    SingularMatrix { stage: usize },
    NonFinite { stage: usize },
    Dimension(String),
}

impl fmt::Display for GradientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientError::NotConverged { kkt_residual } => {
                write!(f, "MHE solution not converged (KKT residual {kkt_residual:.3e})")
            }
            GradientError::SingularMatrix { stage } => {
                write!(f, "singular sensitivity update at stage {stage}")
            }
            GradientError::NonFinite { stage } => {
                write!(f, "non-finite sensitivity at stage {stage}")
            }
            GradientError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
        }
    }
}

impl std::error::Error for GradientError {}

/// A solution must satisfy the KKT conditions at least this well before its
/// sensitivities are meaningful.
pub const CONVERGENCE_GATE: f64 = 1e-6;
/// Diagonal-ratio condition estimate above which a stage factorization is
/// declared singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Assemble the differentiated KKT system at a converged solution.
///
/// `theta` must be the same parameter vector the problem's stage weights were
/// expanded from; the structural derivatives ∂R_k/∂θ, ∂Q_k/∂θ, ∂P/∂θ come
/// from its forgetting-factor parameterization.
pub fn build_diff_kkt<M: EstimationModel>(
    problem: &MheProblem<M>,
    solution: &HorizonSolution,
    theta: &ThetaParams,
) -> Result<DiffKktMatrices, GradientError> {
    let n = problem.horizon;
    let nx = problem.model.nx();
    let nw = problem.model.nw();
    let ny = problem.model.ny();
    let ntheta = theta.dim();

    if solution.states.len() != n || solution.duals.len() != n - 1 {
        return Err(GradientError::Dimension(format!(
            "solution has {} states / {} duals for horizon {n}",
            solution.states.len(),
            solution.duals.len()
        )));
    }
    if theta.p.len() != nx || theta.r.len() != ny || theta.q.len() != nw {
        return Err(GradientError::Dimension(format!(
            "theta blocks ({},{},{}) vs model dims ({nx},{ny},{nw})",
            theta.p.len(),
            theta.r.len(),
            theta.q.len()
        )));
    }
    if solution.kkt_residual >= CONVERGENCE_GATE {
        return Err(GradientError::NotConverged { kkt_residual: solution.kkt_residual });
    }

    let b = problem.model.jac_w();
    let mut a = Vec::with_capacity(n - 1);
    let mut bq_bt = Vec::with_capacity(n - 1);
    let mut s = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n - 1);
    let mut e = Vec::with_capacity(n);

    for k in 0..n {
        // S_k = G_k − HᵀR_kH; the last stage has no dual and no curvature.
        let mut s_k = if k < n - 1 {
            a.push(problem.model.jac_x(&solution.states[k], &problem.controls[k]));
            problem.model.curvature(&solution.states[k], &problem.controls[k], &solution.duals[k])
        } else {
            DMatrix::zeros(nx, nx)
        };
        let r_k = &problem.weights.r_diag[k];
        for i in 0..ny {
            s_k[(i, i)] -= r_k[i];
        }
        s.push(s_k);

        // E_k columns: ∂R_k/∂θ_j applied to the measurement residual.
        let mut e_k = DMatrix::zeros(nx, ntheta);
        let mut res = DVector::zeros(ny);
        for i in 0..ny {
            res[i] = problem.measurements[k][i] - solution.states[k][i];
        }
        for j in 0..ntheta {
            if let Some(dr) = theta.r_partial(n, k, j) {
                for i in 0..ny {
                    e_k[(i, j)] = dr[i] * res[i];
                }
            }
        }
        e.push(e_k);

        if k < n - 1 {
            let q_k = &problem.weights.q_diag[k];
            let mut bqb = DMatrix::zeros(nx, nx);
            // B diag(1/q) Bᵀ.
            for c in 0..nw {
                let col = b.column(c) / q_k[c];
                bqb.ger(1.0, &col, &b.column(c).into_owned(), 1.0);
            }
            bq_bt.push(bqb);

            let v = b.tr_mul(&solution.duals[k]);
            let mut d_k = DMatrix::zeros(nx, ntheta);
            for j in 0..ntheta {
                if let Some(dq) = theta.q_partial(n, k, j) {
                    let mut w = DVector::zeros(nw);
                    for i in 0..nw {
                        w[i] = -dq[i] * v[i] / (q_k[i] * q_k[i]);
                    }
                    let col = &b * w;
                    d_k.column_mut(j).copy_from(&col);
                }
            }
            d.push(d_k);
        }
    }

    let p_inv = DVector::from_iterator(nx, problem.weights.p_diag.iter().map(|p| 1.0 / p));
    // F = P⁻¹(E_0 − (∂P/∂θ)(x̂_0 − x̄_0)); ∂P/∂θ_j is the single-entry matrix
    // for the p-block components and zero otherwise.
    let mut f = DMatrix::zeros(nx, ntheta);
    for j in 0..ntheta {
        for i in 0..nx {
            f[(i, j)] = p_inv[i] * e[0][(i, j)];
        }
        if let Some(dp) = theta.p_partial(j) {
            for i in 0..nx {
                if dp[i] != 0.0 {
                    f[(i, j)] -= p_inv[i] * dp[i] * (solution.states[0][i] - problem.prior[i]);
                }
            }
        }
    }

    Ok(DiffKktMatrices { n, nx, ntheta, a, bq_bt, s, d, e, f, p_inv })
}

fn check_matrix_finite(m: &DMatrix<f64>, stage: usize) -> Result<(), GradientError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GradientError::NonFinite { stage })
    }
}

/// Solve the differentiated KKT system by the O(N) Kalman-form sweep.
///
/// Forward, with P̄_0 = P⁻¹ and X̂_{0|0} = (I − P̄_0S_0)⁻¹F:
///   X̂_{k|k−1} = A_{k−1}X̂_{k−1|k−1} + D_{k−1},
///   P̄_k = A_{k−1}C_{k−1}A_{k−1}ᵀ + BQ_{k−1}⁻¹Bᵀ,
///   X̂_{k|k} = (I − P̄_kS_k)⁻¹(X̂_{k|k−1} + P̄_kE_k),
/// with gains C_k = (I − P̄_kS_k)⁻¹P̄_k. Backward, from Λ_{N−1} = 0:
///   Λ_{k−1} = (I + S_kC_k)A_kᵀΛ_k + S_kX̂_{k|k} + E_k,
/// (the A-term absent at the last stage). Final correction:
///   X̂_k = X̂_{k|k} + C_kA_kᵀΛ_k.
pub fn kalman_gradient(m: &DiffKktMatrices) -> Result<GradientTrajectory, GradientError> {
    let n = m.n;
    let nx = m.nx;
    let mut x_filt = Vec::with_capacity(n);
    let mut p_bar = Vec::with_capacity(n);
    let mut gain = Vec::with_capacity(n);

    // Forward filter.
    for k in 0..n {
        let pb = if k == 0 {
            DMatrix::from_diagonal(&m.p_inv)
        } else {
            &m.a[k - 1] * &gain[k - 1] * m.a[k - 1].transpose() + &m.bq_bt[k - 1]
        };
        check_matrix_finite(&pb, k)?;
        let mut coeff = -&pb * &m.s[k];
        for i in 0..nx {
            coeff[(i, i)] += 1.0;
        }
        let lu = coeff.lu();
        if lu_diag_condition(&lu) > CONDITION_LIMIT {
            return Err(GradientError::SingularMatrix { stage: k });
        }
        // The stage-0 measurement inhomogeneity is already folded into F, so
        // only later stages add the P̄_kE_k term.
        let target = if k == 0 {
            m.f.clone()
        } else {
            &m.a[k - 1] * &x_filt[k - 1] + &m.d[k - 1] + &pb * &m.e[k]
        };
        let xf = lu.solve(&target).ok_or(GradientError::SingularMatrix { stage: k })?;
        let c = lu.solve(&pb).ok_or(GradientError::SingularMatrix { stage: k })?;
        check_matrix_finite(&xf, k)?;
        x_filt.push(xf);
        p_bar.push(pb);
        gain.push(c);
    }

    // Backward dual pass.
    let mut lambda = vec![DMatrix::zeros(nx, m.ntheta); n - 1];
    for k in (1..n).rev() {
        let mut lam = &m.s[k] * &x_filt[k] + &m.e[k];
        if k < n - 1 {
            let at_lam = m.a[k].tr_mul(&lambda[k]);
            lam += &at_lam + &m.s[k] * (&gain[k] * &at_lam);
        }
        check_matrix_finite(&lam, k)?;
        lambda[k - 1] = lam;
    }

    // Smoothing correction.
    let mut x_hat = Vec::with_capacity(n);
    for k in 0..n {
        if k < n - 1 {
            x_hat.push(&x_filt[k] + &gain[k] * m.a[k].tr_mul(&lambda[k]));
        } else {
            x_hat.push(x_filt[k].clone());
        }
    }

    Ok(GradientTrajectory { x_hat, lambda, x_filt, p_bar, gain })
}

/// Solve the differentiated KKT system as one dense linear system over the
/// stacked unknowns [X̂_0..X̂_{N−1}, Λ_0..Λ_{N−2}]. O((N·nx)³) — an oracle for
/// [`kalman_gradient`], not a production path.
pub fn direct_kkt_solve(
    m: &DiffKktMatrices,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), GradientError> {
    let n = m.n;
    let nx = m.nx;
    let dim = nx * (2 * n - 1);
    let x_off = |k: usize| k * nx;
    let l_off = |k: usize| (n + k) * nx;

    let mut sys = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, m.ntheta);

    // Boundary block row.
    {
        let mut blk = -DMatrix::from_diagonal(&m.p_inv) * &m.s[0];
        for i in 0..nx {
            blk[(i, i)] += 1.0;
        }
        sys.view_mut((0, x_off(0)), (nx, nx)).copy_from(&blk);
        let pat = DMatrix::from_diagonal(&m.p_inv) * m.a[0].transpose();
        sys.view_mut((0, l_off(0)), (nx, nx)).copy_from(&(-pat));
        rhs.rows_mut(0, nx).copy_from(&m.f);
    }
    // Forward rows: X̂_{k+1} − A_kX̂_k − (BQ⁻¹Bᵀ)Λ_k = D_k.
    for k in 0..n - 1 {
        let row = (1 + k) * nx;
        for i in 0..nx {
            sys[(row + i, x_off(k + 1) + i)] = 1.0;
        }
        sys.view_mut((row, x_off(k)), (nx, nx)).copy_from(&(-&m.a[k]));
        sys.view_mut((row, l_off(k)), (nx, nx)).copy_from(&(-&m.bq_bt[k]));
        rhs.rows_mut(row, nx).copy_from(&m.d[k]);
    }
    // Backward rows: Λ_{k−1} − A_kᵀΛ_k − S_kX̂_k = E_k.
    for k in 1..n {
        let row = (n + k - 1) * nx;
        for i in 0..nx {
            sys[(row + i, l_off(k - 1) + i)] = 1.0;
        }
        sys.view_mut((row, x_off(k)), (nx, nx)).copy_from(&(-&m.s[k]));
        if k < n - 1 {
            sys.view_mut((row, l_off(k)), (nx, nx)).copy_from(&(-m.a[k].transpose()));
        }
        rhs.rows_mut(row, nx).copy_from(&m.e[k]);
    }

    let sol = sys.lu().solve(&rhs).ok_or(GradientError::SingularMatrix { stage: 0 })?;
    check_matrix_finite(&sol, 0)?;

    let x_hat = (0..n).map(|k| sol.rows(x_off(k), nx).into_owned()).collect();
    let lambda = (0..n - 1).map(|k| sol.rows(l_off(k), nx).into_owned()).collect();
    Ok((x_hat, lambda))
}

/// Max-norm residual of a candidate (X̂, Λ) pair over the three equation
/// families of the differentiated KKT system. Zero for an exact solution.
pub fn diff_kkt_residual(
    m: &DiffKktMatrices,
    x_hat: &[DMatrix<f64>],
    lambda: &[DMatrix<f64>],
) -> f64 {
    let n = m.n;
    let nx = m.nx;
    let mut worst: f64 = 0.0;

    // Boundary.
    {
        let mut blk = -DMatrix::from_diagonal(&m.p_inv) * &m.s[0];
        for i in 0..nx {
            blk[(i, i)] += 1.0;
        }
        let res =
            blk * &x_hat[0] - DMatrix::from_diagonal(&m.p_inv) * m.a[0].tr_mul(&lambda[0]) - &m.f;
        worst = worst.max(res.amax());
    }
    for k in 0..n - 1 {
        let res = &x_hat[k + 1] - &m.a[k] * &x_hat[k] - &m.bq_bt[k] * &lambda[k] - &m.d[k];
        worst = worst.max(res.amax());
    }
    for k in 1..n {
        let mut res = &lambda[k - 1] - &m.s[k] * &x_hat[k] - &m.e[k];
        if k < n - 1 {
            res -= m.a[k].tr_mul(&lambda[k]);
        }
        worst = worst.max(res.amax());
    }
    worst
}
