//! The estimator tuning vector θ and its structure.
//!
//! θ collects the diagonal arrival-cost weight P, the newest-stage measurement
//! weight diag(r) and process weight diag(q), and two forgetting factors that
//! spread those along the horizon geometrically:
//!
//!   R_k = γ₁^(N−1−k) · diag(r),   k = 0..N−1   (stage N−1 is the newest)
//!   Q_k = γ₂^(N−2−k) · diag(q),   k = 0..N−2
//!
//! Stages are indexed from 0 (oldest) throughout the code; the newest stage
//! carries the undecayed weights. For the quadrotor (24-dim state, 18-dim
//! measurement, 6-dim noise) θ has 24 + 1 + 18 + 1 + 6 = 50 entries, flattened
//! in the fixed order [p, γ₁, r, γ₂, q]. All block sizes are generic so that
//! low-dimensional fixtures exercise the identical code path.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default lower bound for both forgetting factors.
pub const DEFAULT_GAMMA_MIN: f64 = 0.2;
/// Positivity floor applied to p, r, q by [`ThetaParams::project_update`].
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum ThetaError {
    HorizonTooShort { n: usize },
    NonPositive { block: &'static str, index: usize, value: f64 },
    GammaOutOfRange { which: &'static str, value: f64, gamma_min: f64 },
    DimensionMismatch { expected: usize, got: usize },
}

impl fmt::Display for ThetaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThetaError::HorizonTooShort { n } => {
                write!(f, "horizon must be at least 2 stages, got {n}")
            }
            ThetaError::NonPositive { block, index, value } => {
                write!(f, "weight {block}[{index}] must be positive, got {value}")
            }
            ThetaError::GammaOutOfRange { which, value, gamma_min } => {
                write!(f, "{which} = {value} outside [{gamma_min}, 1)")
            }
            ThetaError::DimensionMismatch { expected, got } => {
                write!(f, "flat theta has {got} entries, expected {expected}")
            }
        }
    }
}

impl std::error::Error for ThetaError {}

/// Which block of θ a flat index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaComponent {
    P(usize),
    Gamma1,
    R(usize),
    Gamma2,
    Q(usize),
}

/// The tuning vector θ. See the module docs for the flattening order and the
/// forgetting structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaJson", into = "ThetaJson")]
pub struct ThetaParams {
    /// Diagonal of the arrival-cost weight P (one entry per state component).
    pub p: DVector<f64>,
    /// Measurement-weight forgetting factor.
    pub gamma1: f64,
    /// Diagonal of the newest-stage measurement weight.
    pub r: DVector<f64>,
    /// Process-weight forgetting factor.
    pub gamma2: f64,
    /// Diagonal of the newest-stage process weight.
    pub q: DVector<f64>,
    /// Lower bound for both forgetting factors (not itself tuned).
    pub gamma_min: f64,
}

/// Expanded per-stage diagonals for one horizon.
#[derive(Debug, Clone)]
pub struct StageWeights {
    pub p_diag: DVector<f64>,
    /// One measurement-weight diagonal per stage, oldest first.
    pub r_diag: Vec<DVector<f64>>,
    /// One process-weight diagonal per transition, oldest first (N−1 entries).
    pub q_diag: Vec<DVector<f64>>,
}

/// Dense structural derivatives of the stage-k weights with respect to every
/// flat θ component: `dp[j]`, `dr[j]`, `dq[j]` are the derivatives of the
/// diagonals of P, R_k, Q_k. For the last stage (k = N−1) there is no Q and
/// `dq` is all zeros.
#[derive(Debug, Clone)]
pub struct StagePartials {
    pub dp: Vec<DVector<f64>>,
    pub dr: Vec<DVector<f64>>,
    pub dq: Vec<DVector<f64>>,
}

/// Per-group learning rates for the gradient step on θ.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub p: f64,
    pub gamma: f64,
    pub rq: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { p: 0.01, gamma: 1e-4, rq: 0.1 }
    }
}

/// Outcome report of a projected gradient step.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionReport {
    /// Step halvings needed to keep γ₁ / γ₂ strictly inside (γ_min, 1).
    pub gamma_backtracks: [u32; 2],
    /// Set when backtracking could not restore feasibility and the γ step was
    /// dropped entirely.
    pub gamma_stalled: [bool; 2],
    /// Number of p/r/q entries clamped at the positivity floor.
    pub floor_clamps: usize,
}

impl ThetaParams {
    /// θ with uniform initial weights for the standard quadrotor dimensions
    /// (24-state, 18-measurement, 6-noise): p_i = p0, r_j = r0, q_l = q0.
    pub fn uniform_quadrotor(p0: f64, r0: f64, q0: f64, gamma1: f64, gamma2: f64) -> Self {
        Self {
            p: DVector::from_element(24, p0),
            gamma1,
            r: DVector::from_element(18, r0),
            gamma2,
            q: DVector::from_element(6, q0),
            gamma_min: DEFAULT_GAMMA_MIN,
        }
    }

    /// Number of flat components: |p| + 1 + |r| + 1 + |q|.
    pub fn dim(&self) -> usize {
        self.p.len() + self.r.len() + self.q.len() + 2
    }

    pub fn validate(&self) -> Result<(), ThetaError> {
        for (block, v) in [("p", &self.p), ("r", &self.r), ("q", &self.q)] {
            for (i, &x) in v.iter().enumerate() {
                if !(x > 0.0) {
                    return Err(ThetaError::NonPositive { block, index: i, value: x });
                }
            }
        }
        for (which, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            // The lower bound is attainable: trained forgetting factors are
            // routinely pinned at γ_min.
            if !(g >= self.gamma_min && g < 1.0) {
                return Err(ThetaError::GammaOutOfRange {
                    which,
                    value: g,
                    gamma_min: self.gamma_min,
                });
            }
        }
        Ok(())
    }

    /// Flatten in the contract order [p, γ₁, r, γ₂, q].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut at = 0;
        out.rows_mut(at, self.p.len()).copy_from(&self.p);
        at += self.p.len();
        out[at] = self.gamma1;
        at += 1;
        out.rows_mut(at, self.r.len()).copy_from(&self.r);
        at += self.r.len();
        out[at] = self.gamma2;
        at += 1;
        out.rows_mut(at, self.q.len()).copy_from(&self.q);
        out
    }

    /// Rebuild from a flat vector with the given block sizes.
    pub fn from_flat(
        flat: &DVector<f64>,
        np: usize,
        nr: usize,
        nq: usize,
        gamma_min: f64,
    ) -> Result<Self, ThetaError> {
        let expected = np + nr + nq + 2;
        if flat.len() != expected {
            return Err(ThetaError::DimensionMismatch { expected, got: flat.len() });
        }
        Ok(Self {
            p: flat.rows(0, np).into_owned(),
            gamma1: flat[np],
            r: flat.rows(np + 1, nr).into_owned(),
            gamma2: flat[np + 1 + nr],
            q: flat.rows(np + nr + 2, nq).into_owned(),
            gamma_min,
        })
    }

    /// Classify a flat index.
    pub fn component(&self, j: usize) -> ThetaComponent {
        let np = self.p.len();
        let nr = self.r.len();
        if j < np {
            ThetaComponent::P(j)
        } else if j == np {
            ThetaComponent::Gamma1
        } else if j < np + 1 + nr {
            ThetaComponent::R(j - np - 1)
        } else if j == np + 1 + nr {
            ThetaComponent::Gamma2
        } else {
            ThetaComponent::Q(j - np - nr - 2)
        }
    }

    /// Forgetting decay γ₁^(N−1−k) applied to the stage-k measurement weight.
    pub fn r_decay(&self, n: usize, k: usize) -> f64 {
        self.gamma1.powi((n - 1 - k) as i32)
    }

    /// Forgetting decay γ₂^(N−2−k) applied to the transition-k process weight.
    pub fn q_decay(&self, n: usize, k: usize) -> f64 {
        self.gamma2.powi((n - 2 - k) as i32)
    }

    /// Expand θ into per-stage diagonals for a horizon of `n` measurements.
    pub fn expand(&self, n: usize) -> Result<StageWeights, ThetaError> {
        if n < 2 {
            return Err(ThetaError::HorizonTooShort { n });
        }
        self.validate()?;
        let r_diag = (0..n).map(|k| &self.r * self.r_decay(n, k)).collect();
        let q_diag = (0..n - 1).map(|k| &self.q * self.q_decay(n, k)).collect();
        Ok(StageWeights { p_diag: self.p.clone(), r_diag, q_diag })
    }

    /// Derivative of diag(R_k) with respect to flat component `j`, or `None`
    /// when it is identically zero. Stage `k` is 0-based, horizon `n`.
    pub fn r_partial(&self, n: usize, k: usize, j: usize) -> Option<DVector<f64>> {
        match self.component(j) {
            ThetaComponent::R(idx) => {
                let mut d = DVector::zeros(self.r.len());
                d[idx] = self.r_decay(n, k);
                Some(d)
            }
            ThetaComponent::Gamma1 => {
                let e = (n - 1 - k) as i32;
                if e == 0 {
                    None
                } else {
                    Some(&self.r * (e as f64 * self.gamma1.powi(e - 1)))
                }
            }
            _ => None,
        }
    }

    /// Derivative of diag(Q_k) with respect to flat component `j` (transition
    /// index k = 0..N−2), or `None` when identically zero.
    pub fn q_partial(&self, n: usize, k: usize, j: usize) -> Option<DVector<f64>> {
        match self.component(j) {
            ThetaComponent::Q(idx) => {
                let mut d = DVector::zeros(self.q.len());
                d[idx] = self.q_decay(n, k);
                Some(d)
            }
            ThetaComponent::Gamma2 => {
                let e = (n - 2 - k) as i32;
                if e == 0 {
                    None
                } else {
                    Some(&self.q * (e as f64 * self.gamma2.powi(e - 1)))
                }
            }
            _ => None,
        }
    }

    /// Derivative of diag(P) with respect to flat component `j`.
    pub fn p_partial(&self, j: usize) -> Option<DVector<f64>> {
        match self.component(j) {
            ThetaComponent::P(idx) => {
                let mut d = DVector::zeros(self.p.len());
                d[idx] = 1.0;
                Some(d)
            }
            _ => None,
        }
    }

    /// Dense structural derivatives of all stage-k weights for every flat θ
    /// component. Convenience form of the sparse accessors above.
    pub fn theta_partials(&self, n: usize, k: usize) -> StagePartials {
        let dim = self.dim();
        let zero_p = DVector::zeros(self.p.len());
        let zero_r = DVector::zeros(self.r.len());
        let zero_q = DVector::zeros(self.q.len());
        let mut out = StagePartials {
            dp: vec![zero_p; dim],
            dr: vec![zero_r; dim],
            dq: vec![zero_q; dim],
        };
        for j in 0..dim {
            if let Some(d) = self.p_partial(j) {
                out.dp[j] = d;
            }
            if let Some(d) = self.r_partial(n, k, j) {
                out.dr[j] = d;
            }
            if k < n - 1 {
                if let Some(d) = self.q_partial(n, k, j) {
                    out.dq[j] = d;
                }
            }
        }
        out
    }

    /// One projected gradient step θ ← θ − ε ∘ ∇L with per-group rates.
    ///
    /// The γ steps are backtracked (halved, at most 30 times) until the result
    /// lies strictly inside (γ_min, 1); if that fails the γ step is dropped and
    /// flagged. The p, r, q entries are clamped at the positivity floor.
    pub fn project_update(
        &self,
        gradient: &DVector<f64>,
        rates: &LearningRates,
    ) -> (Self, ProjectionReport) {
        assert_eq!(gradient.len(), self.dim(), "gradient/theta dimension mismatch");
        let mut report = ProjectionReport::default();
        let mut out = self.clone();
        let np = self.p.len();
        let nr = self.r.len();

        let clamp = |value: f64, clamps: &mut usize| -> f64 {
            if value < WEIGHT_FLOOR {
                *clamps += 1;
                WEIGHT_FLOOR
            } else {
                value
            }
        };
        for i in 0..np {
            out.p[i] = clamp(self.p[i] - rates.p * gradient[i], &mut report.floor_clamps);
        }
        for i in 0..nr {
            out.r[i] =
                clamp(self.r[i] - rates.rq * gradient[np + 1 + i], &mut report.floor_clamps);
        }
        for i in 0..self.q.len() {
            out.q[i] =
                clamp(self.q[i] - rates.rq * gradient[np + nr + 2 + i], &mut report.floor_clamps);
        }

        let gamma_min = self.gamma_min;
        let mut step_gamma = |current: f64, grad: f64, idx: usize| -> f64 {
            let mut step = rates.gamma * grad;
            for _ in 0..=30 {
                let candidate = current - step;
                if candidate >= gamma_min && candidate < 1.0 {
                    return candidate;
                }
                step *= 0.5;
                report.gamma_backtracks[idx] += 1;
            }
            report.gamma_stalled[idx] = true;
            current
        };
        out.gamma1 = step_gamma(self.gamma1, gradient[np], 0);
        out.gamma2 = step_gamma(self.gamma2, gradient[np + 1 + nr], 1);
        (out, report)
    }
}

/// Serialized form: flat values plus named bounds and block sizes.
#[derive(Serialize, Deserialize)]
struct ThetaJson {
    theta: Vec<f64>,
    dims: ThetaDims,
    bounds: ThetaBounds,
}

#[derive(Serialize, Deserialize)]
struct ThetaDims {
    p: usize,
    r: usize,
    q: usize,
}

#[derive(Serialize, Deserialize)]
struct ThetaBounds {
    gamma_min: f64,
    gamma_max: f64,
    weight_floor: f64,
}

impl From<ThetaParams> for ThetaJson {
    fn from(t: ThetaParams) -> Self {
        ThetaJson {
            theta: t.flatten().iter().copied().collect(),
            dims: ThetaDims { p: t.p.len(), r: t.r.len(), q: t.q.len() },
            bounds: ThetaBounds { gamma_min: t.gamma_min, gamma_max: 1.0, weight_floor: WEIGHT_FLOOR },
        }
    }
}

impl TryFrom<ThetaJson> for ThetaParams {
    type Error = ThetaError;
    fn try_from(j: ThetaJson) -> Result<Self, ThetaError> {
        ThetaParams::from_flat(
            &DVector::from_vec(j.theta),
            j.dims.p,
            j.dims.r,
            j.dims.q,
            j.bounds.gamma_min,
        )
    }
}

/// Affine map from ratios in (0,1) to bounded parameter values, used by the
/// policy parameterization: value_i = min_i + (max_i − min_i) · ratio_i.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundedRatioMap {
    pub mins: DVector<f64>,
    pub maxs: DVector<f64>,
}

impl BoundedRatioMap {
    pub fn new(mins: DVector<f64>, maxs: DVector<f64>) -> Self {
        assert_eq!(mins.len(), maxs.len());
        for i in 0..mins.len() {
            assert!(mins[i] < maxs[i], "bound {i}: min {} must be < max {}", mins[i], maxs[i]);
        }
        Self { mins, maxs }
    }

    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.len() == 0
    }

    /// Map ratios (each strictly inside (0,1)) to values strictly inside the
    /// per-parameter bounds.
    pub fn map(&self, ratio: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            self.mins[i] + (self.maxs[i] - self.mins[i]) * ratio[i]
        })
    }

    /// Derivative of each mapped value with respect to its ratio: max − min.
    pub fn derivative(&self) -> DVector<f64> {
        &self.maxs - &self.mins
    }
}

/// Subset of θ components exposed to the policy parameterization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaMask {
    /// Flat θ indices, strictly increasing.
    pub indices: Vec<usize>,
}

impl ThetaMask {
    /// Default 20-element mask for the standard quadrotor layout: arrival-cost
    /// weights over position/velocity/force blocks (9), measurement weights
    /// over position/velocity (6), process weights over force (3), plus both
    /// forgetting factors.
    pub fn default_quadrotor() -> Self {
        let mut indices: Vec<usize> = Vec::new();
        indices.extend(0..6); // p over position, velocity
        indices.extend(18..21); // p over disturbance force
        indices.push(24); // gamma1
        indices.extend(25..31); // r over position, velocity
        indices.push(43); // gamma2
        indices.extend(44..47); // q over force channels
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Scatter masked values into a full flat θ vector (overwriting the
    /// masked entries of `base`).
    pub fn scatter(&self, base: &DVector<f64>, values: &DVector<f64>) -> DVector<f64> {
        assert_eq!(values.len(), self.indices.len());
        let mut out = base.clone();
        for (slot, &j) in self.indices.iter().enumerate() {
            out[j] = values[slot];
        }
        out
    }

    /// Gather the masked entries of a full flat vector.
    pub fn gather(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.indices.len(), |slot, _| full[self.indices[slot]])
    }
}
