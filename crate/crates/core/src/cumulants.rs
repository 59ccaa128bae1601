//! First two cumulants of the particle counts: transient recurrences,
//! stationary solutions, spatial and lagged correlations, and the moments of
//! the escaping flux.
//!
//! With row-vector means, one step maps `(mu, Sigma)` to
//! `(eps + mu Q, Delta + Lambda(mu) + Q^T Sigma Q)`, where
//! `Lambda(mu)_ij = sum_k mu_k (q_ki delta_ij - q_ki q_kj)` is the covariance
//! injected by the multinomial redistribution.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chain::{EscapeProfile, JumpMatrix, OpenChainModel};
use crate::protocols::{ProtocolError, ProtocolMoments};

/// Default tail tolerance for [`stationary_variance`].
pub const DEFAULT_VARIANCE_TOL: f64 = 1e-12;

const MAX_SERIES_TERMS: usize = 1_000_000;
const FIXED_POINT_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CumulantError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("stationary mean system is singular")]
    SingularSystem,

    #[error("variance series did not reach tolerance after {iterations} terms (residual {residual:e})")]
    ToleranceNotReached { iterations: usize, residual: f64 },

    #[error("state {state} has variance {variance}, correlation is undefined")]
    ZeroVarianceState { state: usize, variance: f64 },

    #[error("parameter {name} = {value} is out of range")]
    ParameterOutOfRange { name: &'static str, value: f64 },

    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, CumulantError>;

/// Mean vector and covariance matrix of the counts at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulantState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl CumulantState {
    pub fn zeros(states: usize) -> Self {
        Self {
            mean: DVector::zeros(states),
            covariance: DMatrix::zeros(states, states),
        }
    }

    /// Cumulants of a deterministic initial condition.
    pub fn deterministic(counts: &[u64]) -> Self {
        let n = counts.len();
        Self {
            mean: DVector::from_iterator(n, counts.iter().map(|&c| c as f64)),
            covariance: DMatrix::zeros(n, n),
        }
    }
}

/// Moments of the per-state escapes `U` and their total `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutgoingMoments {
    pub mean_per_state: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub mean_total: f64,
    pub var_total: f64,
}

/// Which redistribution noise to use in the covariance recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaForm {
    /// Multinomial split per state: off-diagonal terms `-q_ki q_kj`.
    #[default]
    Multinomial,
    /// Independent binomials per destination: diagonal `q_ki (1 - q_ki)` only.
    /// Kept for diagnostics; the simulator does not follow this law.
    IndependentBinomial,
}

pub fn lambda_matrix(mean: &DVector<f64>, jump: &JumpMatrix) -> DMatrix<f64> {
    lambda_matrix_with(LambdaForm::Multinomial, mean, jump)
}

pub fn lambda_matrix_with(form: LambdaForm, mean: &DVector<f64>, jump: &JumpMatrix) -> DMatrix<f64> {
    let q = jump.matrix();
    let n = jump.size();
    let mut lambda = DMatrix::zeros(n, n);
    for k in 0..n {
        let mk = mean[k];
        if mk == 0.0 {
            continue;
        }
        for i in 0..n {
            let qki = q[(k, i)];
            match form {
                LambdaForm::Multinomial => {
                    lambda[(i, i)] += mk * qki;
                    for j in 0..n {
                        lambda[(i, j)] -= mk * qki * q[(k, j)];
                    }
                }
                LambdaForm::IndependentBinomial => {
                    lambda[(i, i)] += mk * qki * (1.0 - qki);
                }
            }
        }
    }
    lambda
}

fn check_dims(state: &CumulantState, moments: &ProtocolMoments, jump: &JumpMatrix) -> Result<()> {
    let n = jump.size();
    for found in [state.mean.len(), state.covariance.nrows(), moments.dimension()] {
        if found != n {
            return Err(CumulantError::DimensionMismatch { expected: n, found });
        }
    }
    Ok(())
}

/// One step of the cumulant recurrence.
pub fn cumulant_step(
    state: &CumulantState,
    step_moments: &ProtocolMoments,
    jump: &JumpMatrix,
) -> Result<CumulantState> {
    check_dims(state, step_moments, jump)?;
    let q = jump.matrix();
    let mean = &step_moments.mean + q.tr_mul(&state.mean);
    let covariance = &step_moments.covariance
        + lambda_matrix(&state.mean, jump)
        + q.tr_mul(&state.covariance) * q;
    Ok(CumulantState { mean, covariance })
}

/// Runs the recurrence over a per-step schedule of arrival moments.
/// The result has one more entry than `schedule`, starting with `initial`.
pub fn evolve(
    initial: &CumulantState,
    schedule: &[ProtocolMoments],
    jump: &JumpMatrix,
) -> Result<Vec<CumulantState>> {
    let mut out = Vec::with_capacity(schedule.len() + 1);
    out.push(initial.clone());
    for moments in schedule {
        let next = cumulant_step(out.last().unwrap(), moments, jump)?;
        out.push(next);
    }
    Ok(out)
}

/// Solves `mu (I - Q) = eps` directly.
pub fn stationary_mean(moments: &ProtocolMoments, jump: &JumpMatrix) -> Result<DVector<f64>> {
    let n = jump.size();
    if moments.dimension() != n {
        return Err(CumulantError::DimensionMismatch {
            expected: n,
            found: moments.dimension(),
        });
    }
    // Column form: (I - Q)^T mu = eps.
    let system = DMatrix::identity(n, n) - jump.matrix().transpose();
    system
        .lu()
        .solve(&moments.mean)
        .ok_or(CumulantError::SingularSystem)
}

/// Sums `sum_k (Q^T)^k (Delta + Lambda(mu)) Q^k` at the stationary mean.
///
/// Terms are added until one has max-norm below `tol * (1 - rho^2)`; one
/// fixed-point application then absorbs the truncated tail.
pub fn stationary_variance(
    moments: &ProtocolMoments,
    jump: &JumpMatrix,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let mean = stationary_mean(moments, jump)?;
    let source = &moments.covariance + lambda_matrix(&mean, jump);
    let q = jump.matrix();
    let rho = jump.spectral_radius();
    let threshold = tol * (1.0 - rho * rho);

    let mut sum = DMatrix::zeros(jump.size(), jump.size());
    let mut term = source.clone();
    let mut converged = false;
    for _ in 0..MAX_SERIES_TERMS {
        sum += &term;
        if term.amax() < threshold {
            converged = true;
            break;
        }
        term = q.tr_mul(&term) * q;
    }
    let polished = &source + q.tr_mul(&sum) * q;
    let residual = (&polished - (&source + q.tr_mul(&polished) * q)).amax();
    if !converged || residual > FIXED_POINT_RESIDUAL {
        return Err(CumulantError::ToleranceNotReached {
            iterations: MAX_SERIES_TERMS,
            residual,
        });
    }
    // Symmetrize away rounding asymmetry.
    Ok((&polished + polished.transpose()) * 0.5)
}

/// Stationary `(mu, Sigma)` for a model with a stationary protocol.
pub fn stationary_state(model: &OpenChainModel, tol: f64) -> Result<CumulantState> {
    let moments = model.protocol().moments()?;
    Ok(CumulantState {
        mean: stationary_mean(&moments, model.jump())?,
        covariance: stationary_variance(&moments, model.jump(), tol)?,
    })
}

/// `Cov(N^t, N^{t+s}) = Sigma_t Q^s`.
pub fn lag_covariance(sigma: &DMatrix<f64>, jump: &JumpMatrix, s: u32) -> DMatrix<f64> {
    sigma * jump.power(s)
}

fn diagonal_roots(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = sigma.nrows();
    let mut roots = DVector::zeros(n);
    for i in 0..n {
        let v = sigma[(i, i)];
        if !(v > 0.0) {
            return Err(CumulantError::ZeroVarianceState {
                state: i,
                variance: v,
            });
        }
        roots[i] = v.sqrt();
    }
    Ok(roots)
}

/// `kappa_ij = Sigma_ij / sqrt(Sigma_ii Sigma_jj)`, with an exact unit diagonal.
pub fn spatial_correlation(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let roots = diagonal_roots(sigma)?;
    let n = sigma.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            sigma[(i, j)] / (roots[i] * roots[j])
        }
    }))
}

/// `C(s)_ij = (Sigma Q^s)_ij / sqrt(Sigma_ii Sigma_jj)`.
pub fn time_correlation(sigma_stat: &DMatrix<f64>, jump: &JumpMatrix, s: u32) -> Result<DMatrix<f64>> {
    if s == 0 {
        return spatial_correlation(sigma_stat);
    }
    let roots = diagonal_roots(sigma_stat)?;
    let lagged = lag_covariance(sigma_stat, jump, s);
    let n = sigma_stat.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        lagged[(i, j)] / (roots[i] * roots[j])
    }))
}

/// `E[U] = mu E`, `Var(U) = E Sigma E + diag(mu_i e_i (1 - e_i))`, and the
/// corresponding totals.
pub fn outgoing_moments(state: &CumulantState, escape: &EscapeProfile) -> OutgoingMoments {
    let e = escape.vector();
    let mean_per_state = state.mean.component_mul(e);
    let mut covariance = DMatrix::from_fn(e.len(), e.len(), |i, j| {
        e[i] * state.covariance[(i, j)] * e[j]
    });
    for i in 0..e.len() {
        covariance[(i, i)] += state.mean[i] * e[i] * (1.0 - e[i]);
    }
    let mean_total = mean_per_state.sum();
    let var_total = e.dot(&(&state.covariance * e))
        + state
            .mean
            .iter()
            .zip(e.iter())
            .map(|(m, ei)| m * (1.0 - ei) * ei)
            .sum::<f64>();
    OutgoingMoments {
        mean_per_state,
        covariance,
        mean_total,
        var_total,
    }
}

/// Closed-form `(kappa_12, kappa_13)` for the symmetric three-state chain
/// (off-diagonal jump probability `q`) fed by
/// [`three_state_example`](crate::protocols::three_state_example)`(p)`.
/// By symmetry `kappa_23 = kappa_13`.
pub fn three_state_kappa(p: f64, q: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CumulantError::ParameterOutOfRange { name: "p", value: p });
    }
    if !(q > 0.0 && q < 0.5) {
        return Err(CumulantError::ParameterOutOfRange { name: "q", value: q });
    }
    let q2 = q * q;
    let q3 = q2 * q;
    let q4 = q2 * q2;
    let q5 = q4 * q;
    let outer = (8.0 * p - 2.0) * q4 - 8.0 * q5 + 4.0 * q3 + 3.0 * q2 + 4.0 * q + 1.0;
    let third = (6.0 - 8.0 * p) * q4 + (4.0 * p + 1.0) * q2 - 8.0 * q5 + 4.0 * q3 + 4.0 * q + 1.0;
    let pair = p * (-8.0 * q4 - 4.0 * q2 + 2.0) + 2.0 * q4 + q2 - 1.0;
    let kappa12 = pair / (outer * outer).sqrt();
    let kappa13 = -2.0 * q2 * (-p + q2 + 1.0) / third.sqrt() / outer.sqrt();
    Ok((kappa12, kappa13))
}
