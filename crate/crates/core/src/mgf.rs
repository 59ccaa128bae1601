//! Log moment generating functions of the counts and escapes.
//!
//! Everything is kept in log space and written with `log1p`/`expm1`, so the
//! maps vanish exactly at the origin and small arguments keep full relative
//! precision. The stationary log-m.g.f. is the series
//! `sum_r log F(H^(r)(alpha))`, where `H` is the one-step redistribution map.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chain::{EscapeProfile, JumpMatrix, OpenChainModel};
use crate::protocols::IncomingProtocol;

/// Default step for [`numeric_cumulants`].
pub const DEFAULT_STEP: f64 = 1e-4;

/// Richardson estimates at `h` and `2h` must agree to this.
pub const EXTRAPOLATION_TOL: f64 = 1e-5;

/// Default truncation tolerance for stationary evaluators.
pub const DEFAULT_MGF_TOL: f64 = 1e-14;

const MAX_DEPTH: usize = 1_000_000;
const CONTRACTION_CHECK_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MgfError {
    #[error("log-m.g.f. of a Markov-modulated protocol is not a single-step product")]
    UnsupportedVariant,

    #[error("H iterates fail to contract (depth {depth})")]
    NotContracting { depth: usize },

    #[error("finite-difference estimates disagree by {disagreement:e}; reduce the step")]
    StepTooLarge { disagreement: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, MgfError>;

/// `H_i(alpha) = log(e_i + sum_j q_ij exp(alpha_j))`.
///
/// Evaluated as `log1p(sum_j q_ij expm1(alpha_j))`, which equals the above
/// because `e_i = 1 - sum_j q_ij`; the escape profile is implied by `jump`.
pub fn h_map(alpha: &DVector<f64>, jump: &JumpMatrix, _escape: &EscapeProfile) -> DVector<f64> {
    let shifted = alpha.map(f64::exp_m1);
    (jump.matrix() * shifted).map(f64::ln_1p)
}

/// `H^(r)(alpha)`; `r = 0` returns `alpha`.
pub fn iterate_h(alpha: &DVector<f64>, r: usize, jump: &JumpMatrix, escape: &EscapeProfile) -> DVector<f64> {
    let mut x = alpha.clone();
    for _ in 0..r {
        x = h_map(&x, jump, escape);
    }
    x
}

/// `C_i(alpha) = log(1 - e_i + e_i exp(alpha_i))`.
pub fn c_map(alpha: &DVector<f64>, escape: &EscapeProfile) -> DVector<f64> {
    alpha.zip_map(escape.vector(), |a, e| (e * a.exp_m1()).ln_1p())
}

fn table_log_mgf<'a>(entries: impl Iterator<Item = (&'a Vec<u64>, f64)>, alpha: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for (v, p) in entries {
        let dot: f64 = v.iter().zip(alpha.iter()).map(|(&c, a)| c as f64 * a).sum();
        acc += p * dot.exp_m1();
    }
    acc.ln_1p()
}

/// `log E[exp(alpha . J)]` for a time-independent protocol.
pub fn protocol_log_mgf(protocol: &IncomingProtocol, alpha: &DVector<f64>) -> Result<f64> {
    if alpha.len() != protocol.dimension() {
        return Err(MgfError::DimensionMismatch {
            expected: protocol.dimension(),
            found: alpha.len(),
        });
    }
    match protocol {
        IncomingProtocol::Constant { counts } => Ok(counts
            .iter()
            .zip(alpha.iter())
            .map(|(&c, a)| c as f64 * a)
            .sum()),
        IncomingProtocol::IidProduct { marginals } => Ok(marginals
            .iter()
            .zip(alpha.iter())
            .map(|(table, &a)| {
                table
                    .iter()
                    .map(|(&v, p)| p * (v as f64 * a).exp_m1())
                    .sum::<f64>()
                    .ln_1p()
            })
            .sum()),
        IncomingProtocol::JointTable { table } => Ok(table_log_mgf(table.entries(), alpha)),
        IncomingProtocol::MarkovModulated { .. } => Err(MgfError::UnsupportedVariant),
    }
}

/// Value of a truncated stationary log-m.g.f. and the depth used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedValue {
    pub value: f64,
    pub depth: usize,
}

fn check_dimension(model: &OpenChainModel, alpha: &DVector<f64>) -> Result<()> {
    if alpha.len() != model.states() {
        return Err(MgfError::DimensionMismatch {
            expected: model.states(),
            found: alpha.len(),
        });
    }
    Ok(())
}

/// `sum_{r=0}^{R} log F(H^(r)(alpha))`, stopping at the first term with
/// magnitude below `tol * (1 - rho)`.
pub fn log_stationary_mgf(model: &OpenChainModel, alpha: &DVector<f64>, tol: f64) -> Result<TruncatedValue> {
    check_dimension(model, alpha)?;
    let (jump, escape) = (model.jump(), model.escape());
    let threshold = tol * (1.0 - jump.spectral_radius());
    let start_norm = alpha.amax();
    let mut x = alpha.clone();
    let mut value = 0.0;
    for r in 0..MAX_DEPTH {
        if !x.iter().all(|v| v.is_finite())
            || (r == CONTRACTION_CHECK_DEPTH && x.amax() > start_norm)
        {
            return Err(MgfError::NotContracting { depth: r });
        }
        let term = protocol_log_mgf(model.protocol(), &x)?;
        if !term.is_finite() {
            return Err(MgfError::NotContracting { depth: r });
        }
        value += term;
        if term.abs() < threshold {
            return Ok(TruncatedValue { value, depth: r });
        }
        x = h_map(&x, jump, escape);
    }
    Err(MgfError::NotContracting { depth: MAX_DEPTH })
}

/// `log G_t(alpha)`, unrolled from `log G_{t+1}(a) = log F(a) + log G_t(H(a))`:
/// `initial(H^(t)(alpha)) + sum_{r<t} log F(H^(r)(alpha))`.
pub fn log_mgf_at_time<F>(model: &OpenChainModel, alpha: &DVector<f64>, t: usize, initial_log_mgf: F) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    check_dimension(model, alpha)?;
    let mut x = alpha.clone();
    let mut value = 0.0;
    for _ in 0..t {
        value += protocol_log_mgf(model.protocol(), &x)?;
        x = h_map(&x, model.jump(), model.escape());
    }
    Ok(value + initial_log_mgf(&x))
}

/// Log-m.g.f. of a deterministic starting vector.
pub fn deterministic_log_mgf(counts: &[u64]) -> impl Fn(&DVector<f64>) -> f64 + Clone + Send + Sync + 'static {
    let counts: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    move |alpha: &DVector<f64>| counts.iter().zip(alpha.iter()).map(|(c, a)| c * a).sum()
}

/// Stationary log-m.g.f. of the escapes: `log G(C(alpha))`.
pub fn outgoing_log_mgf(model: &OpenChainModel, alpha: &DVector<f64>, tol: f64) -> Result<f64> {
    check_dimension(model, alpha)?;
    Ok(log_stationary_mgf(model, &c_map(alpha, model.escape()), tol)?.value)
}

/// Log-m.g.f. of the escapes during step `t`: `log G_t(C(alpha))`.
pub fn outgoing_log_mgf_at_time<F>(model: &OpenChainModel, alpha: &DVector<f64>, t: usize, initial_log_mgf: F) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    check_dimension(model, alpha)?;
    log_mgf_at_time(model, &c_map(alpha, model.escape()), t, initial_log_mgf)
}

type EvalFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;

/// A log-m.g.f. as an evaluatable function, plus where it came from.
#[derive(Clone)]
pub struct LogMgfEvaluator {
    dimension: usize,
    function: Arc<EvalFn>,
    /// Fingerprint of the model the evaluator was built from, if any.
    pub fingerprint: Option<String>,
    /// Number of series terms summed beyond the first.
    pub depth: Option<usize>,
    /// Half-width of the box around the origin the evaluator is valid on.
    pub radius: f64,
}

impl fmt::Debug for LogMgfEvaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogMgfEvaluator")
            .field("dimension", &self.dimension)
            .field("fingerprint", &self.fingerprint)
            .field("depth", &self.depth)
            .field("radius", &self.radius)
            .finish()
    }
}

impl LogMgfEvaluator {
    pub fn new<F>(dimension: usize, radius: f64, function: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self {
            dimension,
            function: Arc::new(function),
            fingerprint: None,
            depth: None,
            radius,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn eval(&self, alpha: &DVector<f64>) -> f64 {
        (self.function)(alpha)
    }

    /// Stationary log-m.g.f. of the counts with a fixed series depth.
    ///
    /// The depth is chosen once by the truncation rule at `alpha = (1, ..., 1)`
    /// and reused for every evaluation, which keeps the evaluator smooth in
    /// `alpha` (needed for finite differencing).
    pub fn stationary(model: &OpenChainModel, tol: f64) -> Result<Self> {
        Self::stationary_composed(model, tol, false)
    }

    /// Stationary log-m.g.f. of the per-state escapes.
    pub fn outgoing(model: &OpenChainModel, tol: f64) -> Result<Self> {
        Self::stationary_composed(model, tol, true)
    }

    fn stationary_composed(model: &OpenChainModel, tol: f64, outgoing: bool) -> Result<Self> {
        let reference = DVector::from_element(model.states(), 1.0);
        let depth = log_stationary_mgf(model, &reference, tol)?.depth;
        let owned = model.clone();
        let function = move |alpha: &DVector<f64>| {
            let mut x = if outgoing {
                c_map(alpha, owned.escape())
            } else {
                alpha.clone()
            };
            let mut value = 0.0;
            for _ in 0..=depth {
                value += protocol_log_mgf(owned.protocol(), &x).unwrap_or(f64::NAN);
                x = h_map(&x, owned.jump(), owned.escape());
            }
            value
        };
        Ok(Self {
            dimension: model.states(),
            function: Arc::new(function),
            fingerprint: Some(model.fingerprint()),
            depth: Some(depth),
            radius: 1.0,
        })
    }

    /// Log-m.g.f. of the counts at time `t` from a deterministic start.
    pub fn at_time(model: &OpenChainModel, t: usize, initial: &[u64]) -> Result<Self> {
        if initial.len() != model.states() {
            return Err(MgfError::DimensionMismatch {
                expected: model.states(),
                found: initial.len(),
            });
        }
        if !model.protocol().is_time_independent() {
            return Err(MgfError::UnsupportedVariant);
        }
        let owned = model.clone();
        let init = deterministic_log_mgf(initial);
        let function = move |alpha: &DVector<f64>| {
            log_mgf_at_time(&owned, alpha, t, &init).unwrap_or(f64::NAN)
        };
        Ok(Self {
            dimension: model.states(),
            function: Arc::new(function),
            fingerprint: Some(model.fingerprint()),
            depth: Some(t),
            radius: f64::INFINITY,
        })
    }
}

fn unit(n: usize, i: usize, h: f64) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = h;
    v
}

fn difference_estimates(evaluator: &LogMgfEvaluator, h: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = evaluator.dimension();
    let f0 = evaluator.eval(&DVector::zeros(n));
    let mut gradient = DVector::zeros(n);
    let mut hessian = DMatrix::zeros(n, n);
    let plus: Vec<f64> = (0..n).map(|i| evaluator.eval(&unit(n, i, h))).collect();
    let minus: Vec<f64> = (0..n).map(|i| evaluator.eval(&unit(n, i, -h))).collect();
    for i in 0..n {
        gradient[i] = (plus[i] - minus[i]) / (2.0 * h);
        hessian[(i, i)] = (plus[i] - 2.0 * f0 + minus[i]) / (h * h);
    }
    for i in 0..n {
        for j in i + 1..n {
            let corner = |si: f64, sj: f64| {
                evaluator.eval(&(unit(n, i, si * h) + unit(n, j, sj * h)))
            };
            let value = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h * h);
            hessian[(i, j)] = value;
            hessian[(j, i)] = value;
        }
    }
    (gradient, hessian)
}

/// First two cumulants by central differences at the origin, with one level
/// of Richardson extrapolation between steps `h` and `2h`.
pub fn numeric_cumulants(evaluator: &LogMgfEvaluator, h: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (g1, h1) = difference_estimates(evaluator, h);
    let (g2, h2) = difference_estimates(evaluator, 2.0 * h);
    let disagreement = (&g1 - &g2).amax().max((&h1 - &h2).amax());
    if !(disagreement <= EXTRAPOLATION_TOL) {
        return Err(MgfError::StepTooLarge { disagreement });
    }
    let gradient = (&g1 * 4.0 - g2) / 3.0;
    let hessian = (&h1 * 4.0 - h2) / 3.0;
    Ok((gradient, hessian))
}
