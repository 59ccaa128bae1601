//! Static chain structure: the jump matrix, escape probabilities and the
//! spectral/connectivity checks that make a jump matrix admissible.
//!
//! Vectors over the state space follow the row-vector convention: a mean
//! distribution `mu` advances as `mu * Q`, which in column form is `Q^T mu`.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocols::IncomingProtocol;

/// Row sums may exceed one by this much before a row is rejected.
pub const ROW_SUM_SLACK: f64 = 1e-12;

/// Admissible jump matrices satisfy `rho(Q) < 1 - SPECTRAL_MARGIN`.
pub const SPECTRAL_MARGIN: f64 = 1e-9;

/// Default iteration cap for [`spectral_radius`].
pub const DEFAULT_POWER_ITERATIONS: usize = 100_000;

const SPECTRAL_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("jump matrix must be square with at least one state, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("negative entry q[{row}][{col}] = {value}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("row {row} sums to {sum}, which exceeds one")]
    RowSumExceedsOne { row: usize, sum: f64 },

    #[error("spectral radius {radius} is not below 1 - {SPECTRAL_MARGIN:e}")]
    SpectralRadiusNotSubunit { radius: f64 },

    #[error("the graph of positive jump probabilities is not irreducible")]
    NotIrreducible,

    #[error("the graph of positive jump probabilities has period {period}")]
    NotAperiodic { period: usize },

    #[error("spectral radius iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("protocol has dimension {found}, chain has {expected} states")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, ChainError>;

/// A validated sub-stochastic jump matrix with spectral radius below one.
///
/// Entry `(i, j)` is the probability that a particle on state `i` moves to
/// state `j` in one step. The positive entries form an irreducible,
/// aperiodic graph, except for the all-zero matrix, which is accepted as the
/// chain in which every particle leaves after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMatrix {
    entries: DMatrix<f64>,
    radius: f64,
}

impl JumpMatrix {
    /// Validates a row-major matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(ChainError::NotSquare { rows: 0, cols: 0 });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(ChainError::NotSquare {
                rows: n,
                cols: bad.len(),
            });
        }
        validate_jump_matrix(&DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[(from, to)]
    }

    /// Spectral radius computed at validation time.
    pub fn spectral_radius(&self) -> f64 {
        self.radius
    }

    pub fn power(&self, k: u32) -> DMatrix<f64> {
        matrix_power(&self.entries, k)
    }

    pub fn row_sums(&self) -> DVector<f64> {
        DVector::from_iterator(self.size(), self.entries.row_iter().map(|r| r.sum()))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    fn is_zero(&self) -> bool {
        self.entries.iter().all(|&x| x == 0.0)
    }
}

impl Serialize for JumpMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

/// Validates a raw matrix as a jump matrix.
///
/// Rows summing to at most `1 + ROW_SUM_SLACK` are renormalized to one; larger
/// excesses are rejected. Checks run in the order: shape, finiteness,
/// nonnegativity, row sums, irreducibility, aperiodicity, spectral radius.
pub fn validate_jump_matrix(raw: &DMatrix<f64>) -> Result<JumpMatrix> {
    let (rows, cols) = raw.shape();
    if rows == 0 || rows != cols {
        return Err(ChainError::NotSquare { rows, cols });
    }
    let mut entries = raw.clone();
    for i in 0..rows {
        for j in 0..cols {
            let value = entries[(i, j)];
            if !value.is_finite() {
                return Err(ChainError::NonFinite { row: i, col: j });
            }
            if value < 0.0 {
                return Err(ChainError::NegativeEntry { row: i, col: j, value });
            }
        }
        let sum: f64 = entries.row(i).sum();
        if sum > 1.0 + ROW_SUM_SLACK {
            return Err(ChainError::RowSumExceedsOne { row: i, sum });
        }
        if sum > 1.0 {
            entries.row_mut(i).unscale_mut(sum);
        }
    }

    let mut jump = JumpMatrix {
        entries,
        radius: 0.0,
    };
    if !jump.is_zero() {
        let adjacency = adjacency(&jump.entries);
        if !is_irreducible(&adjacency) {
            return Err(ChainError::NotIrreducible);
        }
        match period(&adjacency) {
            Some(1) => {}
            Some(period) => return Err(ChainError::NotAperiodic { period }),
            None => return Err(ChainError::NotAperiodic { period: 0 }),
        }
    }

    let radius = spectral_radius(&jump.entries, DEFAULT_POWER_ITERATIONS)?;
    if radius >= 1.0 - SPECTRAL_MARGIN {
        return Err(ChainError::SpectralRadiusNotSubunit { radius });
    }
    jump.radius = radius;
    Ok(jump)
}

/// Per-state probability of leaving the chain, `e_i = 1 - sum_j q_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeProfile {
    escape: DVector<f64>,
}

impl EscapeProfile {
    pub fn vector(&self) -> &DVector<f64> {
        &self.escape
    }

    pub fn get(&self, state: usize) -> f64 {
        self.escape[state]
    }

    /// Diagonal matrix `E` with `E_ii = e_i`.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.escape)
    }
}

pub fn escape_profile(jump: &JumpMatrix) -> EscapeProfile {
    let escape = jump.row_sums().map(|s| (1.0 - s).max(0.0));
    EscapeProfile { escape }
}

/// The triple of jump rules, derived escape profile and inflow protocol.
#[derive(Debug, Clone)]
pub struct OpenChainModel {
    jump: JumpMatrix,
    escape: EscapeProfile,
    protocol: IncomingProtocol,
}

impl OpenChainModel {
    pub fn new(jump: JumpMatrix, protocol: IncomingProtocol) -> Result<Self> {
        if protocol.dimension() != jump.size() {
            return Err(ChainError::DimensionMismatch {
                expected: jump.size(),
                found: protocol.dimension(),
            });
        }
        let escape = escape_profile(&jump);
        Ok(Self {
            jump,
            escape,
            protocol,
        })
    }

    pub fn states(&self) -> usize {
        self.jump.size()
    }

    pub fn jump(&self) -> &JumpMatrix {
        &self.jump
    }

    pub fn escape(&self) -> &EscapeProfile {
        &self.escape
    }

    pub fn protocol(&self) -> &IncomingProtocol {
        &self.protocol
    }

    /// SHA-256 over the canonical JSON encoding of jump matrix and protocol.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            jump: &'a JumpMatrix,
            protocol: &'a IncomingProtocol,
        }
        let bytes = serde_json::to_vec(&Canonical {
            jump: &self.jump,
            protocol: &self.protocol,
        })
        .expect("model serialization is infallible");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Spectral radius of a nonnegative square matrix.
///
/// Power iteration from the all-ones vector, stopped when the
/// Collatz-Wielandt bounds `min_i (Ax)_i/x_i <= rho <= max_i (Ax)_i/x_i`
/// agree to a relative 1e-10. If the iterate never becomes strictly positive
/// (reducible input) or the cap is hit, falls back to repeated squaring with
/// the Gelfand formula `rho = lim ||A^k||^(1/k)`, which suffers no
/// cancellation on nonnegative matrices.
pub fn spectral_radius(matrix: &DMatrix<f64>, max_iterations: usize) -> Result<f64> {
    let n = matrix.nrows();
    let mut x = DVector::from_element(n, 1.0);
    for _ in 0..max_iterations {
        let y = matrix * &x;
        let top = y.max();
        if top <= 0.0 {
            return Ok(0.0);
        }
        if x.iter().all(|&v| v > 0.0) {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
            for (yi, xi) in y.iter().zip(x.iter()) {
                let ratio = yi / xi;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
            if hi - lo <= SPECTRAL_RTOL * hi {
                return Ok(0.5 * (lo + hi));
            }
        }
        x = y / top;
    }
    gelfand_radius(matrix).ok_or(ChainError::NoConvergence {
        iterations: max_iterations,
    })
}

fn gelfand_radius(matrix: &DMatrix<f64>) -> Option<f64> {
    let mut power = matrix.clone();
    let mut log_scale = 0.0;
    let mut previous = f64::NAN;
    for m in 0..60 {
        let norm = power.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if norm == 0.0 {
            return Some(0.0);
        }
        power /= norm;
        log_scale += norm.ln();
        let estimate = (log_scale / 2f64.powi(m)).exp();
        if m > 20 && (estimate - previous).abs() <= SPECTRAL_RTOL * estimate {
            return Some(estimate);
        }
        previous = estimate;
        power = &power * &power;
        log_scale *= 2.0;
    }
    None
}

/// `matrix^k` by repeated squaring; `k = 0` gives the identity.
pub fn matrix_power(matrix: &DMatrix<f64>, mut k: u32) -> DMatrix<f64> {
    let n = matrix.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = matrix.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// 0/1 adjacency of the strictly positive entries.
pub fn adjacency(matrix: &DMatrix<f64>) -> Vec<Vec<bool>> {
    matrix
        .row_iter()
        .map(|r| r.iter().map(|&v| v > 0.0).collect())
        .collect()
}

/// Irreducible iff every entry of `(I + A)^(n-1)` is positive, evaluated as
/// boolean matrix products.
pub fn is_irreducible(adjacency: &[Vec<bool>]) -> bool {
    let n = adjacency.len();
    let mut reach: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i == j || adjacency[i][j]).collect())
        .collect();
    // (I + A)^m covers paths of length <= m; squaring doubles m.
    let mut covered = 1;
    while covered < n.saturating_sub(1) {
        reach = bool_product(&reach, &reach);
        covered *= 2;
    }
    reach.iter().all(|row| row.iter().all(|&b| b))
}

fn bool_product(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    let mut out = vec![vec![false; n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] {
                for j in 0..n {
                    out[i][j] |= b[k][j];
                }
            }
        }
    }
    out
}

/// Period of the strongly connected component containing state 0: the gcd
/// of `level(u) + 1 - level(v)` over edges `u -> v` reachable from state 0,
/// with BFS levels from state 0. `None` if no cycle passes through it.
pub fn period(adjacency: &[Vec<bool>]) -> Option<usize> {
    let n = adjacency.len();
    if n == 0 {
        return None;
    }
    let mut level = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    level[0] = 0;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if adjacency[u][v] && level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g = 0usize;
    for u in 0..n {
        if level[u] == usize::MAX {
            continue;
        }
        for v in 0..n {
            if adjacency[u][v] {
                let diff = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, diff);
            }
        }
    }
    (g > 0).then_some(g)
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example2() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.5, 0.25],
            vec![0.25, 0.25, 0.0],
            vec![0.25, 0.5, 0.25],
        ]
    }

    fn symmetric(q: f64) -> Vec<Vec<f64>> {
        vec![vec![0.0, q, q], vec![q, 0.0, q], vec![q, q, 0.0]]
    }

    /// Moduli of the eigenvalues from a dense Schur decomposition.
    fn dense_radius(m: &DMatrix<f64>) -> f64 {
        m.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn example2_is_valid() {
        let jump = JumpMatrix::from_rows(&example2()).unwrap();
        let rho = jump.spectral_radius();
        assert!(rho > 0.0 && rho < 1.0);
        assert!((rho - dense_radius(jump.matrix())).abs() < 1e-9);
    }

    #[test]
    fn stochastic_scalar_rejected() {
        let err = JumpMatrix::from_rows(&[vec![1.0]]).unwrap_err();
        assert!(matches!(err, ChainError::SpectralRadiusNotSubunit { .. }));
    }

    #[test]
    fn stochastic_pair_rejected() {
        let err = JumpMatrix::from_rows(&[vec![0.5, 0.5], vec![0.3, 0.7]]).unwrap_err();
        assert!(matches!(err, ChainError::SpectralRadiusNotSubunit { .. }));
    }

    #[test]
    fn disconnected_loops_rejected() {
        let err = JumpMatrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap_err();
        assert_eq!(err, ChainError::NotIrreducible);
    }

    #[test]
    fn bipartite_rejected() {
        let err = JumpMatrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap_err();
        assert_eq!(err, ChainError::NotAperiodic { period: 2 });
    }

    #[test]
    fn negative_and_oversized_rows_rejected() {
        assert!(matches!(
            JumpMatrix::from_rows(&[vec![-0.1]]).unwrap_err(),
            ChainError::NegativeEntry { row: 0, col: 0, .. }
        ));
        assert!(matches!(
            JumpMatrix::from_rows(&[vec![0.6, 0.5], vec![0.1, 0.1]]).unwrap_err(),
            ChainError::RowSumExceedsOne { row: 0, .. }
        ));
        assert!(matches!(
            JumpMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap_err(),
            ChainError::NotSquare { .. }
        ));
        assert!(matches!(
            JumpMatrix::from_rows(&[vec![f64::NAN]]).unwrap_err(),
            ChainError::NonFinite { .. }
        ));
    }

    #[test]
    fn rounding_excess_is_renormalized() {
        let jump = JumpMatrix::from_rows(&[vec![0.1, 0.9 + 5e-13], vec![0.3, 0.3]]).unwrap();
        assert!((jump.row_sums()[0] - 1.0).abs() < 1e-15);
        assert_eq!(escape_profile(&jump).get(0), 0.0);
    }

    #[test]
    fn zero_matrix_accepted() {
        let jump = JumpMatrix::from_rows(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(jump.spectral_radius(), 0.0);
        assert_eq!(escape_profile(&jump).vector(), &DVector::from_element(3, 1.0));
        assert!(JumpMatrix::from_rows(&[vec![0.0]]).is_ok());
    }

    #[test]
    fn escape_examples() {
        let e = escape_profile(&JumpMatrix::from_rows(&example2()).unwrap());
        assert_eq!(e.vector().as_slice(), &[0.25, 0.5, 0.0]);
        let e = escape_profile(&JumpMatrix::from_rows(&[vec![0.5]]).unwrap());
        assert_eq!(e.get(0), 0.5);
        let e = escape_profile(&JumpMatrix::from_rows(&symmetric(0.3)).unwrap());
        for i in 0..3 {
            assert!((e.get(i) - 0.4).abs() < 1e-15);
        }
        assert_eq!(e.matrix(), DMatrix::from_diagonal(e.vector()));
    }

    #[test]
    fn radius_examples() {
        let one = JumpMatrix::from_rows(&[vec![0.37]]).unwrap();
        assert!((one.spectral_radius() - 0.37).abs() < 1e-12);
        for q in [0.05, 0.25, 0.45, 0.49] {
            let m = DMatrix::<f64>::from_fn(3, 3, |i, j| if i == j { 0.0 } else { q });
            // Symmetric circulant: eigenvalues {2q, -q, -q}.
            let eig = m.clone().symmetric_eigenvalues();
            let oracle = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            assert!((oracle - 2.0 * q).abs() < 1e-12);
            let rho = spectral_radius(&m, DEFAULT_POWER_ITERATIONS).unwrap();
            assert!((rho - oracle).abs() <= 1e-10 * oracle);
        }
    }

    #[test]
    fn gelfand_fallback_handles_reducible_input() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25]);
        let rho = spectral_radius(&m, 50).unwrap();
        assert!((rho - 0.5).abs() < 1e-9);
    }

    #[test]
    fn power_examples() {
        let jump = JumpMatrix::from_rows(&example2()).unwrap();
        assert_eq!(jump.power(0), DMatrix::identity(3, 3));
        assert_eq!(jump.power(1), jump.matrix().clone());

        // Q^k = (q^k / 3) [[2^k + 2(-1)^k, 2^k - (-1)^k, ...]] with the
        // uniform exponent k throughout.
        let closed = |q: f64, k: i32| {
            let a = 2f64.powi(k);
            let b = (-1f64).powi(k);
            DMatrix::from_fn(3, 3, |i, j| {
                q.powi(k) / 3.0 * if i == j { a + 2.0 * b } else { a - b }
            })
        };
        let q = 0.3;
        let sym = JumpMatrix::from_rows(&symmetric(q)).unwrap();
        for k in 0..12u32 {
            let diff = (sym.power(k) - closed(q, k as i32)).abs().max();
            assert!(diff < 1e-13, "k = {k}: {diff}");
        }

        // Eigendecomposition oracle for k = 8.
        let eig = sym.matrix().clone().symmetric_eigen();
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.powi(8)));
        let oracle = &eig.eigenvectors * d * eig.eigenvectors.transpose();
        assert!((sym.power(8) - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn powers_vanish() {
        for rows in [example2(), symmetric(0.49), vec![vec![0.999]]] {
            let jump = JumpMatrix::from_rows(&rows).unwrap();
            let p = jump.power(64);
            let norm = p.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
            assert!(norm < 1.0, "{norm}");
        }
    }

    #[test]
    fn period_detection() {
        let cycle3 = vec![
            vec![false, true, false],
            vec![false, false, true],
            vec![true, false, false],
        ];
        assert!(is_irreducible(&cycle3));
        assert_eq!(period(&cycle3), Some(3));
        let mut with_loop = cycle3.clone();
        with_loop[1][1] = true;
        assert_eq!(period(&with_loop), Some(1));
        assert_eq!(period(&[vec![false]]), None);
    }

    #[test]
    fn fingerprint_is_stable() {
        let jump = JumpMatrix::from_rows(&[vec![0.5]]).unwrap();
        let p = IncomingProtocol::constant(vec![1]);
        let a = OpenChainModel::new(jump.clone(), p.clone()).unwrap();
        let b = OpenChainModel::new(jump, p).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        let c = OpenChainModel::new(
            JumpMatrix::from_rows(&[vec![0.4]]).unwrap(),
            IncomingProtocol::constant(vec![1]),
        )
        .unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn dimension_mismatch() {
        let jump = JumpMatrix::from_rows(&[vec![0.5]]).unwrap();
        let err = OpenChainModel::new(jump, IncomingProtocol::constant(vec![1, 2])).unwrap_err();
        assert_eq!(err, ChainError::DimensionMismatch { expected: 1, found: 2 });
    }

    fn random_jump() -> impl Strategy<Value = JumpMatrix> {
        (1usize..5)
            .prop_flat_map(|n| proptest::collection::vec(0.01f64..1.0, n * (n + 1)))
            .prop_filter_map("not admissible", |w| {
                // n(n+1) weights: n per row plus an escape weight per row.
                let n = ((1.0 + 4.0 * w.len() as f64).sqrt() as usize - 1) / 2;
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        let row = &w[i * (n + 1)..(i + 1) * (n + 1)];
                        let total: f64 = row.iter().sum();
                        row[..n].iter().map(|x| x / total).collect()
                    })
                    .collect();
                JumpMatrix::from_rows(&rows).ok()
            })
    }

    proptest! {
        #[test]
        fn power_is_multiplicative(jump in random_jump(), a in 0u32..12, b in 0u32..12) {
            let lhs = jump.power(a + b);
            let rhs = jump.power(a) * jump.power(b);
            prop_assert!((lhs - rhs).abs().max() < 1e-12);
        }

        #[test]
        fn escape_complements_row_sums(jump in random_jump()) {
            let e = escape_profile(&jump);
            let total = e.vector() + jump.row_sums();
            for v in total.iter() {
                prop_assert!((v - 1.0).abs() < 1e-12);
            }
            prop_assert!(e.vector().iter().any(|&x| x > 0.0));
        }

        #[test]
        fn radius_matches_dense_oracle(jump in random_jump()) {
            let oracle = dense_radius(jump.matrix());
            prop_assert!((jump.spectral_radius() - oracle).abs() < 1e-9);
            let p = jump.power(64);
            let norm = p.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
            prop_assert!(norm < 1.0);
        }
    }
}
