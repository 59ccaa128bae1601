//! Incoming-particle protocols: exact samplers over finite supports together
//! with the first two moments of their stationary marginal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chain::{adjacency, is_irreducible};

/// Probability tables must sum to one within this tolerance.
pub const PROBABILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("protocol has no states")]
    Empty,

    #[error("probability table is empty")]
    EmptyTable,

    #[error("invalid probability {value} in table")]
    InvalidProbability { value: f64 },

    #[error("probabilities sum to {sum}, not one")]
    NotNormalized { sum: f64 },

    #[error("support vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("hidden regime chain is not irreducible")]
    HiddenChainNotIrreducible,

    #[error("hidden transition matrix must be {regimes}x{regimes}")]
    HiddenShape { regimes: usize },

    #[error("parameter {name} = {value} is outside [0, 1]")]
    ParameterOutOfRange { name: &'static str, value: f64 },

    #[error("hidden regime {0} does not exist")]
    UnknownRegime(usize),

    #[error("schedule has no segments or a zero-length segment")]
    EmptySchedule,
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// A finite distribution with precomputed cumulative weights for
/// inverse-CDF sampling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteTable<T> {
    outcomes: Vec<T>,
    probabilities: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl<T: Ord + Clone> DiscreteTable<T> {
    /// Sorts outcomes, merges duplicates and renormalizes.
    pub fn new(entries: Vec<(T, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(ProtocolError::EmptyTable);
        }
        if let Some(&(_, value)) = entries
            .iter()
            .find(|(_, p)| !p.is_finite() || *p < 0.0)
        {
            return Err(ProtocolError::InvalidProbability { value });
        }
        let sum: f64 = entries.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > PROBABILITY_SLACK {
            return Err(ProtocolError::NotNormalized { sum });
        }
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut outcomes: Vec<T> = Vec::with_capacity(entries.len());
        let mut probabilities: Vec<f64> = Vec::with_capacity(entries.len());
        for (outcome, p) in entries {
            match outcomes.last() {
                Some(last) if *last == outcome => *probabilities.last_mut().unwrap() += p,
                _ => {
                    outcomes.push(outcome);
                    probabilities.push(p);
                }
            }
        }
        for p in &mut probabilities {
            *p /= sum;
        }
        let mut acc = 0.0;
        let cumulative = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            outcomes,
            probabilities,
            cumulative,
        })
    }
}

impl<T> DiscreteTable<T> {
    pub fn iter(&self) -> impl Iterator<Item = (&T, f64)> {
        self.outcomes.iter().zip(self.probabilities.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &T {
        let u = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        let idx = self.cumulative.partition_point(|&c| c <= u);
        &self.outcomes[idx.min(self.outcomes.len() - 1)]
    }
}

/// Joint distribution over nonnegative integer vectors of a fixed length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTable {
    dimension: usize,
    table: DiscreteTable<Vec<u64>>,
}

impl JointTable {
    pub fn new(entries: Vec<(Vec<u64>, f64)>) -> Result<Self> {
        let dimension = entries.first().ok_or(ProtocolError::EmptyTable)?.0.len();
        if dimension == 0 {
            return Err(ProtocolError::Empty);
        }
        if let Some((v, _)) = entries.iter().find(|(v, _)| v.len() != dimension) {
            return Err(ProtocolError::DimensionMismatch {
                expected: dimension,
                found: v.len(),
            });
        }
        Ok(Self {
            dimension,
            table: DiscreteTable::new(entries)?,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<u64>, f64)> {
        self.table.iter()
    }

    pub fn moments(&self) -> ProtocolMoments {
        let n = self.dimension;
        let mut mean = DVector::zeros(n);
        for (v, p) in self.table.iter() {
            for i in 0..n {
                mean[i] += p * v[i] as f64;
            }
        }
        let mut covariance = DMatrix::zeros(n, n);
        for (v, p) in self.table.iter() {
            for i in 0..n {
                let di = v[i] as f64 - mean[i];
                for j in 0..n {
                    covariance[(i, j)] += p * di * (v[j] as f64 - mean[j]);
                }
            }
        }
        ProtocolMoments { mean, covariance }
    }

    fn sample_into<R: Rng + ?Sized>(&self, out: &mut [u64], rng: &mut R) {
        out.copy_from_slice(self.table.sample(rng));
    }
}

/// Regime-switching inflow: a hidden Markov chain over regimes, each regime
/// drawing arrivals from its own joint table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovModulated {
    transition: Vec<Vec<f64>>,
    regimes: Vec<JointTable>,
    #[serde(skip)]
    rows: Vec<DiscreteTable<usize>>,
    #[serde(skip)]
    stationary: Option<Vec<f64>>,
}

impl MarkovModulated {
    pub fn new(transition: Vec<Vec<f64>>, regimes: Vec<JointTable>) -> Result<Self> {
        let m = regimes.len();
        if m == 0 {
            return Err(ProtocolError::EmptyTable);
        }
        if transition.len() != m || transition.iter().any(|r| r.len() != m) {
            return Err(ProtocolError::HiddenShape { regimes: m });
        }
        let dimension = regimes[0].dimension();
        if let Some(r) = regimes.iter().find(|r| r.dimension() != dimension) {
            return Err(ProtocolError::DimensionMismatch {
                expected: dimension,
                found: r.dimension(),
            });
        }
        let rows = transition
            .iter()
            .map(|row| DiscreteTable::new(row.iter().copied().enumerate().collect()))
            .collect::<Result<Vec<_>>>()?;
        let stationary = hidden_stationary(&transition);
        Ok(Self {
            transition,
            regimes,
            rows,
            stationary,
        })
    }

    pub fn regimes(&self) -> &[JointTable] {
        &self.regimes
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Stationary law of the hidden chain.
    pub fn stationary(&self) -> Result<&[f64]> {
        self.stationary
            .as_deref()
            .ok_or(ProtocolError::HiddenChainNotIrreducible)
    }

    fn transition_matrix(&self) -> DMatrix<f64> {
        let m = self.regimes.len();
        DMatrix::from_fn(m, m, |i, j| self.transition[i][j])
    }
}

fn hidden_stationary(transition: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = transition.len();
    let p = DMatrix::from_fn(m, m, |i, j| transition[i][j]);
    if !is_irreducible(&adjacency(&p)) {
        return None;
    }
    // pi (P - I) = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = p.transpose() - DMatrix::identity(m, m);
    a.row_mut(m - 1).fill(1.0);
    let mut b = DVector::zeros(m);
    b[m - 1] = 1.0;
    let pi = a.lu().solve(&b)?;
    Some(pi.iter().map(|x| x.max(0.0)).collect())
}

/// The incoming protocol `{J^t}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IncomingProtocol {
    /// The same arrival vector every step.
    Constant { counts: Vec<u64> },
    /// Independent per-state arrival laws, i.i.d. across time.
    IidProduct { marginals: Vec<DiscreteTable<u64>> },
    /// One joint arrival law, i.i.d. across time.
    JointTable { table: JointTable },
    /// Arrival law selected by a hidden Markov chain.
    MarkovModulated { modulated: MarkovModulated },
}

impl IncomingProtocol {
    pub fn constant(counts: Vec<u64>) -> Self {
        Self::Constant { counts }
    }

    pub fn iid_product(marginals: Vec<Vec<(u64, f64)>>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(ProtocolError::Empty);
        }
        let marginals = marginals
            .into_iter()
            .map(DiscreteTable::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::IidProduct { marginals })
    }

    /// Independent Bernoulli arrivals with the given per-state probabilities.
    pub fn bernoulli(probabilities: &[f64]) -> Result<Self> {
        for &p in probabilities {
            check_unit("p", p)?;
        }
        Self::iid_product(
            probabilities
                .iter()
                .map(|&p| vec![(0, 1.0 - p), (1, p)])
                .collect(),
        )
    }

    pub fn joint_table(entries: Vec<(Vec<u64>, f64)>) -> Result<Self> {
        Ok(Self::JointTable {
            table: JointTable::new(entries)?,
        })
    }

    pub fn markov_modulated(transition: Vec<Vec<f64>>, regimes: Vec<JointTable>) -> Result<Self> {
        Ok(Self::MarkovModulated {
            modulated: MarkovModulated::new(transition, regimes)?,
        })
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Constant { counts } => counts.len(),
            Self::IidProduct { marginals } => marginals.len(),
            Self::JointTable { table } => table.dimension(),
            Self::MarkovModulated { modulated } => modulated.regimes[0].dimension(),
        }
    }

    /// Mean and covariance of the stationary single-time marginal.
    pub fn moments(&self) -> Result<ProtocolMoments> {
        match self {
            Self::Constant { counts } => {
                let n = counts.len();
                Ok(ProtocolMoments {
                    mean: DVector::from_iterator(n, counts.iter().map(|&c| c as f64)),
                    covariance: DMatrix::zeros(n, n),
                })
            }
            Self::IidProduct { marginals } => {
                let n = marginals.len();
                let mut mean = DVector::zeros(n);
                let mut covariance = DMatrix::zeros(n, n);
                for (i, table) in marginals.iter().enumerate() {
                    let m: f64 = table.iter().map(|(&v, p)| p * v as f64).sum();
                    let var: f64 = table.iter().map(|(&v, p)| p * (v as f64 - m).powi(2)).sum();
                    mean[i] = m;
                    covariance[(i, i)] = var;
                }
                Ok(ProtocolMoments { mean, covariance })
            }
            Self::JointTable { table } => Ok(table.moments()),
            Self::MarkovModulated { modulated } => {
                // Law of total covariance over the hidden stationary law.
                let pi = modulated.stationary()?;
                let n = self.dimension();
                let per_regime: Vec<ProtocolMoments> =
                    modulated.regimes.iter().map(JointTable::moments).collect();
                let mut mean = DVector::zeros(n);
                for (w, m) in pi.iter().zip(&per_regime) {
                    mean += &m.mean * *w;
                }
                let mut covariance = DMatrix::zeros(n, n);
                for (w, m) in pi.iter().zip(&per_regime) {
                    let shift = &m.mean - &mean;
                    covariance += (&m.covariance + &shift * shift.transpose()) * *w;
                }
                Ok(ProtocolMoments { mean, covariance })
            }
        }
    }

    /// `Cov(J^t, J^{t+s})` under stationarity; `s = 0` gives the covariance.
    pub fn lag_covariance(&self, s: u32) -> Result<DMatrix<f64>> {
        if s == 0 {
            return Ok(self.moments()?.covariance);
        }
        let n = self.dimension();
        match self {
            Self::MarkovModulated { modulated } => {
                let pi = modulated.stationary()?;
                let ps = crate::chain::matrix_power(&modulated.transition_matrix(), s);
                let means: Vec<DVector<f64>> = modulated
                    .regimes
                    .iter()
                    .map(|r| r.moments().mean)
                    .collect();
                let overall = self.moments()?.mean;
                let mut out = DMatrix::zeros(n, n);
                for (h, mh) in means.iter().enumerate() {
                    for (g, mg) in means.iter().enumerate() {
                        out += (mh * mg.transpose()) * (pi[h] * ps[(h, g)]);
                    }
                }
                Ok(out - &overall * overall.transpose())
            }
            _ => Ok(DMatrix::zeros(n, n)),
        }
    }

    /// Whether arrivals at different times are independent.
    pub fn is_time_independent(&self) -> bool {
        !matches!(self, Self::MarkovModulated { .. })
    }

    /// Starting hidden regime for a trajectory, drawn from the hidden
    /// stationary law (regime 0 when that law does not exist).
    pub fn initial_hidden<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        match self {
            Self::MarkovModulated { modulated } => Some(match &modulated.stationary {
                Some(pi) => {
                    let u = rng.random::<f64>();
                    let mut acc = 0.0;
                    pi.iter()
                        .position(|p| {
                            acc += p;
                            u < acc
                        })
                        .unwrap_or(pi.len() - 1)
                }
                None => 0,
            }),
            _ => None,
        }
    }

    /// Draws one arrival vector and advances the hidden regime, if any.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<(Vec<u64>, Option<usize>)> {
        let mut out = vec![0; self.dimension()];
        let mut hidden = hidden;
        self.sample_into(&mut hidden, &mut out, rng)?;
        Ok((out, hidden))
    }

    pub(crate) fn sample_into<R: Rng + ?Sized>(
        &self,
        hidden: &mut Option<usize>,
        out: &mut [u64],
        rng: &mut R,
    ) -> Result<()> {
        match self {
            Self::Constant { counts } => out.copy_from_slice(counts),
            Self::IidProduct { marginals } => {
                for (slot, table) in out.iter_mut().zip(marginals) {
                    *slot = *table.sample(rng);
                }
            }
            Self::JointTable { table } => table.sample_into(out, rng),
            Self::MarkovModulated { modulated } => {
                let regime = match *hidden {
                    Some(r) => r,
                    None => self.initial_hidden(rng).unwrap_or(0),
                };
                let table = modulated
                    .regimes
                    .get(regime)
                    .ok_or(ProtocolError::UnknownRegime(regime))?;
                table.sample_into(out, rng);
                *hidden = Some(*modulated.rows[regime].sample(rng));
            }
        }
        Ok(())
    }
}

/// Mean vector and single-time covariance of the arrivals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl ProtocolMoments {
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ProtocolError::ParameterOutOfRange { name, value })
    }
}

/// Three-state protocol with correlated arrivals on states 1 and 2 and an
/// independent fair coin on state 3. Each coordinate is marginally
/// Bernoulli(1/2); `p` sets the probability that states 1 and 2 agree.
pub fn three_state_example(p: f64) -> Result<IncomingProtocol> {
    check_unit("p", p)?;
    let pair = [
        ((1, 1), p / 2.0),
        ((0, 0), p / 2.0),
        ((1, 0), (1.0 - p) / 2.0),
        ((0, 1), (1.0 - p) / 2.0),
    ];
    let mut entries = Vec::with_capacity(8);
    for ((j1, j2), f12) in pair {
        for j3 in [0, 1] {
            entries.push((vec![j1, j2, j3], f12 * 0.5));
        }
    }
    IncomingProtocol::joint_table(entries)
}

/// A piecewise-constant schedule of protocols.
///
/// Step `t` uses the segment covering it; the final segment persists beyond
/// the schedule's total duration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolSchedule {
    segments: Vec<(usize, IncomingProtocol)>,
}

impl ProtocolSchedule {
    pub fn new(segments: Vec<(usize, IncomingProtocol)>) -> Result<Self> {
        let first = segments.first().ok_or(ProtocolError::EmptySchedule)?;
        let dimension = first.1.dimension();
        for (duration, protocol) in &segments {
            if *duration == 0 {
                return Err(ProtocolError::EmptySchedule);
            }
            if protocol.dimension() != dimension {
                return Err(ProtocolError::DimensionMismatch {
                    expected: dimension,
                    found: protocol.dimension(),
                });
            }
        }
        Ok(Self { segments })
    }

    pub fn dimension(&self) -> usize {
        self.segments[0].1.dimension()
    }

    pub fn segments(&self) -> &[(usize, IncomingProtocol)] {
        &self.segments
    }

    pub fn protocol_at(&self, t: usize) -> &IncomingProtocol {
        let mut end = 0;
        for (duration, protocol) in &self.segments {
            end += duration;
            if t < end {
                return protocol;
            }
        }
        &self.segments[self.segments.len() - 1].1
    }

    /// Per-step `(epsilon_t, Delta_t)` for `t = 0..steps`.
    pub fn step_moments(&self, steps: usize) -> Result<Vec<ProtocolMoments>> {
        let per_segment = self
            .segments
            .iter()
            .map(|(_, p)| p.moments())
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(steps);
        let mut segment = 0;
        let mut end = self.segments[0].0;
        for t in 0..steps {
            while t >= end && segment + 1 < self.segments.len() {
                segment += 1;
                end += self.segments[segment].0;
            }
            out.push(per_segment[segment].clone());
        }
        Ok(out)
    }
}
