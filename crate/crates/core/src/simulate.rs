//! Exact stochastic evolution of particle counts.
//!
//! Every step, the `N_i` particles on state `i` are split multinomially over
//! the `S` destinations plus the outside (probabilities `q_i1..q_iS, e_i`).
//! The retained particles are summed per destination and the protocol's
//! arrivals are added: `N^{t+1}_j = J^t_j + sum_i B_ij`.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chain::OpenChainModel;
use crate::protocols::ProtocolError;
use crate::sampling::multinomial_into;

/// Name recorded in manifests for the generator used by [`run`].
pub const GENERATOR: &str = "ChaCha8Rng";

/// Counts above this are treated as divergence.
pub const COUNT_LIMIT: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("count on state {state} would exceed 2^62")]
    Overflow { state: usize },

    #[error("state vector has length {found}, model has {expected} states")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),

    #[error("horizon {horizon} must exceed burn-in {burn_in} and be positive")]
    InvalidHorizon { horizon: usize, burn_in: usize },

    #[error("probability {name} = {value} is out of range")]
    ParameterOutOfRange { name: &'static str, value: f64 },

    #[error("truncation at {truncation} leaves tail mass {tail:e}")]
    TruncationTooSmall { truncation: usize, tail: f64 },

    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

/// Exact multinomial split of `n` items; components sum to `n`.
///
/// Probabilities must be nonnegative and sum to one within 1e-12; they are
/// renormalized before sampling.
pub fn multinomial_split<R: rand::Rng + ?Sized>(
    n: u64,
    probabilities: &[f64],
    rng: &mut R,
) -> Result<Vec<u64>> {
    if probabilities.is_empty() {
        return Err(SimulationError::InvalidProbabilities("empty".into()));
    }
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(SimulationError::InvalidProbabilities(format!(
            "{probabilities:?}"
        )));
    }
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(SimulationError::InvalidProbabilities(format!(
            "sum is {sum}"
        )));
    }
    let normalized: Vec<f64> = probabilities.iter().map(|p| p / sum).collect();
    let mut out = vec![0; probabilities.len()];
    multinomial_into(n, &normalized, &mut out, rng);
    Ok(out)
}

/// Particle counts per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateVector(pub Vec<u64>);

impl StateVector {
    pub fn zeros(states: usize) -> Self {
        Self(vec![0; states])
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

/// Everything that happened in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: StateVector,
    pub inflow: Vec<u64>,
    pub outflow_per_state: Vec<u64>,
    pub outflow_total: u64,
    /// `retained[(i, j)]`: particles that moved from `i` to `j`.
    pub retained: DMatrix<u64>,
}

/// Step engine holding the per-state category probabilities.
struct Stepper<'m> {
    model: &'m OpenChainModel,
    /// Row `i`: `q_i1, ..., q_iS, e_i`.
    categories: Vec<Vec<f64>>,
    split: Vec<u64>,
}

impl<'m> Stepper<'m> {
    fn new(model: &'m OpenChainModel) -> Self {
        let s = model.states();
        let categories = (0..s)
            .map(|i| {
                let mut row: Vec<f64> = (0..s).map(|j| model.jump().get(i, j)).collect();
                row.push(model.escape().get(i));
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        Self {
            model,
            categories,
            split: vec![0; s + 1],
        }
    }

    /// Advances `counts` into `next`, filling `inflow` and `outflow`.
    fn advance<R: rand::Rng + ?Sized>(
        &mut self,
        counts: &[u64],
        next: &mut [u64],
        inflow: &mut [u64],
        outflow: &mut [u64],
        hidden: &mut Option<usize>,
        mut retained: Option<&mut DMatrix<u64>>,
        rng: &mut R,
    ) -> Result<()> {
        let s = counts.len();
        next.fill(0);
        for (i, &n) in counts.iter().enumerate() {
            multinomial_into(n, &self.categories[i], &mut self.split, rng);
            for j in 0..s {
                next[j] += self.split[j];
            }
            outflow[i] = self.split[s];
            if let Some(b) = retained.as_deref_mut() {
                for j in 0..s {
                    b[(i, j)] = self.split[j];
                }
            }
            debug_assert_eq!(self.split.iter().sum::<u64>(), n, "conservation on state {i}");
        }
        self.model.protocol().sample_into(hidden, inflow, rng)?;
        for j in 0..s {
            next[j] = next[j]
                .checked_add(inflow[j])
                .filter(|&v| v <= COUNT_LIMIT)
                .ok_or(SimulationError::Overflow { state: j })?;
        }
        Ok(())
    }
}

/// One step from `current`. `hidden` carries the protocol's regime between
/// steps and is ignored by time-independent protocols.
pub fn step<R: rand::Rng + ?Sized>(
    model: &OpenChainModel,
    current: &StateVector,
    hidden: &mut Option<usize>,
    rng: &mut R,
) -> Result<StepOutcome> {
    let s = model.states();
    if current.0.len() != s {
        return Err(SimulationError::DimensionMismatch {
            expected: s,
            found: current.0.len(),
        });
    }
    let mut stepper = Stepper::new(model);
    let mut next = vec![0; s];
    let mut inflow = vec![0; s];
    let mut outflow = vec![0; s];
    let mut retained = DMatrix::zeros(s, s);
    stepper.advance(
        &current.0,
        &mut next,
        &mut inflow,
        &mut outflow,
        hidden,
        Some(&mut retained),
        rng,
    )?;
    Ok(StepOutcome {
        next: StateVector(next),
        outflow_total: outflow.iter().sum(),
        inflow,
        outflow_per_state: outflow,
        retained,
    })
}

/// Row-major `T x S` table of counts with a burn-in prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountSeries {
    states: usize,
    burn_in: usize,
    data: Vec<u64>,
}

impl CountSeries {
    pub fn new(states: usize, burn_in: usize, data: Vec<u64>) -> Self {
        assert!(states > 0 && data.len().is_multiple_of(states));
        Self {
            states,
            burn_in,
            data,
        }
    }

    /// Builds a series from rows; all rows count (no burn-in).
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let states = rows.first().map_or(1, Vec::len);
        Self::new(states, 0, rows.concat())
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.states
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[u64] {
        &self.data[t * self.states..(t + 1) * self.states]
    }

    /// Rows after the burn-in prefix, flattened.
    pub fn post_burn_in(&self) -> &[u64] {
        &self.data[self.burn_in.min(self.len()) * self.states..]
    }
}

/// A complete seeded trajectory.
///
/// Row `t` holds `N^t` and the step taken from it: arrivals `J^t`, escapes
/// `U^t` and their total `O_t`. Rows `t < burn_in` are kept but flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRecord {
    pub seed: u64,
    pub burn_in: usize,
    pub generator: &'static str,
    pub model_fingerprint: String,
    pub counts: CountSeries,
    pub inflow: Vec<u64>,
    pub outflow: Vec<u64>,
    pub outflow_total: Vec<u64>,
}

/// JSON manifest accompanying a record.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    pub model_fingerprint: String,
    pub horizon: usize,
    pub burn_in: usize,
    pub generator: String,
    pub states: usize,
}

impl SimulationRecord {
    pub fn horizon(&self) -> usize {
        self.counts.len()
    }

    pub fn states(&self) -> usize {
        self.counts.states()
    }

    pub fn inflow_row(&self, t: usize) -> &[u64] {
        let s = self.states();
        &self.inflow[t * s..(t + 1) * s]
    }

    pub fn outflow_row(&self, t: usize) -> &[u64] {
        let s = self.states();
        &self.outflow[t * s..(t + 1) * s]
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            seed: self.seed,
            model_fingerprint: self.model_fingerprint.clone(),
            horizon: self.horizon(),
            burn_in: self.burn_in,
            generator: self.generator.to_string(),
            states: self.states(),
        }
    }

    /// Columns `t, N_1..N_S, J_1..J_S, U_1..U_S, O, burn_in`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let s = self.states();
        let mut header = vec!["t".to_string()];
        for prefix in ["N", "J", "U"] {
            header.extend((1..=s).map(|i| format!("{prefix}_{i}")));
        }
        header.push("O".into());
        header.push("burn_in".into());
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for t in 0..self.horizon() {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(line, "{t}");
            for v in self
                .counts
                .row(t)
                .iter()
                .chain(self.inflow_row(t))
                .chain(self.outflow_row(t))
            {
                let _ = write!(line, ",{v}");
            }
            let flag = u8::from(t < self.burn_in);
            let _ = write!(line, ",{},{flag}", self.outflow_total[t]);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Burn-in used when none is given: 10% of the horizon.
pub fn default_burn_in(horizon: usize) -> usize {
    horizon / 10
}

fn check_horizon(horizon: usize, burn_in: usize) -> Result<()> {
    if horizon == 0 || burn_in >= horizon {
        return Err(SimulationError::InvalidHorizon { horizon, burn_in });
    }
    Ok(())
}

/// Runs `horizon` steps from `initial` with a generator seeded by `seed`.
pub fn run(
    model: &OpenChainModel,
    horizon: usize,
    initial: &StateVector,
    seed: u64,
    burn_in: usize,
) -> Result<SimulationRecord> {
    check_horizon(horizon, burn_in)?;
    let s = model.states();
    if initial.0.len() != s {
        return Err(SimulationError::DimensionMismatch {
            expected: s,
            found: initial.0.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = model.protocol().initial_hidden(&mut rng);
    let mut stepper = Stepper::new(model);
    let mut counts = Vec::with_capacity(horizon * s);
    let mut inflow = vec![0; horizon * s];
    let mut outflow = vec![0; horizon * s];
    let mut outflow_total = Vec::with_capacity(horizon);
    let mut current = initial.0.clone();
    let mut next = vec![0; s];
    for t in 0..horizon {
        counts.extend_from_slice(&current);
        let row = t * s..(t + 1) * s;
        stepper.advance(
            &current,
            &mut next,
            &mut inflow[row.clone()],
            &mut outflow[row.clone()],
            &mut hidden,
            None,
            &mut rng,
        )?;
        outflow_total.push(outflow[row].iter().sum());
        std::mem::swap(&mut current, &mut next);
    }
    Ok(SimulationRecord {
        seed,
        burn_in,
        generator: GENERATOR,
        model_fingerprint: model.fingerprint(),
        counts: CountSeries::new(s, burn_in, counts),
        inflow,
        outflow,
        outflow_total,
    })
}

/// Like [`run`] but keeps only the count series.
pub fn run_counts(
    model: &OpenChainModel,
    horizon: usize,
    initial: &StateVector,
    seed: u64,
    burn_in: usize,
) -> Result<CountSeries> {
    check_horizon(horizon, burn_in)?;
    let s = model.states();
    if initial.0.len() != s {
        return Err(SimulationError::DimensionMismatch {
            expected: s,
            found: initial.0.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = model.protocol().initial_hidden(&mut rng);
    let mut stepper = Stepper::new(model);
    let mut counts = Vec::with_capacity(horizon * s);
    let mut inflow = vec![0; s];
    let mut outflow = vec![0; s];
    let mut current = initial.0.clone();
    let mut next = vec![0; s];
    for _ in 0..horizon {
        counts.extend_from_slice(&current);
        stepper.advance(
            &current,
            &mut next,
            &mut inflow,
            &mut outflow,
            &mut hidden,
            None,
            &mut rng,
        )?;
        std::mem::swap(&mut current, &mut next);
    }
    Ok(CountSeries::new(s, burn_in, counts))
}

/// Stationary law of the one-state chain with Bernoulli(p) arrivals and
/// stay probability `q`, on the truncated count space `{0..=truncation}`.
///
/// Builds the kernel `K(k, n) = sum_{j + r = n} Bern(p)(j) Binom(k, q)(r)`
/// and power-iterates from the point mass at zero.
pub fn enumerate_one_vertex_stationary(p: f64, q: f64, truncation: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SimulationError::ParameterOutOfRange { name: "p", value: p });
    }
    if !(0.0..1.0).contains(&q) {
        return Err(SimulationError::ParameterOutOfRange { name: "q", value: q });
    }
    let m = truncation;
    // kernel[k][n]
    let mut kernel = vec![vec![0.0; m + 1]; m + 1];
    for (k, row) in kernel.iter_mut().enumerate() {
        let binom = binomial_pmf(k as u64, q);
        for (r, &pr) in binom.iter().enumerate() {
            if r <= m {
                row[r] += (1.0 - p) * pr;
            }
            if r < m {
                row[r + 1] += p * pr;
            }
        }
    }
    let mut dist = vec![0.0; m + 1];
    dist[0] = 1.0;
    let mut next = vec![0.0; m + 1];
    for _ in 0..100_000 {
        next.fill(0.0);
        for (k, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (n, &kv) in kernel[k].iter().enumerate() {
                next[n] += w * kv;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let change: f64 = next.iter().zip(&dist).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut dist, &mut next);
        if change < 1e-16 {
            break;
        }
    }
    // Mass at the boundary plus what the kernel pushes past it.
    let tail = dist[m] + dist[m] * p * q.powi(m as i32);
    if tail > 1e-12 {
        return Err(SimulationError::TruncationTooSmall {
            truncation: m,
            tail,
        });
    }
    Ok(dist)
}

fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    if p == 0.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[0] = 1.0;
        return v;
    }
    use crate::sampling::ln_factorial;
    (0..=n)
        .map(|k| {
            let ln = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
                + k as f64 * p.ln()
                + (n - k) as f64 * (-p).ln_1p();
            ln.exp()
        })
        .collect()
}
