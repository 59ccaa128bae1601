//! Open Markov chains: non-interacting particles hopping on a finite state
//! space, arriving through a stochastic inflow and escaping with per-state
//! probabilities.
//!
//! The crate provides an exact Monte Carlo simulator ([`simulate`]), the
//! first two cumulants of the counts in closed form ([`cumulants`]), the
//! log moment generating function machinery used to cross-check them
//! ([`mgf`]) and empirical estimators for simulated series ([`stats`]).

pub mod chain;
pub mod cumulants;
pub mod mgf;
pub mod protocols;
pub mod sampling;
pub mod simulate;
pub mod stats;

pub use chain::{escape_profile, ChainError, EscapeProfile, JumpMatrix, OpenChainModel};
pub use cumulants::{CumulantError, CumulantState, OutgoingMoments};
pub use mgf::{LogMgfEvaluator, MgfError};
pub use protocols::{IncomingProtocol, ProtocolError, ProtocolMoments, ProtocolSchedule};
pub use simulate::{CountSeries, SimulationError, SimulationRecord, StateVector};
pub use stats::{ComparisonReport, SeriesSummary, StatsError};
