//! Experiment configuration (schema version 1).
//!
//! ```json
//! {
//!   "schema": 1,
//!   "model": { "family": "three_state", "p": 0.4, "q": 0.45 },
//!   "run": { "horizon": 500000, "burn_in": 50000, "seed": 7, "lags": [1, 2, 5, 10] },
//!   "sweep": { "parameter": "p", "linspace": [0.0, 1.0, 11] },
//!   "analysis": { "tol": 1e-12, "z_threshold": 4.0 },
//!   "output": { "dir": "out", "formats": ["json", "csv", "table"] }
//! }
//! ```
//!
//! A custom model replaces `family` with `jump` (row-major rows) or
//! `jump_file`, plus a `protocol` object keyed by `kind`.

use std::fs;
use std::path::{Path, PathBuf};

use openchain::chain::validate_jump_matrix;
use openchain::protocols::{three_state_example, JointTable};
use openchain::{IncomingProtocol, JumpMatrix, OpenChainModel, ProtocolSchedule};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HORIZON: usize = 500_000;
pub const DEFAULT_LAGS: [u32; 4] = [1, 2, 5, 10];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// One state, stay probability `q`, Bernoulli(`p`) arrivals.
    OneVertex,
    /// Symmetric three-state chain with off-diagonal `q` and the paired
    /// arrival law with parameter `p`.
    ThreeState,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolSpec>,
    /// Initial counts; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableEntry {
    pub counts: Vec<u64>,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolSpec {
    Constant { counts: Vec<u64> },
    Bernoulli { p: Vec<f64> },
    IidProduct { marginals: Vec<Vec<(u64, f64)>> },
    JointTable { entries: Vec<TableEntry> },
    ThreeStateExample { p: f64 },
    MarkovModulated {
        transition: Vec<Vec<f64>>,
        regimes: Vec<Vec<TableEntry>>,
    },
    Schedule { segments: Vec<SegmentSpec> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub duration: usize,
    pub protocol: ProtocolSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lags: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// `[start, stop, count]`, endpoints included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linspace: Option<(f64, f64, usize)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formats: Option<Vec<Format>>,
    /// Write the full per-step record CSV (default true).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<bool>,
}

impl OutputSpec {
    pub fn wants(&self, format: Format) -> bool {
        self.formats.as_ref().is_none_or(|f| f.contains(&format))
    }
}

/// A model ready to run, possibly with a time-varying schedule.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub model: OpenChainModel,
    pub schedule: Option<ProtocolSchedule>,
    pub initial: Vec<u64>,
}

/// One point of a sweep (or the single point without one).
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub index: usize,
    /// `parameter=value`, or `None` without a sweep.
    pub label: Option<String>,
    pub model: ModelSpec,
}

impl ExperimentConfig {
    /// Reads and parses a config; relative `jump_file` paths are resolved
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if let Some(file) = &config.model.jump_file {
            if file.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.model.jump_file = Some(base.join(file));
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| CliError::Parse(format!("config: {e}")))?;
        if config.schema != SCHEMA_VERSION {
            return Err(CliError::Invalid(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                config.schema
            )));
        }
        Ok(config)
    }

    /// SHA-256 of the canonical JSON of the effective config. The output
    /// directory is left out, and a `jump_file` is replaced by its rows.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = None;
        if let Some(path) = &canonical.model.jump_file {
            if let Ok(rows) = parse_jump_file(path) {
                canonical.model.jump_file = None;
                canonical.model.jump.get_or_insert(rows);
            }
        }
        let value = serde_json::to_value(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn lags(&self) -> Vec<u32> {
        self.run.lags.clone().unwrap_or_else(|| DEFAULT_LAGS.to_vec())
    }

    pub fn horizon(&self) -> usize {
        self.run.horizon.unwrap_or(DEFAULT_HORIZON)
    }

    pub fn burn_in(&self) -> usize {
        self.run
            .burn_in
            .unwrap_or_else(|| openchain::simulate::default_burn_in(self.horizon()))
    }

    pub fn batches(&self) -> usize {
        self.run.batches.unwrap_or(openchain::stats::DEFAULT_BATCHES)
    }

    pub fn tol(&self) -> f64 {
        self.analysis
            .tol
            .unwrap_or(openchain::cumulants::DEFAULT_VARIANCE_TOL)
    }

    pub fn policy(&self) -> openchain::stats::TolerancePolicy {
        let default = openchain::stats::TolerancePolicy::default();
        openchain::stats::TolerancePolicy {
            z_threshold: self.analysis.z_threshold.unwrap_or(default.z_threshold),
            absolute_tol: self.analysis.absolute_tol.unwrap_or(default.absolute_tol),
        }
    }

    /// Expands the sweep into grid points.
    pub fn points(&self) -> Result<Vec<GridPoint>, CliError> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![GridPoint {
                index: 0,
                label: None,
                model: self.model.clone(),
            }]);
        };
        let values = match (&sweep.values, sweep.linspace) {
            (Some(v), None) => v.clone(),
            (None, Some((start, stop, n))) => linspace(start, stop, n),
            _ => {
                return Err(CliError::Invalid(
                    "sweep needs exactly one of `values` or `linspace`".into(),
                ))
            }
        };
        if values.is_empty() {
            return Err(CliError::Invalid("sweep has no values".into()));
        }
        if self.model.family.is_none() {
            return Err(CliError::Invalid(
                "sweeps are supported over family parameters only".into(),
            ));
        }
        values
            .into_iter()
            .enumerate()
            .map(|(index, value)| {
                let mut model = self.model.clone();
                match sweep.parameter.as_str() {
                    "p" => model.p = Some(value),
                    "q" => model.q = Some(value),
                    other => {
                        return Err(CliError::Invalid(format!(
                            "unknown sweep parameter `{other}` (expected p or q)"
                        )))
                    }
                }
                Ok(GridPoint {
                    index,
                    label: Some(format!("{}={value}", sweep.parameter)),
                    model,
                })
            })
            .collect()
    }
}

pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|k| {
                if k + 1 == n {
                    stop
                } else {
                    start + (stop - start) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// `Variant: message`, naming the library error kind.
fn invalid<E: std::fmt::Display + std::fmt::Debug>(e: E) -> CliError {
    let debug = format!("{e:?}");
    let kind = debug
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or_default();
    CliError::Invalid(format!("{kind}: {e}"))
}

fn parse_jump_file(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(rows) = serde_json::from_str::<Vec<Vec<f64>>>(&text) {
        return Ok(rows);
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
                })
                .collect()
        })
        .collect()
}

fn table(entries: &[TableEntry]) -> Vec<(Vec<u64>, f64)> {
    entries.iter().map(|e| (e.counts.clone(), e.p)).collect()
}

impl ProtocolSpec {
    /// Builds a single protocol; schedules are rejected here.
    pub fn build(&self) -> Result<IncomingProtocol, CliError> {
        match self {
            Self::Constant { counts } => Ok(IncomingProtocol::constant(counts.clone())),
            Self::Bernoulli { p } => IncomingProtocol::bernoulli(p).map_err(invalid),
            Self::IidProduct { marginals } => {
                IncomingProtocol::iid_product(marginals.clone()).map_err(invalid)
            }
            Self::JointTable { entries } => {
                IncomingProtocol::joint_table(table(entries)).map_err(invalid)
            }
            Self::ThreeStateExample { p } => three_state_example(*p).map_err(invalid),
            Self::MarkovModulated {
                transition,
                regimes,
            } => {
                let regimes = regimes
                    .iter()
                    .map(|r| JointTable::new(table(r)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(invalid)?;
                IncomingProtocol::markov_modulated(transition.clone(), regimes).map_err(invalid)
            }
            Self::Schedule { .. } => Err(CliError::Invalid(
                "a schedule cannot be nested or used as a single protocol".into(),
            )),
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<BuiltModel, CliError> {
        let (rows, protocol_spec) = match self.family {
            Some(family) => {
                if self.jump.is_some() || self.jump_file.is_some() || self.protocol.is_some() {
                    return Err(CliError::Invalid(
                        "a family model cannot also give jump, jump_file or protocol".into(),
                    ));
                }
                let p = self
                    .p
                    .ok_or_else(|| CliError::Invalid("family model needs `p`".into()))?;
                let q = self
                    .q
                    .ok_or_else(|| CliError::Invalid("family model needs `q`".into()))?;
                match family {
                    Family::OneVertex => (
                        vec![vec![q]],
                        ProtocolSpec::Bernoulli { p: vec![p] },
                    ),
                    Family::ThreeState => (
                        vec![vec![0.0, q, q], vec![q, 0.0, q], vec![q, q, 0.0]],
                        ProtocolSpec::ThreeStateExample { p },
                    ),
                }
            }
            None => {
                if self.p.is_some() || self.q.is_some() {
                    return Err(CliError::Invalid(
                        "`p` and `q` are only meaningful with `family`".into(),
                    ));
                }
                let rows = match (&self.jump, &self.jump_file) {
                    (Some(rows), None) => rows.clone(),
                    (None, Some(path)) => parse_jump_file(path)?,
                    _ => {
                        return Err(CliError::Invalid(
                            "model needs exactly one of `family`, `jump` or `jump_file`".into(),
                        ))
                    }
                };
                let protocol = self
                    .protocol
                    .clone()
                    .ok_or_else(|| CliError::Invalid("custom model needs a `protocol`".into()))?;
                (rows, protocol)
            }
        };
        let jump = build_jump(&rows)?;
        let (protocol, schedule) = match &protocol_spec {
            ProtocolSpec::Schedule { segments } => {
                let built = segments
                    .iter()
                    .map(|s| Ok((s.duration, s.protocol.build()?)))
                    .collect::<Result<Vec<_>, CliError>>()?;
                let schedule = ProtocolSchedule::new(built).map_err(invalid)?;
                (schedule.segments()[0].1.clone(), Some(schedule))
            }
            other => (other.build()?, None),
        };
        let model = OpenChainModel::new(jump, protocol).map_err(invalid)?;
        let initial = self
            .initial
            .clone()
            .unwrap_or_else(|| vec![0; model.states()]);
        if initial.len() != model.states() {
            return Err(CliError::Invalid(format!(
                "initial has {} entries for {} states",
                initial.len(),
                model.states()
            )));
        }
        Ok(BuiltModel {
            model,
            schedule,
            initial,
        })
    }

    /// The raw jump rows, for diagnostics on matrices that fail validation.
    pub fn jump_rows(&self) -> Result<Vec<Vec<f64>>, CliError> {
        match (self.family, &self.jump, &self.jump_file) {
            (Some(Family::OneVertex), _, _) => Ok(vec![vec![self.q.unwrap_or(f64::NAN)]]),
            (Some(Family::ThreeState), _, _) => {
                let q = self.q.unwrap_or(f64::NAN);
                Ok(vec![vec![0.0, q, q], vec![q, 0.0, q], vec![q, q, 0.0]])
            }
            (None, Some(rows), _) => Ok(rows.clone()),
            (None, None, Some(path)) => parse_jump_file(path),
            _ => Err(CliError::Invalid("model has no jump matrix".into())),
        }
    }
}

pub fn build_jump(rows: &[Vec<f64>]) -> Result<JumpMatrix, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Invalid(format!(
            "jump matrix must be square, got {n} rows of lengths {:?}",
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let raw = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    validate_jump_matrix(&raw).map_err(invalid)
}
