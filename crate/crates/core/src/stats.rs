//! Empirical moments of simulated count series with batch-means standard
//! errors, and analytic-versus-empirical comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::simulate::CountSeries;

pub const DEFAULT_BATCHES: usize = 50;
pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("series has {available} post-burn-in rows, need more than {required}")]
    SeriesTooShort { available: usize, required: usize },

    #[error("state {state} has zero sample variance")]
    ZeroVarianceState { state: usize },

    #[error("shape mismatch in {quantity}: {detail}")]
    ShapeMismatch { quantity: String, detail: String },

    #[error("at least two batches are required")]
    TooFewBatches,
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Sample moments of the post-burn-in part of a series.
///
/// `lag_covariances[s]` is `sum_t (N^t - m)(N^{t+s} - m)^T / (T - s - 1)`,
/// so lag 0 is the unbiased sample covariance. Standard errors come from
/// `batches` contiguous batches, each evaluated around the global mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub samples: usize,
    pub batches: usize,
    pub sample_mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub sample_covariance: DMatrix<f64>,
    pub covariance_se: DMatrix<f64>,
    pub lag_covariances: BTreeMap<u32, DMatrix<f64>>,
    pub lag_se: BTreeMap<u32, DMatrix<f64>>,
    batch_lag_covariances: BTreeMap<u32, Vec<DMatrix<f64>>>,
}

impl SeriesSummary {
    pub fn states(&self) -> usize {
        self.sample_mean.len()
    }
}

fn standard_error(values: &[f64]) -> f64 {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

fn matrix_se(batches: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (r, c) = batches[0].shape();
    DMatrix::from_fn(r, c, |i, j| {
        let values: Vec<f64> = batches.iter().map(|m| m[(i, j)]).collect();
        standard_error(&values)
    })
}

/// Computes a [`SeriesSummary`]; lag 0 is always included.
pub fn summarize(series: &CountSeries, lags: &[u32], batches: usize) -> Result<SeriesSummary> {
    if batches < 2 {
        return Err(StatsError::TooFewBatches);
    }
    let s = series.states();
    let rows = series.post_burn_in();
    let total = rows.len() / s;
    let max_lag = lags.iter().copied().max().unwrap_or(0) as usize;
    let required = max_lag + 10 * batches;
    if total <= required {
        return Err(StatsError::SeriesTooShort {
            available: total,
            required,
        });
    }

    let mut mean = DVector::zeros(s);
    for row in rows.chunks_exact(s) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean /= total as f64;
    let centered: Vec<f64> = rows
        .chunks_exact(s)
        .flat_map(|row| row.iter().zip(mean.iter()).map(|(&v, m)| v as f64 - m))
        .collect();

    let batch_len = total / batches;
    let batch_means: Vec<DVector<f64>> = (0..batches)
        .map(|b| {
            let mut acc = DVector::zeros(s);
            for t in b * batch_len..(b + 1) * batch_len {
                for i in 0..s {
                    acc[i] += centered[t * s + i];
                }
            }
            acc / batch_len as f64 + &mean
        })
        .collect();
    let mean_se = DVector::from_fn(s, |i, _| {
        let values: Vec<f64> = batch_means.iter().map(|m| m[i]).collect();
        standard_error(&values)
    });

    let mut all_lags: Vec<u32> = lags.to_vec();
    all_lags.push(0);
    all_lags.sort_unstable();
    all_lags.dedup();

    let mut lag_covariances = BTreeMap::new();
    let mut lag_se = BTreeMap::new();
    let mut batch_lag_covariances = BTreeMap::new();
    for &lag in &all_lags {
        let l = lag as usize;
        let mut per_batch = vec![DMatrix::zeros(s, s); batches];
        let mut counts = vec![0usize; batches];
        let mut overall = DMatrix::zeros(s, s);
        for t in 0..total - l {
            let a = &centered[t * s..(t + 1) * s];
            let b = &centered[(t + l) * s..(t + l + 1) * s];
            let batch = t / batch_len;
            for i in 0..s {
                for j in 0..s {
                    overall[(i, j)] += a[i] * b[j];
                }
            }
            if batch < batches {
                let m = &mut per_batch[batch];
                for i in 0..s {
                    for j in 0..s {
                        m[(i, j)] += a[i] * b[j];
                    }
                }
                counts[batch] += 1;
            }
        }
        overall /= (total - l - 1) as f64;
        for (m, &c) in per_batch.iter_mut().zip(&counts) {
            *m /= c as f64;
        }
        lag_se.insert(lag, matrix_se(&per_batch));
        lag_covariances.insert(lag, overall);
        batch_lag_covariances.insert(lag, per_batch);
    }

    Ok(SeriesSummary {
        samples: total,
        batches,
        sample_mean: mean,
        mean_se,
        sample_covariance: lag_covariances[&0].clone(),
        covariance_se: lag_se[&0].clone(),
        lag_covariances,
        lag_se,
        batch_lag_covariances,
    })
}

/// Spatial and time correlations estimated from a summary, each with a
/// batch-means standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCorrelations {
    pub kappa: DMatrix<f64>,
    pub kappa_se: DMatrix<f64>,
    pub time_corr: BTreeMap<u32, DMatrix<f64>>,
    pub time_corr_se: BTreeMap<u32, DMatrix<f64>>,
}

fn normalize(cov: &DMatrix<f64>, variances: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        cov[(i, j)] / (variances[(i, i)] * variances[(j, j)]).sqrt()
    })
}

/// Normalizes (lagged) covariances by `sqrt(sigma_ii sigma_jj)`.
pub fn empirical_correlations(summary: &SeriesSummary) -> Result<EmpiricalCorrelations> {
    let variances = &summary.sample_covariance;
    for i in 0..summary.states() {
        if !(variances[(i, i)] > 0.0) {
            return Err(StatsError::ZeroVarianceState { state: i });
        }
    }
    let batch_zero = &summary.batch_lag_covariances[&0];
    let mut time_corr = BTreeMap::new();
    let mut time_corr_se = BTreeMap::new();
    for (&lag, cov) in &summary.lag_covariances {
        let mut corr = normalize(cov, variances);
        if lag == 0 {
            for i in 0..corr.nrows() {
                corr[(i, i)] = 1.0;
            }
        }
        // Each batch normalized by its own variances; a batch with a zero
        // variance falls back to the global ones.
        let per_batch: Vec<DMatrix<f64>> = summary.batch_lag_covariances[&lag]
            .iter()
            .zip(batch_zero)
            .map(|(c, v)| {
                if (0..v.nrows()).all(|i| v[(i, i)] > 0.0) {
                    normalize(c, v)
                } else {
                    normalize(c, variances)
                }
            })
            .collect();
        time_corr.insert(lag, corr);
        time_corr_se.insert(lag, matrix_se(&per_batch));
    }
    Ok(EmpiricalCorrelations {
        kappa: time_corr[&0].clone(),
        kappa_se: time_corr_se[&0].clone(),
        time_corr,
        time_corr_se,
    })
}

/// One named quantity to compare entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantity {
    pub name: String,
    pub analytic: DMatrix<f64>,
    pub empirical: DMatrix<f64>,
    pub standard_error: DMatrix<f64>,
}

impl Quantity {
    pub fn matrix(
        name: impl Into<String>,
        analytic: DMatrix<f64>,
        empirical: DMatrix<f64>,
        standard_error: DMatrix<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            analytic,
            empirical,
            standard_error,
        }
    }

    pub fn vector(
        name: impl Into<String>,
        analytic: &DVector<f64>,
        empirical: &DVector<f64>,
        standard_error: &DVector<f64>,
    ) -> Self {
        let row = |v: &DVector<f64>| DMatrix::from_row_slice(1, v.len(), v.as_slice());
        Self::matrix(name, row(analytic), row(empirical), row(standard_error))
    }

    pub fn scalar(name: impl Into<String>, analytic: f64, empirical: f64, standard_error: f64) -> Self {
        let one = |x| DMatrix::from_element(1, 1, x);
        Self::matrix(name, one(analytic), one(empirical), one(standard_error))
    }
}

/// A comparison passes if `|z| <= z_threshold` or the absolute difference
/// is at most `absolute_tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TolerancePolicy {
    pub z_threshold: f64,
    pub absolute_tol: f64,
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        Self {
            z_threshold: DEFAULT_Z_THRESHOLD,
            absolute_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub quantity: String,
    pub analytic: f64,
    pub empirical: f64,
    pub standard_error: f64,
    pub z: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub policy: TolerancePolicy,
    pub rows: Vec<ComparisonRow>,
    pub pass: bool,
}

/// Entry-wise comparison. Row names use 1-based indices: `name[i]` for
/// vectors and scalars shaped `1 x n`, `name[i,j]` otherwise.
pub fn compare(quantities: &[Quantity], policy: TolerancePolicy) -> Result<ComparisonReport> {
    let mut rows = Vec::new();
    for q in quantities {
        let shape = q.analytic.shape();
        for (label, other) in [("empirical", &q.empirical), ("standard error", &q.standard_error)] {
            if other.shape() != shape {
                return Err(StatsError::ShapeMismatch {
                    quantity: q.name.clone(),
                    detail: format!("analytic is {shape:?}, {label} is {:?}", other.shape()),
                });
            }
        }
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let quantity = match shape {
                    (1, 1) => q.name.clone(),
                    (1, _) => format!("{}[{}]", q.name, j + 1),
                    _ => format!("{}[{},{}]", q.name, i + 1, j + 1),
                };
                let (a, e, se) = (q.analytic[(i, j)], q.empirical[(i, j)], q.standard_error[(i, j)]);
                let diff = e - a;
                let z = if diff == 0.0 {
                    0.0
                } else if se > 0.0 {
                    diff / se
                } else {
                    diff.signum() * f64::INFINITY
                };
                let pass = z.abs() <= policy.z_threshold || diff.abs() <= policy.absolute_tol;
                rows.push(ComparisonRow {
                    quantity,
                    analytic: a,
                    empirical: e,
                    standard_error: se,
                    z,
                    verdict: if pass { Verdict::Pass } else { Verdict::Fail },
                });
            }
        }
    }
    let pass = rows.iter().all(|r| r.verdict == Verdict::Pass);
    Ok(ComparisonReport { policy, rows, pass })
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["quantity", "analytic", "empirical", "std_err", "z", "verdict"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.quantity.clone(),
                    format!("{:.6}", r.analytic),
                    format!("{:.6}", r.empirical),
                    format!("{:.6}", r.standard_error),
                    format!("{:.3}", r.z),
                    match r.verdict {
                        Verdict::Pass => "pass".into(),
                        Verdict::Fail => "FAIL".into(),
                    },
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cols: &[&str]| {
            let mut text = String::new();
            for (k, (c, w)) in cols.iter().zip(widths).enumerate() {
                if k == 0 {
                    let _ = write!(text, "{c:<w$}");
                } else {
                    let _ = write!(text, "  {c:>w$}");
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
        };
        line(&header);
        for row in &cells {
            line(&row.each_ref().map(String::as_str));
        }
        let _ = writeln!(
            out,
            "overall: {} (z threshold {}, absolute tolerance {})",
            if self.pass { "pass" } else { "FAIL" },
            self.policy.z_threshold,
            self.policy.absolute_tol
        );
        out
    }
}
