use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use openchain::chain::{adjacency, is_irreducible, period, spectral_radius, DEFAULT_POWER_ITERATIONS};
use openchain::cumulants::{
    lag_covariance, outgoing_moments, spatial_correlation, stationary_mean, stationary_variance,
    three_state_kappa, time_correlation, CumulantState,
};
use openchain::mgf::{numeric_cumulants, LogMgfEvaluator, DEFAULT_MGF_TOL, DEFAULT_STEP};
use openchain::protocols::{three_state_example, JointTable};
use openchain::simulate::{run, run_counts, CountSeries};
use openchain::stats::{
    compare, empirical_correlations, summarize, ComparisonReport, Quantity, SeriesSummary,
    TolerancePolicy,
};
use openchain::{IncomingProtocol, JumpMatrix, OpenChainModel, StateVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{build_jump, BuiltModel, ExperimentConfig, Format, GridPoint};
use crate::error::CliError;
use crate::output::{ensure_dir, num, rows, vector, write_json, write_text, CsvFile, Provenance};

pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_FIGURE_SEED: u64 = 2024;
pub const FIG5_MAX_LAG: u32 = 30;

/// Command-line values that take precedence over the config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lags: Option<Vec<u32>>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, mut config: ExperimentConfig) -> ExperimentConfig {
        if let Some(seed) = self.seed {
            config.run.seed = Some(seed);
        }
        if let Some(lags) = &self.lags {
            config.run.lags = Some(lags.clone());
        }
        if let Some(tol) = self.tol {
            config.analysis.tol = Some(tol);
        }
        if let Some(out) = &self.out {
            config.output.dir = Some(out.clone());
        }
        config
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    Ok(overrides.apply(ExperimentConfig::load(path)?))
}

/// Per-point seed: the first word of the ChaCha8 stream `index + 1` keyed by
/// the base seed.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// Rayon pool capped by `OPENCHAIN_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var("OPENCHAIN_THREADS") {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("OPENCHAIN_THREADS={value} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn point_dir(base: &Path, point: &GridPoint) -> PathBuf {
    match &point.label {
        Some(label) => base.join(label),
        None => base.to_path_buf(),
    }
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output
        .dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let cells: Vec<String> = v.into_iter().map(num).collect();
    format!("({})", cells.join(", "))
}

fn protocol_kind(protocol: &IncomingProtocol) -> &'static str {
    match protocol {
        IncomingProtocol::Constant { .. } => "constant",
        IncomingProtocol::IidProduct { .. } => "iid_product",
        IncomingProtocol::JointTable { .. } => "joint_table",
        IncomingProtocol::MarkovModulated { .. } => "markov_modulated",
    }
}

/// Structural diagnostics. Returns the printed report; an invalid model is
/// reported and then returned as an error.
pub fn validate(config_path: &Path) -> Result<String, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let mut text = format!("config_hash: {}\n", config.hash());
    let mut failure = None;
    for point in config.points()? {
        if let Some(label) = &point.label {
            text.push_str(&format!("[{label}]\n"));
        }
        match point.model.build() {
            Ok(built) => {
                let m = &built.model;
                text.push_str(&format!("states: {}\n", m.states()));
                text.push_str(&format!("spectral_radius: {}\n", num(m.jump().spectral_radius())));
                text.push_str(&format!("escape: {}\n", fmt_vec(m.escape().vector().iter().copied())));
                let zero = m.jump().matrix().iter().all(|&x| x == 0.0);
                let adj = adjacency(m.jump().matrix());
                text.push_str(&format!(
                    "irreducible: {}\n",
                    if zero { "n/a (empty jump matrix)" } else { yes_no(is_irreducible(&adj)) }
                ));
                text.push_str(&format!(
                    "aperiodic: {}\n",
                    if zero { "n/a (empty jump matrix)" } else { yes_no(period(&adj) == Some(1)) }
                ));
                match &built.schedule {
                    Some(s) => text.push_str(&format!("protocol: schedule of {} segments\n", s.segments().len())),
                    None => text.push_str(&format!(
                        "protocol: {} ({})\n",
                        protocol_kind(m.protocol()),
                        if m.protocol().is_time_independent() {
                            "i.i.d. in time"
                        } else {
                            "temporally correlated"
                        }
                    )),
                }
                text.push_str(&format!("fingerprint: {}\n", m.fingerprint()));
                text.push_str("status: valid\n");
            }
            Err(err) => {
                if let Ok(raw) = point.model.jump_rows() {
                    describe_raw(&raw, &mut text);
                }
                text.push_str(&format!("status: {err}\n"));
                failure.get_or_insert(err);
            }
        }
    }
    match failure {
        None => Ok(text),
        Some(err) => {
            print!("{text}");
            Err(err)
        }
    }
}

fn describe_raw(raw: &[Vec<f64>], text: &mut String) {
    let n = raw.len();
    if n == 0 || raw.iter().any(|r| r.len() != n) || raw.iter().flatten().any(|x| !x.is_finite()) {
        return;
    }
    let m = DMatrix::from_fn(n, n, |i, j| raw[i][j]);
    text.push_str(&format!("states: {n}\n"));
    if let Ok(rho) = spectral_radius(&m, DEFAULT_POWER_ITERATIONS) {
        text.push_str(&format!("spectral_radius: {}\n", num(rho)));
    }
    let escape = raw.iter().map(|r| 1.0 - r.iter().sum::<f64>());
    text.push_str(&format!("escape: {}\n", fmt_vec(escape)));
    let adj = adjacency(&m);
    text.push_str(&format!("irreducible: {}\n", yes_no(is_irreducible(&adj))));
    text.push_str(&format!("aperiodic: {}\n", yes_no(period(&adj) == Some(1))));
}

#[derive(Debug, Clone, Serialize)]
pub struct LagEntry {
    pub s: u32,
    pub covariance: Vec<Vec<f64>>,
    pub time_correlation: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutgoingReport {
    pub mean_per_state: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub mean_total: f64,
    pub var_total: f64,
    pub inflow_total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MgfReport {
    pub fingerprint: Option<String>,
    pub depth: Option<usize>,
    pub radius: f64,
    pub step: f64,
    pub max_mean_deviation: f64,
    pub max_covariance_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticsReport {
    pub point: Option<String>,
    pub model_fingerprint: String,
    pub states: usize,
    pub spectral_radius: f64,
    pub escape: Vec<f64>,
    pub protocol: &'static str,
    pub tol: f64,
    pub stationary_mean: Vec<f64>,
    pub stationary_covariance: Vec<Vec<f64>>,
    pub spatial_correlation: Option<Vec<Vec<f64>>>,
    pub lags: Vec<LagEntry>,
    pub outgoing: OutgoingReport,
    /// Finite-difference cumulants of the stationary log-m.g.f. against the
    /// closed-form ones; absent for temporally correlated protocols.
    pub mgf: Option<MgfReport>,
}

/// Closed-form analytics used by `analyze` and as the reference for
/// `simulate`.
pub struct Analytics {
    pub state: CumulantState,
    pub report: AnalyticsReport,
}

fn analytics_for(built: &BuiltModel, label: Option<String>, lags: &[u32], tol: f64) -> Result<Analytics, CliError> {
    if built.schedule.is_some() {
        return Err(CliError::Invalid(
            "stationary analytics need a stationary protocol, not a schedule".into(),
        ));
    }
    let model = &built.model;
    let invalid = |e: openchain::CumulantError| CliError::Invalid(e.to_string());
    let moments = model
        .protocol()
        .moments()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let mean = stationary_mean(&moments, model.jump()).map_err(invalid)?;
    let covariance = stationary_variance(&moments, model.jump(), tol).map_err(invalid)?;
    let state = CumulantState { mean, covariance };
    let kappa = spatial_correlation(&state.covariance).ok();

    let mut all_lags = lags.to_vec();
    all_lags.push(0);
    all_lags.sort_unstable();
    all_lags.dedup();
    let lag_entries = all_lags
        .iter()
        .map(|&s| LagEntry {
            s,
            covariance: rows(&lag_covariance(&state.covariance, model.jump(), s)),
            time_correlation: time_correlation(&state.covariance, model.jump(), s)
                .ok()
                .map(|m| rows(&m)),
        })
        .collect();

    let out = outgoing_moments(&state, model.escape());
    let mgf = if model.protocol().is_time_independent() {
        let evaluator = LogMgfEvaluator::stationary(model, DEFAULT_MGF_TOL)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        numeric_cumulants(&evaluator, DEFAULT_STEP).ok().map(|(g, h)| MgfReport {
            fingerprint: evaluator.fingerprint.clone(),
            depth: evaluator.depth,
            radius: evaluator.radius,
            step: DEFAULT_STEP,
            max_mean_deviation: (&g - &state.mean).amax(),
            max_covariance_deviation: (&h - &state.covariance).amax(),
        })
    } else {
        None
    };

    let report = AnalyticsReport {
        point: label,
        model_fingerprint: model.fingerprint(),
        states: model.states(),
        spectral_radius: model.jump().spectral_radius(),
        escape: vector(model.escape().vector()),
        protocol: protocol_kind(model.protocol()),
        tol,
        stationary_mean: vector(&state.mean),
        stationary_covariance: rows(&state.covariance),
        spatial_correlation: kappa.as_ref().map(rows),
        lags: lag_entries,
        outgoing: OutgoingReport {
            mean_per_state: vector(&out.mean_per_state),
            covariance: rows(&out.covariance),
            mean_total: out.mean_total,
            var_total: out.var_total,
            inflow_total: moments.mean.sum(),
        },
        mgf,
    };
    Ok(Analytics { state, report })
}

fn write_analytics(dir: &Path, provenance: &Provenance, config: &ExperimentConfig, report: &AnalyticsReport) -> Result<(), CliError> {
    ensure_dir(dir)?;
    if config.output.wants(Format::Json) {
        write_json(&dir.join("analytics.json"), provenance, report)?;
    }
    if config.output.wants(Format::Csv) {
        let mut csv = CsvFile::create(
            &dir.join("mean.csv"),
            provenance,
            &["state", "stationary_mean", "escape", "outgoing_mean"],
        )?;
        for i in 0..report.states {
            csv.row(&[
                (i + 1).to_string(),
                num(report.stationary_mean[i]),
                num(report.escape[i]),
                num(report.outgoing.mean_per_state[i]),
            ])?;
        }
        csv.finish()?;

        let mut csv = CsvFile::create(&dir.join("covariance.csv"), provenance, &["i", "j", "covariance", "kappa"])?;
        for i in 0..report.states {
            for j in 0..report.states {
                let kappa = report
                    .spatial_correlation
                    .as_ref()
                    .map_or(f64::NAN, |k| k[i][j]);
                csv.row(&[
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    num(report.stationary_covariance[i][j]),
                    num(kappa),
                ])?;
            }
        }
        csv.finish()?;

        let mut csv = CsvFile::create(
            &dir.join("time_correlation.csv"),
            provenance,
            &["s", "i", "j", "lag_covariance", "time_correlation"],
        )?;
        for lag in &report.lags {
            for i in 0..report.states {
                for j in 0..report.states {
                    let c = lag.time_correlation.as_ref().map_or(f64::NAN, |m| m[i][j]);
                    csv.row(&[
                        lag.s.to_string(),
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        num(lag.covariance[i][j]),
                        num(c),
                    ])?;
                }
            }
        }
        csv.finish()?;
    }
    Ok(())
}

/// Stationary analytics for every grid point.
pub fn analyze(config_path: &Path, overrides: &Overrides) -> Result<String, CliError> {
    let config = load(config_path, overrides)?;
    let provenance = Provenance {
        config_hash: config.hash(),
        seed: config.run.seed,
    };
    let base = out_dir(&config);
    let lags = config.lags();
    let mut text = String::new();
    for point in config.points()? {
        let built = point.model.build()?;
        let analytics = analytics_for(&built, point.label.clone(), &lags, config.tol())?;
        let dir = point_dir(&base, &point);
        write_analytics(&dir, &provenance, &config, &analytics.report)?;
        text.push_str(&format!(
            "{}mean {} written to {}\n",
            point.label.as_ref().map(|l| format!("[{l}] ")).unwrap_or_default(),
            fmt_vec(analytics.report.stationary_mean.iter().copied()),
            dir.display()
        ));
    }
    Ok(text)
}

#[derive(Debug, Clone, Serialize)]
pub struct LagEstimate {
    pub s: u32,
    pub covariance: Vec<Vec<f64>>,
    pub standard_error: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryReport {
    pub point: Option<String>,
    pub samples: usize,
    pub batches: usize,
    pub sample_mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub sample_covariance: Vec<Vec<f64>>,
    pub covariance_se: Vec<Vec<f64>>,
    pub lags: Vec<LagEstimate>,
    pub kappa: Option<Vec<Vec<f64>>>,
    pub kappa_se: Option<Vec<Vec<f64>>>,
    pub time_correlation: Option<Vec<LagEstimate>>,
    pub outflow_total_mean: f64,
    pub outflow_total_se: f64,
}

fn summary_report(point: Option<String>, summary: &SeriesSummary, outflow: &SeriesSummary) -> SummaryReport {
    let lags = summary
        .lag_covariances
        .iter()
        .map(|(&s, c)| LagEstimate {
            s,
            covariance: rows(c),
            standard_error: rows(&summary.lag_se[&s]),
        })
        .collect();
    let corr = empirical_correlations(summary).ok();
    SummaryReport {
        point,
        samples: summary.samples,
        batches: summary.batches,
        sample_mean: vector(&summary.sample_mean),
        mean_se: vector(&summary.mean_se),
        sample_covariance: rows(&summary.sample_covariance),
        covariance_se: rows(&summary.covariance_se),
        lags,
        kappa: corr.as_ref().map(|c| rows(&c.kappa)),
        kappa_se: corr.as_ref().map(|c| rows(&c.kappa_se)),
        time_correlation: corr.as_ref().map(|c| {
            c.time_corr
                .iter()
                .map(|(&s, m)| LagEstimate {
                    s,
                    covariance: rows(m),
                    standard_error: rows(&c.time_corr_se[&s]),
                })
                .collect()
        }),
        outflow_total_mean: outflow.sample_mean[0],
        outflow_total_se: outflow.mean_se[0],
    }
}

fn check_length(horizon: usize, burn_in: usize, lags: &[u32], batches: usize) -> Result<(), CliError> {
    if horizon == 0 || burn_in >= horizon {
        return Err(CliError::Invalid(format!(
            "SeriesTooShort: horizon {horizon} leaves no steps after burn-in {burn_in}"
        )));
    }
    let required = lags.iter().copied().max().unwrap_or(0) as usize + 10 * batches;
    if horizon - burn_in <= required {
        return Err(CliError::Invalid(format!(
            "SeriesTooShort: {} post-burn-in steps, need more than {required}",
            horizon - burn_in
        )));
    }
    Ok(())
}

/// Simulates every grid point, writes records and comparison reports, and
/// fails with exit 3 if any comparison fails.
pub fn simulate(config_path: &Path, overrides: &Overrides) -> Result<String, CliError> {
    let config = load(config_path, overrides)?;
    let seed = config.run.seed.ok_or_else(|| {
        CliError::Invalid("simulate needs a seed (run.seed or --seed)".into())
    })?;
    let provenance = Provenance {
        config_hash: config.hash(),
        seed: Some(seed),
    };
    let (horizon, burn_in, batches) = (config.horizon(), config.burn_in(), config.batches());
    let lags = config.lags();
    check_length(horizon, burn_in, &lags, batches)?;
    let points = config.points()?;
    let built: Vec<BuiltModel> = points
        .iter()
        .map(|p| p.model.build())
        .collect::<Result<_, _>>()?;
    if built.iter().any(|b| b.schedule.is_some()) {
        return Err(CliError::Invalid(
            "the simulator runs a single protocol; schedules are analytic only".into(),
        ));
    }
    let base = out_dir(&config);
    let sweep = config.sweep.is_some();
    let pool = thread_pool()?;
    let results: Vec<Result<(String, bool), CliError>> = pool.install(|| {
        points
            .par_iter()
            .zip(built.par_iter())
            .map(|(point, built)| {
                let point_seed = if sweep { derive_seed(seed, point.index) } else { seed };
                simulate_point(&config, &provenance, point, built, point_seed, &base)
            })
            .collect()
    });
    let mut text = String::new();
    let mut failed = Vec::new();
    for (point, result) in points.iter().zip(results) {
        let (line, pass) = result?;
        text.push_str(&line);
        if !pass {
            failed.push(point.label.clone().unwrap_or_else(|| "run".into()));
        }
    }
    if failed.is_empty() {
        Ok(text)
    } else {
        print!("{text}");
        Err(CliError::ComparisonFailed(format!("failing points: {}", failed.join(", "))))
    }
}

fn simulate_point(
    config: &ExperimentConfig,
    provenance: &Provenance,
    point: &GridPoint,
    built: &BuiltModel,
    seed: u64,
    base: &Path,
) -> Result<(String, bool), CliError> {
    let lags = config.lags();
    let analytics = analytics_for(built, point.label.clone(), &lags, config.tol())?;
    let model = &built.model;
    let record = run(model, config.horizon(), &StateVector(built.initial.clone()), seed, config.burn_in())
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let summary = summarize(&record.counts, &lags, config.batches())
        .map_err(|e| CliError::Invalid(format!("SeriesTooShort: {e}")))?;
    let outflow_series = CountSeries::new(1, record.burn_in, record.outflow_total.clone());
    let outflow = summarize(&outflow_series, &[], config.batches())
        .map_err(|e| CliError::Invalid(e.to_string()))?;

    let mut quantities = vec![
        Quantity::vector("mean", &analytics.state.mean, &summary.sample_mean, &summary.mean_se),
        Quantity::matrix(
            "covariance",
            analytics.state.covariance.clone(),
            summary.sample_covariance.clone(),
            summary.covariance_se.clone(),
        ),
    ];
    for &s in lags.iter().filter(|&&s| s > 0) {
        quantities.push(Quantity::matrix(
            format!("lag_covariance(s={s})"),
            lag_covariance(&analytics.state.covariance, model.jump(), s),
            summary.lag_covariances[&s].clone(),
            summary.lag_se[&s].clone(),
        ));
    }
    quantities.push(Quantity::scalar(
        "outflow_total_mean",
        analytics.report.outgoing.mean_total,
        outflow.sample_mean[0],
        outflow.mean_se[0],
    ));
    let report = compare(&quantities, config.policy()).map_err(|e| CliError::Invalid(e.to_string()))?;

    let dir = point_dir(base, point);
    ensure_dir(&dir)?;
    write_analytics(&dir, provenance, config, &analytics.report)?;
    if config.output.record.unwrap_or(true) && config.output.wants(Format::Csv) {
        let mut csv = CsvFile::create(&dir.join("record.csv"), provenance, &[])?;
        record.write_csv(csv.writer())?;
        csv.finish()?;
    }
    #[derive(Serialize)]
    struct Manifest {
        #[serde(flatten)]
        run: openchain::simulate::RunManifest,
        point: Option<String>,
    }
    write_json(
        &dir.join("manifest.json"),
        provenance,
        &Manifest {
            run: record.manifest(),
            point: point.label.clone(),
        },
    )?;
    if config.output.wants(Format::Json) {
        write_json(&dir.join("summary.json"), provenance, &summary_report(point.label.clone(), &summary, &outflow))?;
        write_json(&dir.join("report.json"), provenance, &report)?;
    }
    if config.output.wants(Format::Table) {
        write_text(&dir.join("report.txt"), provenance, &report.to_table())?;
    }
    let max_z = report.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let line = format!(
        "{}seed {seed}: {} (max |z| = {:.3}) -> {}\n",
        point.label.as_ref().map(|l| format!("[{l}] ")).unwrap_or_default(),
        if report.pass { "pass" } else { "FAIL" },
        max_z,
        dir.display()
    );
    Ok((line, report.pass))
}

/// Settings shared by the figure generators.
#[derive(Debug, Clone, Serialize)]
pub struct FigureSettings {
    pub figure: String,
    pub seed: u64,
    pub horizon: usize,
    pub burn_in: usize,
    pub batches: usize,
    pub lags: Vec<u32>,
}

impl FigureSettings {
    fn provenance(&self) -> Provenance {
        let json = serde_json::to_string(self).expect("settings serialize");
        Provenance {
            config_hash: hex::encode(Sha256::digest(json.as_bytes())),
            seed: Some(self.seed),
        }
    }
}

fn symmetric_three_state(p: f64, q: f64) -> Result<OpenChainModel, CliError> {
    let jump = build_jump(&[vec![0.0, q, q], vec![q, 0.0, q], vec![q, q, 0.0]])?;
    let protocol = three_state_example(p).map_err(|e| CliError::Invalid(e.to_string()))?;
    OpenChainModel::new(jump, protocol).map_err(|e| CliError::Invalid(e.to_string()))
}

fn simulate_summary(model: &OpenChainModel, settings: &FigureSettings, seed: u64, lags: &[u32]) -> Result<SeriesSummary, CliError> {
    let series = run_counts(
        model,
        settings.horizon,
        &StateVector::zeros(model.states()),
        seed,
        settings.burn_in,
    )
    .map_err(|e| CliError::Invalid(e.to_string()))?;
    summarize(&series, lags, settings.batches).map_err(|e| CliError::Invalid(e.to_string()))
}

pub const FIG4_Q: [f64; 2] = [0.25, 0.45];

pub const FIG4_HEADER: [&str; 10] = [
    "q",
    "p",
    "kappa12_analytic",
    "kappa13_analytic",
    "kappa12_empirical",
    "kappa12_se",
    "kappa13_empirical",
    "kappa13_se",
    "kappa23_empirical",
    "kappa23_se",
];

/// Spatial correlations over `p in {0, 0.1, ..., 1}` at each `q` in
/// [`FIG4_Q`], analytic and simulated.
pub fn figure4(settings: &FigureSettings, dir: &Path) -> Result<PathBuf, CliError> {
    let grid: Vec<(f64, f64)> = FIG4_Q
        .iter()
        .flat_map(|&q| (0..=10).map(move |k| (q, k as f64 / 10.0)))
        .collect();
    let pool = thread_pool()?;
    let rows: Vec<Result<Vec<String>, CliError>> = pool.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(index, &(q, p))| {
                let model = symmetric_three_state(p, q)?;
                let (k12, k13) = three_state_kappa(p, q).map_err(|e| CliError::Invalid(e.to_string()))?;
                let summary = simulate_summary(&model, settings, derive_seed(settings.seed, index), &[])?;
                let corr = empirical_correlations(&summary).map_err(|e| CliError::Invalid(e.to_string()))?;
                Ok(vec![
                    num(q),
                    num(p),
                    num(k12),
                    num(k13),
                    num(corr.kappa[(0, 1)]),
                    num(corr.kappa_se[(0, 1)]),
                    num(corr.kappa[(0, 2)]),
                    num(corr.kappa_se[(0, 2)]),
                    num(corr.kappa[(1, 2)]),
                    num(corr.kappa_se[(1, 2)]),
                ])
            })
            .collect()
    });
    ensure_dir(dir)?;
    let mut csv = CsvFile::create(&dir.join("fig4.csv"), &settings.provenance(), &FIG4_HEADER)?;
    for row in rows {
        csv.row(&row?)?;
    }
    csv.finish()
}

pub const FIG5_HEADER: [&str; 7] = [
    "s",
    "c11_analytic",
    "c12_analytic",
    "c11_empirical",
    "c11_se",
    "c12_empirical",
    "c12_se",
];

/// Time correlations `C(s)_{1,1}` and `C(s)_{1,2}` at `(p, q) = (0.4, 0.45)`.
pub fn figure5(settings: &FigureSettings, dir: &Path) -> Result<PathBuf, CliError> {
    let (p, q) = (0.4, 0.45);
    let model = symmetric_three_state(p, q)?;
    let moments = model
        .protocol()
        .moments()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let sigma = stationary_variance(&moments, model.jump(), openchain::cumulants::DEFAULT_VARIANCE_TOL)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let summary = simulate_summary(&model, settings, settings.seed, &settings.lags)?;
    let corr = empirical_correlations(&summary).map_err(|e| CliError::Invalid(e.to_string()))?;
    ensure_dir(dir)?;
    let mut csv = CsvFile::create(&dir.join("fig5.csv"), &settings.provenance(), &FIG5_HEADER)?;
    for (&s, empirical) in &corr.time_corr {
        let analytic = time_correlation(&sigma, model.jump(), s).map_err(|e| CliError::Invalid(e.to_string()))?;
        let se = &corr.time_corr_se[&s];
        csv.row(&[
            s.to_string(),
            num(analytic[(0, 0)]),
            num(analytic[(0, 1)]),
            num(empirical[(0, 0)]),
            num(se[(0, 0)]),
            num(empirical[(0, 1)]),
            num(se[(0, 1)]),
        ])?;
    }
    csv.finish()
}

/// Two-regime modulated arrivals on the symmetric chain (q = 0.45): a busy
/// regime (all three states receive a particle w.p. 0.9) and a quiet one
/// (w.p. 0.1), each persisting with probability 0.95.
pub fn modulated_example() -> Result<OpenChainModel, CliError> {
    let q = 0.45;
    let jump: JumpMatrix = build_jump(&[vec![0.0, q, q], vec![q, 0.0, q], vec![q, q, 0.0]])?;
    let regime = |busy: f64| JointTable::new(vec![(vec![1, 1, 1], busy), (vec![0, 0, 0], 1.0 - busy)]);
    let regimes = vec![regime(0.9), regime(0.1)]
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let protocol = IncomingProtocol::markov_modulated(vec![vec![0.95, 0.05], vec![0.05, 0.95]], regimes)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    OpenChainModel::new(jump, protocol).map_err(|e| CliError::Invalid(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct LagDiagnostic {
    pub description: &'static str,
    pub model_fingerprint: String,
    pub max_abs_z: BTreeMap<u32, f64>,
    pub max_abs_deviation: BTreeMap<u32, f64>,
    pub report: ComparisonReport,
}

/// Compares empirical lag covariances under temporally correlated arrivals
/// with the `Sigma Q^s` prediction built from the single-time arrival
/// moments. Reported, never gated.
pub fn lag_diagnostic(settings: &FigureSettings, dir: &Path) -> Result<PathBuf, CliError> {
    let model = modulated_example()?;
    let moments = model
        .protocol()
        .moments()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let sigma = stationary_variance(&moments, model.jump(), openchain::cumulants::DEFAULT_VARIANCE_TOL)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let summary = simulate_summary(&model, settings, settings.seed, &settings.lags)?;
    let mut quantities = Vec::new();
    let mut max_abs_z = BTreeMap::new();
    let mut max_abs_deviation = BTreeMap::new();
    ensure_dir(dir)?;
    let provenance = settings.provenance();
    let mut csv = CsvFile::create(
        &dir.join("lag_diagnostic.csv"),
        &provenance,
        &["s", "i", "j", "predicted", "empirical", "se", "z"],
    )?;
    for (&s, empirical) in &summary.lag_covariances {
        let predicted = lag_covariance(&sigma, model.jump(), s);
        let se = &summary.lag_se[&s];
        let mut worst_z: f64 = 0.0;
        let mut worst_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dev = empirical[(i, j)] - predicted[(i, j)];
                let z = dev / se[(i, j)];
                worst_z = worst_z.max(z.abs());
                worst_dev = worst_dev.max(dev.abs());
                csv.row(&[
                    s.to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    num(predicted[(i, j)]),
                    num(empirical[(i, j)]),
                    num(se[(i, j)]),
                    num(z),
                ])?;
            }
        }
        max_abs_z.insert(s, worst_z);
        max_abs_deviation.insert(s, worst_dev);
        quantities.push(Quantity::matrix(
            format!("lag_covariance(s={s})"),
            predicted,
            empirical.clone(),
            se.clone(),
        ));
    }
    let path = csv.finish()?;
    let report = compare(&quantities, TolerancePolicy::default()).map_err(|e| CliError::Invalid(e.to_string()))?;
    write_json(
        &dir.join("lag_diagnostic.json"),
        &provenance,
        &LagDiagnostic {
            description: "empirical lag covariance under Markov-modulated arrivals vs Sigma Q^s from single-time arrival moments",
            model_fingerprint: model.fingerprint(),
            max_abs_z,
            max_abs_deviation,
            report,
        },
    )?;
    Ok(path)
}
