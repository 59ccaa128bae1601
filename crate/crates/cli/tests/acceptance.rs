//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use openchain::chain::JumpMatrix;
use openchain::cumulants::{
    cumulant_step, outgoing_moments, stationary_mean, stationary_state, three_state_kappa,
    time_correlation, DEFAULT_VARIANCE_TOL,
};
use openchain::mgf::{h_map, iterate_h, numeric_cumulants, LogMgfEvaluator, DEFAULT_MGF_TOL, DEFAULT_STEP};
use openchain::protocols::three_state_example;
use openchain::simulate::{default_burn_in, enumerate_one_vertex_stationary, run, run_counts, CountSeries};
use openchain::stats::{summarize, SeriesSummary, DEFAULT_BATCHES};
use openchain::{IncomingProtocol, OpenChainModel, StateVector};
use openchain_cli::commands::{figure4, figure5, lag_diagnostic, FigureSettings, DEFAULT_FIGURE_SEED};

const HORIZON: usize = 500_000;

struct Criterion {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new() -> Self {
        Self {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }
}

fn three_state(p: f64, q: f64) -> OpenChainModel {
    let jump = JumpMatrix::from_rows(&[vec![0.0, q, q], vec![q, 0.0, q], vec![q, q, 0.0]]).unwrap();
    OpenChainModel::new(jump, three_state_example(p).unwrap()).unwrap()
}

fn one_vertex(p: f64, q: f64) -> OpenChainModel {
    let jump = JumpMatrix::from_rows(&[vec![q]]).unwrap();
    OpenChainModel::new(jump, IncomingProtocol::bernoulli(&[p]).unwrap()).unwrap()
}

/// The escape-profile example matrix, under independent
/// Bernoulli arrivals.
fn example2() -> OpenChainModel {
    let jump = JumpMatrix::from_rows(&[
        vec![0.0, 0.5, 0.25],
        vec![0.25, 0.25, 0.0],
        vec![0.25, 0.5, 0.25],
    ])
    .unwrap();
    OpenChainModel::new(jump, IncomingProtocol::bernoulli(&[0.2, 0.3, 0.1]).unwrap()).unwrap()
}

/// Closed-form stationary covariance of the symmetric three-state example.
fn closed_form_sigma(p: f64, q: f64) -> DMatrix<f64> {
    let d = 8.0 * q.powi(6) - 6.0 * q.powi(4) - 3.0 * q * q + 1.0;
    let a = (-8.0 * q.powi(5) + (8.0 * p - 2.0) * q.powi(4) + 4.0 * q.powi(3) + 3.0 * q * q + 4.0 * q + 1.0)
        / (4.0 * d);
    let b = (2.0 * q.powi(4) + q * q + p * (-8.0 * q.powi(4) - 4.0 * q * q + 2.0) - 1.0) / (4.0 * d);
    let c = -q * q * (q * q - p + 1.0) / (2.0 * d);
    let e = (-8.0 * q.powi(5) + (6.0 - 8.0 * p) * q.powi(4) + 4.0 * q.powi(3) + (4.0 * p + 1.0) * q * q
        + 4.0 * q
        + 1.0)
        / (4.0 * d);
    DMatrix::from_row_slice(3, 3, &[a, b, c, b, a, c, c, c, e])
}

fn simulate_summary(model: &OpenChainModel, seed: u64, lags: &[u32]) -> SeriesSummary {
    let series = run_counts(
        model,
        HORIZON,
        &StateVector::zeros(model.states()),
        seed,
        default_burn_in(HORIZON),
    )
    .unwrap();
    summarize(&series, lags, DEFAULT_BATCHES).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn figure_settings(figure: &str, lags: Vec<u32>) -> FigureSettings {
    FigureSettings {
        figure: figure.into(),
        seed: DEFAULT_FIGURE_SEED,
        horizon: HORIZON,
        burn_in: default_burn_in(HORIZON),
        batches: DEFAULT_BATCHES,
        lags,
    }
}

fn criterion1(dir: &Path, c: &mut Criterion) {
    let path = figure4(&figure_settings("fig4", vec![]), dir).unwrap();
    let (header, rows) = read_csv(&path);
    c.check(rows.len() == 22, format!("expected 22 grid points, found {}", rows.len()));
    let (mut max_diff, mut max_z) = (0.0f64, 0.0f64);
    for row in &rows {
        let (q, p) = (row[column(&header, "q")], row[column(&header, "p")]);
        let (k12, k13) = three_state_kappa(p, q).unwrap();
        c.check(
            row[column(&header, "kappa12_analytic")] == k12 && row[column(&header, "kappa13_analytic")] == k13,
            format!("analytic columns at q={q}, p={p} differ from the closed form"),
        );
        for (name, analytic) in [("kappa12", k12), ("kappa13", k13)] {
            let emp = row[column(&header, &format!("{name}_empirical"))];
            let se = row[column(&header, &format!("{name}_se"))];
            let diff = (emp - analytic).abs();
            let z = diff / se;
            max_diff = max_diff.max(diff);
            max_z = max_z.max(z);
            c.check(diff <= 0.02, format!("{name} at q={q}, p={p}: |diff| = {diff:.4} > 0.02"));
            c.check(z <= 4.0, format!("{name} at q={q}, p={p}: |z| = {z:.2} > 4"));
        }
    }
    c.note(format!("22 points, max |diff| {max_diff:.4}, max |z| {max_z:.2}"));
}

fn criterion2(dir: &Path, c: &mut Criterion) {
    let path = figure5(&figure_settings("fig5", (0..=30).collect()), dir).unwrap();
    let (header, rows) = read_csv(&path);
    c.check(rows.len() == 31, format!("expected s = 0..30, found {} rows", rows.len()));
    let model = three_state(0.4, 0.45);
    let sigma = stationary_state(&model, DEFAULT_VARIANCE_TOL).unwrap().covariance;
    let mut max_diff = 0.0f64;
    for row in &rows {
        let s = row[column(&header, "s")] as u32;
        let analytic = time_correlation(&sigma, model.jump(), s).unwrap();
        c.check(
            (row[column(&header, "c11_analytic")] - analytic[(0, 0)]).abs() < 1e-12
                && (row[column(&header, "c12_analytic")] - analytic[(0, 1)]).abs() < 1e-12,
            format!("analytic columns at s={s} differ from Sigma Q^s"),
        );
        if s == 0 {
            c.check(row[column(&header, "c11_analytic")] == 1.0, "C11(0) is not 1");
        }
        if s > 20 {
            continue;
        }
        for (name, analytic) in [("c11", analytic[(0, 0)]), ("c12", analytic[(0, 1)])] {
            let diff = (row[column(&header, &format!("{name}_empirical"))] - analytic).abs();
            max_diff = max_diff.max(diff);
            c.check(diff <= 0.02, format!("{name} at s={s}: |diff| = {diff:.4} > 0.02"));
        }
    }
    c.note(format!("s = 0..20, max |diff| {max_diff:.4}"));
}

fn criterion3(c: &mut Criterion) {
    for q in [0.05, 0.25, 0.3, 0.45] {
        let model = three_state(0.4, q);
        let mean = stationary_mean(&model.protocol().moments().unwrap(), model.jump()).unwrap();
        let expected = 1.0 / (2.0 - 4.0 * q);
        c.check(
            mean.iter().all(|m| (m - expected).abs() < 1e-12),
            format!("mean at q={q} is {mean:?}, expected {expected}"),
        );
    }
    let model = three_state(0.4, 0.25);
    let mean = stationary_mean(&model.protocol().moments().unwrap(), model.jump()).unwrap();
    c.check(
        mean.iter().all(|m| (m - 1.0).abs() < 1e-12),
        "mean at q=0.25 is not (1,1,1) to 1e-12",
    );
    let summary = simulate_summary(&model, 31, &[]);
    let mut max_z = 0.0f64;
    for i in 0..3 {
        let z = (summary.sample_mean[i] - 1.0).abs() / summary.mean_se[i];
        max_z = max_z.max(z);
        c.check(z <= 3.0, format!("Monte Carlo mean[{}] |z| = {z:.2} > 3", i + 1));
    }
    c.note(format!("Monte Carlo max |z| {max_z:.2}"));
}

fn criterion4(c: &mut Criterion) {
    let model = three_state(0.4, 0.45);
    let sigma = stationary_state(&model, DEFAULT_VARIANCE_TOL).unwrap().covariance;
    let oracle = closed_form_sigma(0.4, 0.45);
    let dev = (&sigma - &oracle).amax();
    c.check(dev < 1e-9, format!("closed-form deviation {dev:e} >= 1e-9"));
    let summary = simulate_summary(&model, 37, &[]);
    let mut max_z = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let z = (summary.sample_covariance[(i, j)] - sigma[(i, j)]).abs() / summary.covariance_se[(i, j)];
            max_z = max_z.max(z);
            c.check(z <= 4.0, format!("Monte Carlo covariance[{},{}] |z| = {z:.2} > 4", i + 1, j + 1));
        }
    }
    c.note(format!("closed-form deviation {dev:.1e}, Monte Carlo max |z| {max_z:.2}"));
}

/// Mean and variance of counts and of escapes from the truncated
/// stationary law.
fn enumeration_moments(p: f64, q: f64) -> (f64, f64, f64, f64) {
    let law = enumerate_one_vertex_stationary(p, q, 80).unwrap();
    let mean: f64 = law.iter().enumerate().map(|(n, w)| n as f64 * w).sum();
    let second: f64 = law.iter().enumerate().map(|(n, w)| (n * n) as f64 * w).sum();
    let var = second - mean * mean;
    let e = 1.0 - q;
    (mean, var, e * mean, e * (1.0 - e) * mean + e * e * var)
}

fn criterion5(c: &mut Criterion) {
    let (p, q) = (0.3, 0.5);
    let model = one_vertex(p, q);
    let (enum_mean, enum_var, _, _) = enumeration_moments(p, q);
    let state = stationary_state(&model, DEFAULT_VARIANCE_TOL).unwrap();
    let evaluator = LogMgfEvaluator::stationary(&model, DEFAULT_MGF_TOL).unwrap();
    let (g, h) = numeric_cumulants(&evaluator, DEFAULT_STEP).unwrap();

    let (mean, var) = (p / (1.0 - q), p / (1.0 - q) - p * p / (1.0 - q * q));
    let plus_sign = p / (1.0 - q) + p * p / (1.0 - q * q);
    c.check((mean - 0.6).abs() < 1e-12 && (var - 0.48).abs() < 1e-12, "closed forms are not 0.6 / 0.48");
    for (path, m, v) in [
        ("enumeration", enum_mean, enum_var),
        ("cumulant engine", state.mean[0], state.covariance[(0, 0)]),
        ("m.g.f. differences", g[0], h[(0, 0)]),
    ] {
        c.check((m - mean).abs() < 1e-9, format!("{path} mean {m} differs from {mean}"));
        c.check((v - var).abs() < 1e-9, format!("{path} variance {v} differs from {var}"));
        c.check((v - plus_sign).abs() > 0.1, format!("{path} variance matches the plus-sign form"));
    }
    let summary = simulate_summary(&model, 41, &[]);
    let zm = (summary.sample_mean[0] - mean).abs() / summary.mean_se[0];
    let zv = (summary.sample_covariance[(0, 0)] - var).abs() / summary.covariance_se[(0, 0)];
    c.check(zm <= 3.0, format!("Monte Carlo mean |z| = {zm:.2} > 3"));
    c.check(zv <= 3.0, format!("Monte Carlo variance |z| = {zv:.2} > 3"));
    let zerr = (summary.sample_covariance[(0, 0)] - plus_sign).abs() / summary.covariance_se[(0, 0)];
    c.check(zerr > 10.0, "Monte Carlo variance is consistent with the plus-sign form");
    c.note(format!("mean 0.6, variance 0.48; Monte Carlo |z| {zm:.2} / {zv:.2}"));
}

fn criterion6(c: &mut Criterion) {
    for (name, model, seed) in [
        ("one-vertex", one_vertex(0.3, 0.5), 43),
        ("escape example", example2(), 47),
        ("three-state", three_state(0.4, 0.45), 53),
    ] {
        let moments = model.protocol().moments().unwrap();
        let inflow = moments.mean.sum();
        let state = stationary_state(&model, DEFAULT_VARIANCE_TOL).unwrap();
        let out = outgoing_moments(&state, model.escape());
        c.check(
            (out.mean_total - inflow).abs() < 1e-12,
            format!("{name}: E[O] = {} but inflow = {inflow}", out.mean_total),
        );
        let record = run(&model, HORIZON, &StateVector::zeros(model.states()), seed, default_burn_in(HORIZON)).unwrap();
        let series = CountSeries::new(1, record.burn_in, record.outflow_total.clone());
        let summary = summarize(&series, &[], DEFAULT_BATCHES).unwrap();
        let z = (summary.sample_mean[0] - inflow).abs() / summary.mean_se[0];
        c.check(z <= 3.0, format!("{name}: Monte Carlo outflow |z| = {z:.2} > 3"));

        if name == "one-vertex" {
            let (p, q) = (0.3f64, 0.5f64);
            let (u_mean, u_var) = (p, p - p * p * (1.0 - q).powi(2) / (1.0 - q * q));
            let (_, _, enum_mean, enum_var) = enumeration_moments(p, q);
            let evaluator = LogMgfEvaluator::outgoing(&model, DEFAULT_MGF_TOL).unwrap();
            let (g, h) = numeric_cumulants(&evaluator, DEFAULT_STEP).unwrap();
            for (path, m, v) in [
                ("enumeration", enum_mean, enum_var),
                ("cumulant engine", out.mean_total, out.var_total),
                ("m.g.f. differences", g[0], h[(0, 0)]),
            ] {
                c.check((m - u_mean).abs() < 1e-9, format!("{path} E[U] {m} differs from {u_mean}"));
                c.check((v - u_var).abs() < 1e-9, format!("{path} Var(U) {v} differs from {u_var}"));
            }
            let zv = (summary.sample_covariance[(0, 0)] - u_var).abs() / summary.covariance_se[(0, 0)];
            c.check(zv <= 3.0, format!("Monte Carlo Var(U) |z| = {zv:.2} > 3"));
            c.note(format!("E[U] = 0.3, Var(U) = {u_var}; Monte Carlo |z| {z:.2} / {zv:.2}"));
        }
    }
}

fn criterion7(c: &mut Criterion) {
    let mut worst = 0.0f64;
    for (name, model) in [
        ("one-vertex", one_vertex(0.3, 0.5)),
        ("escape example", example2()),
        ("three-state", three_state(0.4, 0.45)),
    ] {
        let state = stationary_state(&model, DEFAULT_VARIANCE_TOL).unwrap();
        let evaluator = LogMgfEvaluator::stationary(&model, DEFAULT_MGF_TOL).unwrap();
        let (g, h) = numeric_cumulants(&evaluator, DEFAULT_STEP).unwrap();
        let dev = (&g - &state.mean).amax().max((&h - &state.covariance).amax());
        worst = worst.max(dev);
        c.check(dev < 1e-6, format!("{name}: deviation {dev:e} >= 1e-6"));
    }
    c.note(format!("max deviation {worst:.1e}"));
}

fn criterion8(c: &mut Criterion) {
    let models = [
        ("one-vertex", one_vertex(0.3, 0.5)),
        ("escape example", example2()),
        ("three-state", three_state(0.4, 0.45)),
    ];
    let mut worst_residual = 0.0f64;
    for (name, model) in &models {
        let state = stationary_state(model, DEFAULT_VARIANCE_TOL).unwrap();
        let next = cumulant_step(&state, &model.protocol().moments().unwrap(), model.jump()).unwrap();
        let residual = (&next.mean - &state.mean).amax().max((&next.covariance - &state.covariance).amax());
        worst_residual = worst_residual.max(residual);
        c.check(residual < 1e-10, format!("{name}: fixed-point residual {residual:e}"));

        let n = model.states();
        let q = model.jump().matrix();
        let escape = model.escape();
        let h = 1e-5;
        let mut jacobian = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut plus = DVector::zeros(n);
            plus[j] = h;
            let minus = -plus.clone();
            let col = (h_map(&plus, model.jump(), escape) - h_map(&minus, model.jump(), escape)) / (2.0 * h);
            jacobian.set_column(j, &col);
        }
        let dh = (&jacobian - q).amax();
        c.check(dh < 1e-5, format!("{name}: |DH(0) - Q| = {dh:e}"));

        let h = 1e-4;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let eval = |a: f64, b: f64| {
                        let mut alpha = DVector::zeros(n);
                        alpha[j] += a;
                        alpha[k] += b;
                        h_map(&alpha, model.jump(), escape)[i]
                    };
                    let fd = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
                    let exact = if j == k { q[(i, j)] } else { 0.0 } - q[(i, j)] * q[(i, k)];
                    c.check(
                        (fd - exact).abs() < 1e-5,
                        format!("{name}: Hessian of H_{} at ({},{}) is {fd}, expected {exact}", i + 1, j + 1, k + 1),
                    );
                }
            }
        }

        for start in [1.0, -2.0, 0.5] {
            let mut alpha = DVector::from_fn(n, |i, _| if i % 2 == 0 { start } else { -start / 2.0 });
            let mut previous = alpha.amax();
            for r in 1..=200 {
                alpha = h_map(&alpha, model.jump(), escape);
                let size = alpha.amax();
                if size > previous + 1e-15 {
                    c.check(false, format!("{name}: H-iterate grew at r={r} ({previous:e} -> {size:e})"));
                    break;
                }
                previous = size;
            }
            let direct = iterate_h(
                &DVector::from_fn(n, |i, _| if i % 2 == 0 { start } else { -start / 2.0 }),
                200,
                model.jump(),
                escape,
            );
            c.check(direct.amax() < 1e-6, format!("{name}: |H^200| = {:e}", direct.amax()));
        }

        let record = run(model, 100_000, &StateVector(vec![5; n]), 59, 0).unwrap();
        let mut violations = 0usize;
        for t in 0..record.horizon() - 1 {
            let now = record.counts.row(t);
            let next = record.counts.row(t + 1);
            let inflow = record.inflow_row(t);
            let outflow = record.outflow_row(t);
            let balance = now.iter().sum::<u64>() + inflow.iter().sum::<u64>() - outflow.iter().sum::<u64>();
            if balance != next.iter().sum::<u64>()
                || outflow.iter().zip(now).any(|(o, n)| o > n)
                || outflow.iter().sum::<u64>() != record.outflow_total[t]
            {
                violations += 1;
            }
        }
        c.check(violations == 0, format!("{name}: {violations} steps violate particle conservation"));
    }
    c.note(format!("max fixed-point residual {worst_residual:.1e}; conservation checked on 3 x 10^5 steps"));
}

fn openchain(args: &[&str], threads: Option<&str>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_openchain"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("OPENCHAIN_THREADS", n),
        None => cmd.env_remove("OPENCHAIN_THREADS"),
    };
    let out = cmd.output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion9(root: &Path, c: &mut Criterion) {
    fs::create_dir_all(root).unwrap();
    let config = root.join("config.json");
    fs::write(
        &config,
        r#"{
  "schema": 1,
  "model": { "family": "three_state", "p": 0.4, "q": 0.45 },
  "run": { "horizon": 20000, "seed": 5, "lags": [1, 2] }
}"#,
    )
    .unwrap();
    let sweep = root.join("sweep.json");
    fs::write(
        &sweep,
        r#"{
  "schema": 1,
  "model": { "family": "three_state", "p": 0.0, "q": 0.25 },
  "run": { "horizon": 20000, "seed": 9, "lags": [1] },
  "sweep": { "parameter": "p", "values": [0.0, 0.5, 1.0] },
  "analysis": { "z_threshold": 1e9 }
}"#,
    )
    .unwrap();
    let config = config.to_str().unwrap();
    let sweep = sweep.to_str().unwrap();
    let runs: Vec<(&str, Vec<&str>, [Option<&str>; 2])> = vec![
        ("validate", vec!["validate", "--config", config], [None, None]),
        ("analyze", vec!["analyze", "--config", config], [None, None]),
        ("simulate", vec!["simulate", "--config", config, "--tol", "1e-12"], [None, None]),
        ("simulate sweep", vec!["simulate", "--config", sweep], [Some("1"), Some("4")]),
        ("figure fig4", vec!["figure", "fig4", "--horizon", "20000"], [Some("1"), Some("4")]),
        ("figure fig5", vec!["figure", "fig5", "--horizon", "20000"], [None, None]),
        ("figure lag-diagnostic", vec!["figure", "lag-diagnostic", "--horizon", "20000"], [None, None]),
    ];
    let mut compared = 0;
    for (name, args, threads) in runs {
        let mut outputs = Vec::new();
        for (k, t) in threads.iter().enumerate() {
            let dir = root.join(format!("{}-{k}", name.replace(' ', "-")));
            let mut full = args.clone();
            let dir_str = dir.to_str().unwrap().to_string();
            if name != "validate" {
                full.extend(["--out", &dir_str]);
            }
            let (code, stdout) = openchain(&full, *t);
            c.check(code == 0, format!("{name}: exit code {code}"));
            let produced = if name == "validate" { Vec::new() } else { files(&dir) };
            if name != "validate" {
                c.check(!produced.is_empty(), format!("{name}: no output files"));
            }
            outputs.push((stdout.replace(&dir_str, "<out>"), produced));
        }
        compared += outputs[0].1.len();
        c.check(outputs[0] == outputs[1], format!("{name}: outputs differ between identical runs"));
    }
    let (code_a, _) = openchain(&["simulate", "--config", config, "--seed", "6", "--out", root.join("seed6").to_str().unwrap()], None);
    let a = fs::read(root.join("simulate-0").join("record.csv")).unwrap();
    let b = fs::read(root.join("seed6").join("record.csv")).unwrap();
    c.check(code_a == 0 && a != b, "a different seed did not change the record");
    c.note(format!("{compared} files byte-identical across repeated runs"));
}

fn diagnostic(dir: &Path) -> String {
    let settings = figure_settings("lag-diagnostic", vec![1, 2, 5, 10]);
    lag_diagnostic(&settings, dir).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("lag_diagnostic.json")).unwrap()).unwrap();
    let mut by_lag: Vec<(u32, f64)> = json["max_abs_z"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(s, v)| (s.parse().unwrap(), v.as_f64().unwrap()))
        .collect();
    by_lag.sort_by_key(|&(s, _)| s);
    let z = by_lag
        .iter()
        .map(|(s, z)| format!("s={s}: {z:.1}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("empirical lag covariance vs Sigma Q^s under Markov-modulated arrivals, max |z| {z}")
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn(&mut Criterion)>)> = vec![
        ("fig4 spatial correlations", Box::new(|c: &mut Criterion| criterion1(&root.join("fig4"), c))),
        ("fig5 time correlations", Box::new(|c: &mut Criterion| criterion2(&root.join("fig5"), c))),
        ("three-state stationary mean", Box::new(criterion3)),
        ("three-state stationary covariance", Box::new(criterion4)),
        ("one-vertex oracle chain", Box::new(criterion5)),
        ("outgoing flux", Box::new(criterion6)),
        ("consistency triangle", Box::new(criterion7)),
        ("structural invariants", Box::new(criterion8)),
        ("determinism", Box::new(|c: &mut Criterion| criterion9(&root.join("determinism"), c))),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let mut c = Criterion::new();
        check(&mut c);
        let verdict = if c.failures.is_empty() { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {verdict}: {name} ({}; {:.1}s)",
            k + 1,
            c.notes.join("; "),
            started.elapsed().as_secs_f64()
        );
        for failure in &c.failures {
            println!("    {failure}");
        }
        if !c.failures.is_empty() {
            failed += 1;
        }
    }
    println!("diagnostic (not gated): {}", diagnostic(&root.join("diagnostic")));
    if failed == 0 {
        println!("acceptance: all 9 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 9 criteria fail");
        ExitCode::FAILURE
    }
}
