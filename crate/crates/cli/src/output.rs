//! File writers. Every file starts with its provenance: a `#` comment line in
//! CSV and text files, `config_hash`/`seed` fields in JSON.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn comment(&self) -> String {
        match self.seed {
            Some(seed) => format!("# config_hash={} seed={seed}", self.config_hash),
            None => format!("# config_hash={} seed=none", self.config_hash),
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

/// JSON with provenance fields merged in at the top level.
pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<(), CliError> {
    let mut value = serde_json::to_value(body).expect("report serializes");
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("config_hash".into(), provenance.config_hash.clone().into());
        map.insert("seed".into(), provenance.seed.into());
    }
    let mut text = serde_json::to_string_pretty(&value).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_text(path: &Path, provenance: &Provenance, body: &str) -> Result<(), CliError> {
    fs::write(path, format!("{}\n{body}", provenance.comment()))?;
    Ok(())
}

/// CSV writer that emits the provenance comment and header up front.
pub struct CsvFile {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl CsvFile {
    pub fn create(path: &Path, provenance: &Provenance, header: &[&str]) -> Result<Self, CliError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{}", provenance.comment())?;
        if !header.is_empty() {
            writeln!(out, "{}", header.join(","))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<(), CliError> {
        writeln!(self.out, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn writer(&mut self) -> &mut BufWriter<fs::File> {
        &mut self.out
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.out.flush()?;
        Ok(self.path)
    }
}

/// Shortest round-trip decimal; non-finite values as `nan`/`inf`/`-inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x}")
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
