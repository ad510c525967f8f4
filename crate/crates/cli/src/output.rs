//! CSV and JSON artifacts with a checksummed manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::CliError;

/// One CSV cell.
#[derive(Debug, Clone)]
pub enum Cell {
    F(f64),
    I(i64),
    U(u64),
    S(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => fmt_f64(*v),
            Cell::I(v) => v.to_string(),
            Cell::U(v) => v.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}
impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::U(v as u64)
    }
}
impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::I(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

/// Seventeen significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: &'a str,
    config: &'a ExperimentConfig,
    files: &'a [ManifestEntry],
    notes: &'a [String],
}

pub struct RunDir {
    pub dir: PathBuf,
    pub command: String,
    pub config: ExperimentConfig,
    pub hash: String,
    pub entries: Vec<ManifestEntry>,
    pub notes: Vec<String>,
}

impl RunDir {
    pub fn create(config: &ExperimentConfig, command: &str) -> Result<Self, CliError> {
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(RunDir {
            dir,
            command: command.to_string(),
            hash: config.hash(),
            config: config.clone(),
            entries: Vec::new(),
            notes: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8], rows: usize) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.entries.retain(|e| e.file != name);
        self.entries.push(ManifestEntry { file: name.to_string(), rows, sha256: hex(&Sha256::digest(bytes)) });
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), CliError> {
        let mut buf = format!("# config_sha256={}\n", self.hash).into_bytes();
        {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
            let io = |e: csv::Error| CliError::Io(e.to_string());
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(r.iter().map(Cell::render)).map_err(io)?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
        self.write(name, &buf, rows.len())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes(), 1)
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let m = Manifest {
            command: &self.command,
            config_sha256: &self.hash,
            config: &self.config,
            files: &self.entries,
            notes: &self.notes,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(self.dir)
    }
}

/// Reads a CSV written by [`RunDir::csv`] into header and string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| CliError::Io(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Io(e.to_string()))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
