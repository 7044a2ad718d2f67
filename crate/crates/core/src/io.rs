//! CSV plumbing shared by all stage files.
//!
//! Every file written by the pipeline starts with `#` comment lines that
//! record the tool version, the seed and a hash of the run configuration.
//! Readers skip those lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use csv::StringRecord;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Run metadata written at the top of every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileHeader {
    pub seed: u64,
    pub config_hash: String,
    /// Extra `key=value` pairs (spec descriptor, outcome, ...).
    pub extra: Vec<(String, String)>,
}

impl FileHeader {
    pub fn new(seed: u64, config_text: &str) -> Self {
        Self {
            seed,
            config_hash: config_hash(config_text),
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        let mut line = format!(
            "# healthshock {} seed={} config={}",
            VERSION, self.seed, self.config_hash
        );
        for (k, v) in &self.extra {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(v);
        }
        line.push('\n');
        line
    }
}

/// Short hex SHA-256 digest of a configuration rendering.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Reads the `key=value` pairs of the leading comment line, if any.
pub fn read_header_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let Some(first) = text.lines().next() else {
        return Ok(Vec::new());
    };
    if !first.starts_with('#') {
        return Ok(Vec::new());
    }
    Ok(first
        .split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

pub struct CsvOut {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl CsvOut {
    pub fn create(path: &Path, header: Option<&FileHeader>, columns: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        };
        if let Some(h) = header {
            out.raw(&h.render())?;
        }
        out.row(columns.iter().copied())?;
        Ok(out)
    }

    pub fn raw(&mut self, text: &str) -> Result<()> {
        self.inner
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut line = String::new();
        for (i, f) in fields.into_iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(f.as_ref());
        }
        line.push('\n');
        self.raw(&line)
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Shortest round-trip rendering of a float; empty for absent values.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Parsed CSV file with header-name lookup and line-aware errors.
pub struct CsvTable {
    pub path: PathBuf,
    headers: Vec<String>,
    records: Vec<(u64, StringRecord)>,
}

impl CsvTable {
    pub fn read(path: &Path, required: &[&str]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        for col in required {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("missing mandatory column '{col}'"),
                });
            }
        }
        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            records.push((line, rec));
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            records,
        })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.records.iter().map(move |(line, rec)| Row {
            table: self,
            line: *line,
            rec,
        })
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

pub struct Row<'a> {
    table: &'a CsvTable,
    pub line: u64,
    rec: &'a StringRecord,
}

impl Row<'_> {
    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.table.path.clone(),
            line: self.line,
            message: message.into(),
        }
    }

    pub fn raw(&self, col: &str) -> Option<&str> {
        self.table.index_of(col).and_then(|i| self.rec.get(i))
    }

    pub fn str(&self, col: &str) -> Result<&str> {
        self.raw(col)
            .ok_or_else(|| self.error(format!("missing column '{col}'")))
    }

    pub fn parse<T: std::str::FromStr>(&self, col: &str) -> Result<T> {
        let s = self.str(col)?;
        s.parse::<T>()
            .map_err(|_| self.error(format!("cannot parse '{s}' in column '{col}'")))
    }

    /// Empty cells and absent columns read as `None`.
    pub fn parse_opt<T: std::str::FromStr>(&self, col: &str) -> Result<Option<T>> {
        match self.raw(col) {
            None | Some("") => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| self.error(format!("cannot parse '{s}' in column '{col}'"))),
        }
    }

    pub fn flag(&self, col: &str) -> Result<bool> {
        match self.str(col)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.error(format!("flag column '{col}' must be 0 or 1, got '{other}'"))),
        }
    }

    pub fn finite(&self, col: &str) -> Result<f64> {
        let v: f64 = self.parse(col)?;
        if !v.is_finite() {
            return Err(self.error(format!("non-finite value in column '{col}'")));
        }
        Ok(v)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}
