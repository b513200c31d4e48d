//! CSV experiment logs.
//!
//! Layout: one comment line `#config=<json>` holding the full run
//! configuration, a header row, then one row per logged tick. Numbers use
//! Rust's shortest round-trip formatting, so identical runs produce
//! identical bytes. See `docs/log_schema.md` for the column list.

use std::path::Path;
use thiserror::Error;

pub const CONFIG_PREFIX: &str = "#config=";
/// Name of the free-text column carrying contact and task events.
pub const EVENTS_COLUMN: &str = "events";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log does not start with a {CONFIG_PREFIX} line")]
    MissingConfig,
    #[error("column {0} missing from log")]
    MissingColumn(String),
    #[error("row {row}, column {column}: {value:?} is not a number")]
    BadNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-oriented writer accumulating the CSV body in memory.
#[derive(Debug)]
pub struct LogWriter {
    header: Vec<String>,
    body: csv::Writer<Vec<u8>>,
    rows: usize,
}

impl Default for LogWriter {
    fn default() -> Self {
        LogWriter {
            header: Vec::new(),
            body: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new()),
            rows: 0,
        }
    }
}

/// Builder for one row; the first row also fixes the header.
#[derive(Debug, Default)]
pub struct Row {
    names: Vec<String>,
    cells: Vec<String>,
}

impl Row {
    pub fn num(&mut self, name: impl Into<String>, v: f64) -> &mut Self {
        self.names.push(name.into());
        self.cells.push(format!("{v}"));
        self
    }

    pub fn flag(&mut self, name: impl Into<String>, v: bool) -> &mut Self {
        self.names.push(name.into());
        self.cells.push(if v { "1" } else { "0" }.to_string());
        self
    }

    pub fn nums<'a>(&mut self, prefix: &str, vs: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for (i, v) in vs.into_iter().enumerate() {
            self.num(format!("{prefix}_{i}"), *v);
        }
        self
    }

    pub fn text(&mut self, name: impl Into<String>, v: &str) -> &mut Self {
        self.names.push(name.into());
        self.cells.push(v.to_string());
        self
    }
}

impl LogWriter {
    pub fn push(&mut self, row: Row) -> Result<(), LogError> {
        if self.rows == 0 {
            self.header = row.names;
        } else {
            debug_assert_eq!(self.header.len(), row.cells.len());
        }
        self.body.write_record(&row.cells)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Completes the log with its configuration line and header.
    pub fn finish(self, config_json: &str) -> Result<ExperimentLog, LogError> {
        let body = self.body.into_inner().map_err(|e| e.into_error())?;
        Ok(ExperimentLog {
            config_json: config_json.to_string(),
            header: self.header,
            body,
        })
    }
}

/// A finished log held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLog {
    pub config_json: String,
    pub header: Vec<String>,
    body: Vec<u8>,
}

impl ExperimentLog {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.body.len() + self.config_json.len() + 1024);
        out.extend_from_slice(CONFIG_PREFIX.as_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.push(b'\n');
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("writing to memory");
        out.extend_from_slice(&w.into_inner().expect("writing to memory"));
        out.extend_from_slice(&self.body);
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<(), LogError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn table(&self) -> Result<LogTable, LogError> {
        LogTable::parse(&self.to_bytes())
    }
}

/// Column-major view of a parsed log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTable {
    pub config_json: String,
    pub names: Vec<String>,
    columns: Vec<Vec<f64>>,
    /// `(row time, event text)` for every non-empty events cell.
    pub events: Vec<(f64, String)>,
}

/// Extracts the configuration JSON from the first line of a log.
pub fn config_line(bytes: &[u8]) -> Result<&str, LogError> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .unwrap_or(bytes.len());
    let first = std::str::from_utf8(&bytes[..end]).map_err(|_| LogError::MissingConfig)?;
    first
        .strip_prefix(CONFIG_PREFIX)
        .ok_or(LogError::MissingConfig)
}

impl LogTable {
    pub fn parse(bytes: &[u8]) -> Result<Self, LogError> {
        let config_json = config_line(bytes)?.to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(bytes);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let event_col = names.iter().position(|n| n == EVENTS_COLUMN);
        let time_col = names.iter().position(|n| n == "t");
        let mut columns = vec![Vec::new(); names.len()];
        let mut events = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (c, cell) in rec.iter().enumerate() {
                if Some(c) == event_col {
                    continue;
                }
                let v = cell.parse::<f64>().map_err(|_| LogError::BadNumber {
                    row: r,
                    column: names[c].clone(),
                    value: cell.to_string(),
                })?;
                columns[c].push(v);
            }
            if let Some(c) = event_col {
                let text = rec.get(c).unwrap_or("");
                if !text.is_empty() {
                    let t = time_col.map(|tc| columns[tc][r]).unwrap_or(f64::NAN);
                    events.push((t, text.to_string()));
                }
            }
        }
        Ok(LogTable {
            config_json,
            names,
            columns,
            events,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, LogError> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64], LogError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| LogError::MissingColumn(name.to_string()))
    }

    /// Columns `prefix_0`, `prefix_1`, ... that exist in the log.
    pub fn indexed(&self, prefix: &str) -> Vec<&[f64]> {
        (0..)
            .map_while(|i| self.column(&format!("{prefix}_{i}")).ok())
            .collect()
    }
}
