//! Tables, run directories and their digests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// A CSV table. Cells are preformatted so that files are byte-stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Shortest round-trip float formatting; infinities as `inf`.
pub fn num(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Everything an experiment hands back for persistence.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<Check>,
    pub report: String,
}

impl Outcome {
    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics
            .insert(name.into(), serde_json::to_value(value).expect("metric serializes"));
    }

    pub fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.report, "{}", text.as_ref());
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: String,
    pub seed: u64,
    pub status: String,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<Check>,
    /// SHA-256 of every CSV written, keyed by file name.
    pub digests: BTreeMap<String, String>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.txt";
pub const FAILED_FILE: &str = "FAILED";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A run's output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let failed = path.join(FAILED_FILE);
        if failed.exists() {
            std::fs::remove_file(&failed).map_err(|e| CliError::Runtime(format!("{}: {e}", failed.display())))?;
        }
        Ok(Self { path: path.to_owned() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let target = self.path.join(name);
        std::fs::write(&target, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", target.display())))
    }

    /// Writes the tables, summary and report; returns the summary.
    pub fn persist(&self, kind: &str, seed: u64, outcome: &Outcome) -> Result<Summary, CliError> {
        let mut digests = BTreeMap::new();
        for table in &outcome.tables {
            let csv = table.to_csv();
            self.write(&table.file_name(), csv.as_bytes())?;
            digests.insert(table.file_name(), sha256_hex(csv.as_bytes()));
        }
        let summary = Summary {
            kind: kind.into(),
            seed,
            status: if outcome.all_passed() { "ok" } else { "checks_failed" }.into(),
            metrics: outcome.metrics.clone(),
            checks: outcome.checks.clone(),
            digests,
        };
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        self.write(SUMMARY_FILE, json.as_bytes())?;
        let mut report = outcome.report.clone();
        for c in &outcome.checks {
            let _ = writeln!(
                report,
                "[{}] {}: {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        self.write(REPORT_FILE, report.as_bytes())?;
        Ok(summary)
    }

    /// Leaves a marker explaining why the run stopped.
    pub fn mark_failed(&self, reason: &str) {
        let _ = std::fs::write(self.path.join(FAILED_FILE), format!("{reason}\n"));
    }
}
