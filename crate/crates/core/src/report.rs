//! Check reports. `report.json` depends only on the configuration and seed;
//! wall-clock times go to `timings.json`, tabulated data to CSV files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
    /// The check itself raised an error.
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Measured,
    Fitted,
    Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Value {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub source: Source,
}

/// Numeric table written as `<check>_<name>.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// CSV text: header row, dot decimals, LF line endings.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).map_err(std::io::Error::other)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|x| format!("{x:e}"))).map_err(std::io::Error::other)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii output"))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub criterion: Option<u8>,
    pub status: Status,
    pub values: BTreeMap<String, Value>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

impl CheckReport {
    pub fn new(name: &str, criterion: Option<u8>, seed: u64) -> Self {
        CheckReport {
            name: name.into(),
            criterion,
            status: Status::Pass,
            values: BTreeMap::new(),
            notes: Vec::new(),
            error: None,
            seed,
            tables: Vec::new(),
        }
    }

    pub fn skipped(name: &str, criterion: Option<u8>, seed: u64) -> Self {
        CheckReport {
            status: Status::Skipped,
            ..Self::new(name, criterion, seed)
        }
    }

    fn put(&mut self, key: &str, value: f64, tolerance: Option<f64>, source: Source) {
        self.values.insert(key.into(), Value { value, tolerance, source });
    }

    pub fn config(&mut self, key: &str, value: f64) {
        self.put(key, value, None, Source::Config);
    }

    pub fn measured(&mut self, key: &str, value: f64) {
        self.put(key, value, None, Source::Measured);
    }

    pub fn fitted(&mut self, key: &str, value: f64) {
        self.put(key, value, None, Source::Fitted);
    }

    /// Records `value <= tolerance`; a failure (or NaN) fails the check.
    pub fn at_most(&mut self, key: &str, value: f64, tolerance: f64) -> bool {
        self.put(key, value, Some(tolerance), Source::Measured);
        let ok = value <= tolerance;
        if !ok {
            self.fail(format!("{key} = {value:.3e} exceeds {tolerance:.3e}"));
        }
        ok
    }

    /// Records a condition that has no numeric tolerance.
    pub fn require(&mut self, ok: bool, what: impl Into<String>) -> bool {
        if !ok {
            self.fail(what);
        }
        ok
    }

    pub fn fail(&mut self, why: impl Into<String>) {
        if self.status == Status::Pass {
            self.status = Status::Fail;
        }
        self.notes.push(why.into());
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    pub fn passed(&self) -> bool {
        matches!(self.status, Status::Pass | Status::Skipped)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub config: RunConfig,
    pub checks: Vec<CheckReport>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    /// Seconds per check.
    pub checks: BTreeMap<String, f64>,
    pub total: f64,
}

/// Writes `report.json`, `timings.json` and one CSV per table; returns the paths.
pub fn write_reports(dir: &Path, report: &SuiteReport, timings: &Timings) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    written.push(path);
    let path = dir.join("timings.json");
    fs::write(&path, serde_json::to_string_pretty(timings)? + "\n")?;
    written.push(path);
    for check in &report.checks {
        for table in &check.tables {
            let path = dir.join(format!("{}_{}.csv", check.name, table.name));
            fs::write(&path, table.to_csv()?)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_lf_and_header() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![1.5, -0.25]);
        let s = t.to_csv().unwrap();
        assert_eq!(s, "a,b\n1.5e0,-2.5e-1\n");
    }

    #[test]
    fn failed_bound_marks_check() {
        let mut r = CheckReport::new("c", Some(1), 0);
        assert!(r.at_most("err", 1e-9, 1e-8));
        assert!(r.passed());
        assert!(!r.at_most("err2", f64::NAN, 1e-8));
        assert_eq!(r.status, Status::Fail);
        assert_eq!(r.values["err2"].tolerance, Some(1e-8));
    }
}
