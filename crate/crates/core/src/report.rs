//! Report rows, CSV emission and the plain-text summary.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One checked statistic. `pass` is `value <= bound`, false for NaN.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub suite: String,
    pub check: String,
    pub statistic: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub wall_time: Option<f64>,
}

impl ReportRow {
    pub fn new(suite: &str, check: &str, statistic: &str, value: f64, bound: f64, seed: u64) -> Self {
        ReportRow {
            suite: suite.into(),
            check: check.into(),
            statistic: statistic.into(),
            value,
            bound,
            pass: value <= bound,
            sample_size: None,
            seed,
            wall_time: None,
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.sample_size = Some(n);
        self
    }

    /// Failed row standing in for a check that raised an error.
    pub fn failure(suite: &str, check: &str, err: &Error, seed: u64) -> Self {
        ReportRow {
            suite: suite.into(),
            check: check.into(),
            statistic: format!("error: {err}"),
            value: f64::NAN,
            bound: f64::NAN,
            pass: false,
            sample_size: None,
            seed,
            wall_time: None,
        }
    }
}

pub const CSV_HEADER: [&str; 9] = ["suite", "check", "statistic", "value", "bound", "pass", "sample_size", "seed", "wall_time"];

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.suite.clone(),
            r.check.clone(),
            r.statistic.clone(),
            format!("{:e}", r.value),
            format!("{:e}", r.bound),
            r.pass.to_string(),
            r.sample_size.map(|n| n.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.wall_time.map(|t| format!("{t:.3}")).unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(csv_error)
}

pub fn summary(model: &str, rows: &[ReportRow]) -> String {
    let failed = rows.iter().filter(|r| !r.pass).count();
    let mut s = String::new();
    let _ = writeln!(s, "model: {model}");
    let _ = writeln!(s, "rows: {}, passed: {}, failed: {failed}", rows.len(), rows.len() - failed);
    let mut suite = "";
    for r in rows {
        if r.suite != suite {
            suite = &r.suite;
            let _ = writeln!(s, "\n[{suite}]");
        }
        let _ = writeln!(
            s,
            "  {} {}/{}: {:.4e} (bound {:.4e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.check,
            r.statistic,
            r.value,
            r.bound
        );
    }
    s
}

/// Writes `report.csv` and `summary.txt` into `dir`, creating it if needed.
pub fn write_reports(dir: &Path, model: &str, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(csv_error)?;
    let file = std::fs::File::create(dir.join("report.csv")).map_err(csv_error)?;
    write_csv(rows, std::io::BufWriter::new(file))?;
    std::fs::write(dir.join("summary.txt"), summary(model, rows)).map_err(csv_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_flag_follows_bound() {
        assert!(ReportRow::new("s", "c", "x", 1.0, 1.0, 0).pass);
        assert!(!ReportRow::new("s", "c", "x", 1.1, 1.0, 0).pass);
        assert!(!ReportRow::new("s", "c", "x", f64::NAN, 1.0, 0).pass);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let rows = vec![
            ReportRow::new("kernel", "normalization", "max |mass - 1|", 1e-12, 1e-8, 7).with_samples(20),
            ReportRow::failure("flows", "pullback", &Error::Usage("boom".into()), 7),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "suite,check,statistic,value,bound,pass,sample_size,seed,wall_time");
        assert_eq!(lines[1], "kernel,normalization,max |mass - 1|,1e-12,1e-8,true,20,7,");
        assert!(lines[2].starts_with("flows,pullback,error: usage error: boom,NaN,NaN,false,,7,"));
        let s = summary("kolmogorov", &rows);
        assert!(s.contains("failed: 1") && s.contains("[flows]"));
    }
}
