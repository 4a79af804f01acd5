//! Report rows, pass/fail logic, and deterministic CSV / JSON emission.
//!
//! Reports are byte-identical functions of (config, master seed): floats
//! are rendered with Rust's shortest round-trip formatting, field order is
//! fixed, and no timestamps or environment data enter the output.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// How a row's `pass` column was decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowMode {
    /// `|estimate - target| <= tolerance`.
    TwoSided,
    /// `estimate >= target`.
    Min,
    /// `estimate <= target`.
    Max,
    /// Pass/fail decided by the driver; estimate is context.
    Bool,
    /// Informational; never asserted.
    Info,
}

/// One report line: an estimate, its uncertainty, and an optional target.
#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub row: String,
    pub parameters: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub target: Option<f64>,
    pub tolerance: Option<f64>,
    pub mode: RowMode,
    /// Where the target comes from: "closed form", "exact identity",
    /// "calibrated baseline", or "report only".
    pub provenance: &'static str,
    pub pass: Option<bool>,
}

impl ReportRow {
    /// Asserted two-sided row: pass when the estimate is within
    /// `tolerance` of `target`.
    pub fn two_sided(
        row: impl Into<String>,
        parameters: impl Into<String>,
        estimate: f64,
        se: Option<f64>,
        target: f64,
        tolerance: f64,
        provenance: &'static str,
    ) -> Self {
        let pass = (estimate - target).abs() <= tolerance;
        ReportRow {
            row: row.into(),
            parameters: parameters.into(),
            estimate,
            se,
            target: Some(target),
            tolerance: Some(tolerance),
            mode: RowMode::TwoSided,
            provenance,
            pass: Some(pass),
        }
    }

    /// Asserted one-sided row: pass when `estimate >= floor`.
    pub fn at_least(
        row: impl Into<String>,
        parameters: impl Into<String>,
        estimate: f64,
        se: Option<f64>,
        floor: f64,
        provenance: &'static str,
    ) -> Self {
        ReportRow {
            row: row.into(),
            parameters: parameters.into(),
            estimate,
            se,
            target: Some(floor),
            tolerance: None,
            mode: RowMode::Min,
            provenance,
            pass: Some(estimate >= floor),
        }
    }

    /// Asserted one-sided row: pass when `estimate <= ceiling`.
    pub fn at_most(
        row: impl Into<String>,
        parameters: impl Into<String>,
        estimate: f64,
        se: Option<f64>,
        ceiling: f64,
        provenance: &'static str,
    ) -> Self {
        ReportRow {
            row: row.into(),
            parameters: parameters.into(),
            estimate,
            se,
            target: Some(ceiling),
            tolerance: None,
            mode: RowMode::Max,
            provenance,
            pass: Some(estimate <= ceiling),
        }
    }

    /// Asserted boolean row; `estimate` carries the quantity the decision
    /// was made from.
    pub fn boolean(
        row: impl Into<String>,
        parameters: impl Into<String>,
        estimate: f64,
        ok: bool,
        provenance: &'static str,
    ) -> Self {
        ReportRow {
            row: row.into(),
            parameters: parameters.into(),
            estimate,
            se: None,
            target: None,
            tolerance: None,
            mode: RowMode::Bool,
            provenance,
            pass: Some(ok),
        }
    }

    /// Informational row, never asserted.
    pub fn info(
        row: impl Into<String>,
        parameters: impl Into<String>,
        estimate: f64,
        se: Option<f64>,
    ) -> Self {
        ReportRow {
            row: row.into(),
            parameters: parameters.into(),
            estimate,
            se,
            target: None,
            tolerance: None,
            mode: RowMode::Info,
            provenance: "report only",
            pass: None,
        }
    }
}

/// A full experiment report with its provenance block.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64, config_canonical: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(config_canonical.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        ExperimentReport {
            experiment: experiment.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: hex,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        debug_assert!(
            !row.row.contains(',') && !row.parameters.contains(','),
            "report fields must stay comma-free"
        );
        self.rows.push(row);
    }

    /// True when no asserted row failed.
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass != Some(false))
    }

    pub fn failed_rows(&self) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.pass == Some(false)).collect()
    }

    /// Deterministic CSV: a provenance comment, a header, one line per
    /// row. Optional fields render as empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# blockbp {} experiment={} seed={} config_sha256={}\n",
            self.version, self.experiment, self.seed, self.config_sha256
        ));
        out.push_str("row,parameters,estimate,se,target,tolerance,mode,provenance,pass\n");
        for r in &self.rows {
            let mode = match r.mode {
                RowMode::TwoSided => "two-sided",
                RowMode::Min => "min",
                RowMode::Max => "max",
                RowMode::Bool => "bool",
                RowMode::Info => "info",
            };
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let pass = match r.pass {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.row,
                r.parameters,
                r.estimate,
                opt(r.se),
                opt(r.target),
                opt(r.tolerance),
                mode,
                r.provenance,
                pass
            ));
        }
        out
    }

    /// JSON mirror of the CSV with the same provenance block.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_creating_parents(path, &self.to_csv())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_creating_parents(path, &self.to_json())
    }
}

fn write_creating_parents(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_logic_per_mode() {
        let r = ReportRow::two_sided("a", "", 1.05, Some(0.02), 1.0, 0.08, "closed form");
        assert_eq!(r.pass, Some(true));
        let r = ReportRow::two_sided("a", "", 1.2, Some(0.02), 1.0, 0.08, "closed form");
        assert_eq!(r.pass, Some(false));
        assert_eq!(ReportRow::at_least("b", "", 0.7, None, 0.6, "calibrated baseline").pass, Some(true));
        assert_eq!(ReportRow::at_least("b", "", 0.5, None, 0.6, "calibrated baseline").pass, Some(false));
        assert_eq!(ReportRow::at_most("c", "", 0.1, None, 0.2, "closed form").pass, Some(true));
        assert_eq!(ReportRow::info("d", "", 3.0, None).pass, None);
    }

    #[test]
    fn csv_renders_optionals_and_infinity() {
        let mut rep = ExperimentReport::new("check-model", 7, "{}");
        rep.push(ReportRow::boolean("cond", "q=2", f64::INFINITY, false, "report only"));
        rep.push(ReportRow::info("quant", "k=1", 2.5, Some(0.125)));
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("# blockbp "));
        assert!(lines[0].contains("seed=7"));
        assert_eq!(
            lines[1],
            "row,parameters,estimate,se,target,tolerance,mode,provenance,pass"
        );
        assert_eq!(lines[2], "cond,q=2,inf,,,,bool,report only,fail");
        assert_eq!(lines[3], "quant,k=1,2.5,0.125,,,info,report only,");
    }

    #[test]
    fn all_pass_ignores_info_rows() {
        let mut rep = ExperimentReport::new("x", 0, "{}");
        rep.push(ReportRow::info("i", "", 0.0, None));
        assert!(rep.all_pass());
        rep.push(ReportRow::boolean("b", "", 0.0, false, "report only"));
        assert!(!rep.all_pass());
        assert_eq!(rep.failed_rows().len(), 1);
    }

    #[test]
    fn reports_are_reproducible() {
        let build = || {
            let mut rep = ExperimentReport::new("tree-moments", 11, r#"{"seed":11}"#);
            rep.push(ReportRow::two_sided("m", "k=2", 9.03, Some(0.05), 9.0, 0.2, "closed form"));
            rep
        };
        assert_eq!(build().to_csv(), build().to_csv());
        assert_eq!(build().to_json(), build().to_json());
        let rep = build();
        assert_eq!(rep.config_sha256.len(), 64);
        assert!(rep.to_json().contains("config_sha256"));
    }
}
