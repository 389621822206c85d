//! Report tables rendered as CSV and aligned markdown.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{BinnedCorrelation, MetricReport};

/// Rows of named methods against named numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub const MISCLASS_COLUMNS: [&str; 4] = ["FPR@95%TPR", "AUPR-ERR", "AUPR-SUCC", "AUROC"];
pub const CALIBRATION_COLUMNS: [&str; 4] = ["ECE", "MCE", "NLL", "Brier"];

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: impl Into<String>, values: Vec<Option<f64>>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((method.into(), values));
    }

    pub fn value(&self, method: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(m, _)| m == method)?.1[c]
    }

    pub fn misclassification(rows: &[(String, MetricReport)]) -> Self {
        let mut t = Table::new(&MISCLASS_COLUMNS);
        for (m, r) in rows {
            t.push(m.clone(), vec![r.fpr_at_95tpr, r.aupr_err, r.aupr_succ, r.auroc]);
        }
        t
    }

    pub fn calibration(rows: &[(String, MetricReport)]) -> Self {
        let mut t = Table::new(&CALIBRATION_COLUMNS);
        for (m, r) in rows {
            t.push(m.clone(), vec![r.ece, r.mce, r.nll, r.brier]);
        }
        t
    }

    /// Full-precision values; empty cells for missing entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (m, vals) in &self.rows {
            out.push_str(m);
            for v in vals {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Fixed four-decimal values padded into aligned columns.
    pub fn to_markdown(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(m, vals)| {
                std::iter::once(m.clone())
                    .chain(vals.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.4}"))))
                    .collect()
            })
            .collect();
        let header: Vec<String> = std::iter::once("Method".to_string())
            .chain(self.columns.iter().cloned())
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].chars().count())
                    .chain([header[i].chars().count(), 3])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |row: &[String]| {
            let mut s = String::from("|");
            for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, " {c:<w$} |");
                } else {
                    let _ = write!(s, " {c:>w$} |");
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&header);
        out.push('|');
        for (i, w) in widths.iter().enumerate() {
            let dashes = "-".repeat(*w);
            if i == 0 {
                let _ = write!(out, " {dashes} |");
            } else {
                let _ = write!(out, " {}: |", &dashes[1..]);
            }
        }
        out.push('\n');
        for r in &cells {
            out.push_str(&line(r));
        }
        out
    }
}

/// Per-bin curve of a binned correlation as CSV.
pub fn correlation_csv(c: &BinnedCorrelation) -> String {
    let mut out = String::from("bin,lo,hi,count,mean_confidence,accuracy\n");
    for (i, b) in c.bins.iter().enumerate() {
        let _ = write!(out, "{i},{},{},{}", b.lo, b.hi, b.count);
        if b.count > 0 {
            let _ = writeln!(out, ",{},{}", b.mean_confidence, b.accuracy);
        } else {
            out.push_str(",,\n");
        }
    }
    out
}

/// Lower-case identifier for a method name, used in file and manifest keys.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `<dir>/<name>.csv` and `<dir>/<name>.md`.
pub fn write_table(dir: &Path, name: &str, title: &str, table: &Table) -> Result<()> {
    write_text(&dir.join(format!("{name}.csv")), &table.to_csv())?;
    write_text(
        &dir.join(format!("{name}.md")),
        &format!("# {title}\n\n{}", table.to_markdown()),
    )
}
