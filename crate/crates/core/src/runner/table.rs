use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    /// Normal class or split id.
    pub split: String,
    /// `MKD` or `MKD+DEFEND`.
    pub method: String,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub config_hash: String,
}

impl ResultTable {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            rows: Vec::new(),
            config_hash: config_hash.into(),
        }
    }

    pub fn push(&mut self, setting: impl Into<String>, split: impl Into<String>, method: impl Into<String>, auroc: f64) {
        self.rows.push(ResultRow {
            setting: setting.into(),
            split: split.into(),
            method: method.into(),
            auroc,
        });
    }

    /// Arithmetic mean AUROC per method, in first-appearance order.
    pub fn means(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            if !acc.contains_key(r.method.as_str()) {
                order.push(r.method.clone());
            }
            let e = acc.entry(r.method.as_str()).or_insert((0.0, 0));
            e.0 += r.auroc;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|m| {
                let (s, n) = acc[m.as_str()];
                (m, s / n as f64)
            })
            .collect()
    }

    pub fn mean_of(&self, method: &str) -> Option<f64> {
        self.means().into_iter().find(|(m, _)| m == method).map(|(_, v)| v)
    }

    /// Rows followed by one `AVG` row per method.
    pub fn rows_with_mean(&self) -> Vec<ResultRow> {
        let setting = self.rows.first().map(|r| r.setting.clone()).unwrap_or_default();
        let mut out = self.rows.clone();
        for (method, mean) in self.means() {
            out.push(ResultRow {
                setting: setting.clone(),
                split: "AVG".into(),
                method,
                auroc: mean,
            });
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["setting", "split", "method", "auroc", "config_hash"])?;
        for r in self.rows_with_mean() {
            w.write_record([
                r.setting.as_str(),
                r.split.as_str(),
                r.method.as_str(),
                &format!("{:.6}", r.auroc),
                self.config_hash.as_str(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-class results of one setting, AUROC in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassReport {
    pub setting: String,
    pub table: ResultTable,
}

impl PerClassReport {
    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "method", "auroc_percent"])?;
        for r in self.table.rows_with_mean() {
            w.write_record([r.split.as_str(), r.method.as_str(), &format!("{:.2}", 100.0 * r.auroc)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn text(&self) -> String {
        let rows = self.table.rows_with_mean();
        let w = rows.iter().map(|r| r.split.len()).max().unwrap_or(5).max(5);
        let mut s = format!("setting: {}\n", self.setting);
        let _ = writeln!(s, "{:<w$}  {:<12}  {:>7}", "class", "method", "AUROC");
        for r in rows {
            let _ = writeln!(s, "{:<w$}  {:<12}  {:>7.2}", r.split, r.method, 100.0 * r.auroc);
        }
        s
    }

    /// Number of emitted data lines (classes plus average rows).
    pub fn row_count(&self) -> usize {
        self.table.rows_with_mean().len()
    }
}

/// Merges tables of one setting into a per-class document.
pub fn report_per_class(tables: &[ResultTable]) -> Result<PerClassReport> {
    let first = tables
        .iter()
        .flat_map(|t| t.rows.first())
        .next()
        .ok_or_else(|| Error::Aggregation("no result rows to report".into()))?;
    let setting = first.setting.clone();
    let mut merged = ResultTable::new(tables[0].config_hash.clone());
    for t in tables {
        for r in &t.rows {
            if r.setting != setting {
                return Err(Error::Aggregation(format!(
                    "tables mix settings `{setting}` and `{}`",
                    r.setting
                )));
            }
            merged.rows.push(r.clone());
        }
    }
    Ok(PerClassReport {
        setting,
        table: merged,
    })
}
