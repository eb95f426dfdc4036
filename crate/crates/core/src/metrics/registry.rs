use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use super::MetricReport;
use crate::error::{Error, Result};

/// Published reference numbers, one row per (method, phase).
pub const SHIPPED_REGISTRY_CSV: &str = include_str!("../../data/benchmark_registry.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Before => "before",
            Phase::After => "after",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "before" => Ok(Phase::Before),
            "after" => Ok(Phase::After),
            other => Err(Error::config(format!("phase must be before or after, got {other:?}"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct RegistryRow {
    pub method: String,
    pub phase: Phase,
    pub mae: f64,
    pub f_w_beta: f64,
    pub f_beta: f64,
    pub s_m: f64,
}

impl RegistryRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{:.3}",
            self.method, self.phase, self.mae, self.f_w_beta, self.f_beta, self.s_m
        )
    }
}

/// Method names compare without the dense-CRF dagger and ASCII case.
fn method_key(name: &str) -> String {
    name.trim().trim_end_matches('†').trim().to_ascii_lowercase()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRegistry {
    rows: Vec<RegistryRow>,
}

impl BenchmarkRegistry {
    pub fn shipped() -> Self {
        Self::from_csv_str(SHIPPED_REGISTRY_CSV).expect("shipped registry parses")
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows: Vec<RegistryRow> = Vec::new();
        for record in reader.deserialize() {
            let row: RegistryRow = record.map_err(|e| Error::data(format!("registry: {e}")))?;
            if rows
                .iter()
                .any(|r| method_key(&r.method) == method_key(&row.method) && r.phase == row.phase)
            {
                return Err(Error::data(format!("registry: duplicate row {} / {}", row.method, row.phase)));
            }
            rows.push(row);
        }
        Ok(BenchmarkRegistry { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn rows(&self) -> &[RegistryRow] {
        &self.rows
    }

    pub fn get(&self, method: &str, phase: Phase) -> Result<&RegistryRow> {
        let key = method_key(method);
        self.rows
            .iter()
            .find(|r| method_key(&r.method) == key && r.phase == phase)
            .ok_or_else(|| Error::UnknownKey {
                method: method.to_string(),
                phase: phase.to_string(),
            })
    }
}

/// Signed differences `report - reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricDelta {
    pub reference: RegistryRow,
    pub mae: f64,
    pub f_w_beta: f64,
    pub f_beta: f64,
    pub s_m: f64,
}

impl fmt::Display for MetricDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.reference;
        writeln!(f, "reference {} / {}", r.method, r.phase)?;
        writeln!(f, "metric     reference     delta")?;
        writeln!(f, "MAE        {:>9.3} {:>+9.4}", r.mae, self.mae)?;
        writeln!(f, "F^w_beta   {:>9.3} {:>+9.4}", r.f_w_beta, self.f_w_beta)?;
        writeln!(f, "F_beta     {:>9.3} {:>+9.4}", r.f_beta, self.f_beta)?;
        write!(f, "S_m        {:>9.3} {:>+9.4}", r.s_m, self.s_m)
    }
}

pub fn registry_compare(
    report: &MetricReport,
    registry: &BenchmarkRegistry,
    method: &str,
    phase: Phase,
) -> Result<MetricDelta> {
    let reference = registry.get(method, phase)?.clone();
    Ok(MetricDelta {
        mae: report.mae - reference.mae,
        f_w_beta: report.weighted_f_beta - reference.f_w_beta,
        f_beta: report.f_beta - reference.f_beta,
        s_m: report.s_measure - reference.s_m,
        reference,
    })
}
