//! CSV emission and one-line summaries.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use evsel_core::{DiagnosticsReport, Error, Result};

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        file: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// One CSV row per item; nested objects are skipped, columns follow the
/// first row's keys.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let values: Vec<Value> = rows.iter().map(serde_json::to_value).collect::<serde_json::Result<_>>()?;
    write_values(path, &values, None)
}

fn write_values(path: &Path, values: &[Value], label: Option<(&str, &[String])>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let Some(Value::Object(first)) = values.first() else {
        return w.flush().map_err(|e| Error::io(path, e));
    };
    let keys: Vec<&String> = first
        .iter()
        .filter(|(_, v)| !v.is_object() && !v.is_array())
        .map(|(k, _)| k)
        .collect();
    let mut header: Vec<String> = label.iter().map(|(name, _)| name.to_string()).collect();
    header.extend(keys.iter().map(|k| k.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, v) in values.iter().enumerate() {
        let mut rec: Vec<String> = label.iter().map(|(_, names)| names[i].clone()).collect();
        rec.extend(keys.iter().map(|k| v.get(k.as_str()).map(cell).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Budget-matched S/N/R table, plus the unmatched recovered evidence row.
pub fn write_snr_csv(path: &Path, report: &DiagnosticsReport) -> Result<()> {
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (rule, snr) in &report.budget_matched {
        names.push(rule.clone());
        values.push(serde_json::to_value(snr)?);
    }
    if let Some(rec) = &report.recovered {
        names.push("gce_recovered".to_string());
        values.push(serde_json::to_value(&rec.snr)?);
    }
    write_values(path, &values, Some(("rule", &names)))
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "unavailable".to_string(), |x| format!("{x:.4}"))
}

pub fn summary_line(report: &DiagnosticsReport) -> String {
    let rec = report.recovered.as_ref();
    format!(
        "bags {} macro_f1 {:.4} evidence_fraction {} cd_gap {} complement_degradation {}",
        report.num_bags,
        report.macro_f1,
        opt(rec.map(|r| r.snr.evidence_fraction)),
        opt(rec.and_then(|r| r.snr.cd_gap_mean)),
        opt(rec.and_then(|r| r.snr.complement_degradation)),
    )
}
