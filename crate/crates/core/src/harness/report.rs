use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::HarnessError;
use crate::metrics::CalibrationReport;

/// Column order of every metrics table.
pub const METRIC_COLUMNS: [&str; 8] = ["ECE", "AECE", "OE", "MCE", "BS", "SEN", "SPE", "BACC"];

pub(crate) fn metric_values(r: &CalibrationReport) -> [f64; 8] {
    let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
    [
        r.ece,
        r.aece,
        r.oe,
        r.mce,
        r.brier,
        o(r.sensitivity),
        o(r.specificity),
        o(r.bacc),
    ]
}

/// Mean and sample standard deviation (`n - 1`); a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: [f64; 8],
    pub std: [f64; 8],
}

pub fn aggregate(reports: &[CalibrationReport]) -> Aggregate {
    let mut mean = [f64::NAN; 8];
    let mut std = [f64::NAN; 8];
    for k in 0..8 {
        let col: Vec<f64> = reports.iter().map(|r| metric_values(r)[k]).collect();
        (mean[k], std[k]) = mean_std(&col);
    }
    Aggregate {
        runs: reports.len(),
        mean,
        std,
    }
}

pub(crate) fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{} ± {}", fmt(mean), fmt(std))
}

/// Writes rows, creating the parent directory if needed.
pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(HarnessError::io(path))?);
    f.write_all(text.as_bytes()).map_err(HarnessError::io(path))?;
    f.flush().map_err(HarnessError::io(path))
}
