//! Least-squares exponent fits for resistance scans.

use std::io::BufRead;
use std::str::FromStr;

use serde::Serialize;

use super::{HarnessError, Result, ScanRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// `R(n) = a n^beta`; the estimate is `beta`.
    Power,
    /// `R(n) = a n (log n)^-xi`; the estimate is `xi`.
    LogCorrection,
}

impl FromStr for FitModel {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(FitModel::Power),
            "log" | "log-correction" => Ok(FitModel::LogCorrection),
            other => Err(HarnessError::Fit(format!("unknown model '{other}' (power | log-correction)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub model: FitModel,
    pub estimate: f64,
    pub std_error: f64,
    pub prefactor: f64,
    pub rows: usize,
    pub weighted: bool,
    /// Weighted residual sum of squares on the log scale.
    pub rss: f64,
}

const MIN_ROWS: usize = 4;

/// Fits `model` by (weighted) least squares on the log scale. Rows are
/// weighted by `(R / se)^2` when every standard error is positive; the
/// standard error of the estimate is scaled by the residual variance.
pub fn fit_exponent(rows: &[ScanRow], model: FitModel) -> Result<FitReport> {
    if rows.len() < MIN_ROWS {
        return Err(HarnessError::Fit(format!("need at least {MIN_ROWS} rows, got {}", rows.len())));
    }
    let mut xs = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for row in rows {
        let n = row.n as f64;
        if !(row.mean_r > 0.0) || n < 2.0 {
            return Err(HarnessError::Fit(format!("row n = {} has no positive log-scale value", row.n)));
        }
        match model {
            FitModel::Power => {
                xs.push(n.ln());
                ys.push(row.mean_r.ln());
            }
            FitModel::LogCorrection => {
                if n.ln() <= 1.0 {
                    return Err(HarnessError::Fit(format!("log-correction fit needs n > e, got {}", row.n)));
                }
                xs.push(n.ln().ln());
                ys.push((row.mean_r / n).ln());
            }
        }
    }
    let weighted = rows.iter().all(|r| r.se_r > 0.0);
    let w: Vec<f64> =
        rows.iter().map(|r| if weighted { (r.mean_r / r.se_r).powi(2) } else { 1.0 }).collect();
    let sw: f64 = w.iter().sum();
    let xbar = w.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ybar = w.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&xs).map(|(w, x)| w * (x - xbar).powi(2)).sum();
    let spread = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - xs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if spread <= 1e-12 || sxx <= 0.0 {
        return Err(HarnessError::Fit("degenerate design: all n coincide".into()));
    }
    let sxy: f64 = w.iter().zip(xs.iter().zip(&ys)).map(|(w, (x, y))| w * (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = w.iter().zip(xs.iter().zip(&ys)).map(|(w, (x, y))| w * (y - intercept - slope * x).powi(2)).sum();
    let std_error = (rss / (rows.len() - 2) as f64 / sxx).sqrt();
    let estimate = match model {
        FitModel::Power => slope,
        FitModel::LogCorrection => -slope,
    };
    Ok(FitReport { model, estimate, std_error, prefactor: intercept.exp(), rows: rows.len(), weighted, rss })
}

/// Reads the rows of a `scan-r` CSV, skipping `#` metadata lines.
pub fn read_scan_csv<R: BufRead>(input: R) -> Result<Vec<ScanRow>> {
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let Some(cols) = &header else {
            header = Some(fields.iter().map(|s| s.to_string()).collect());
            continue;
        };
        let parse_err = |msg: String| HarnessError::Parse { line: i + 1, msg };
        if fields.len() != cols.len() {
            return Err(parse_err(format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let get = |name: &str| -> Result<f64> {
            let idx = cols.iter().position(|c| c == name).ok_or_else(|| parse_err(format!("missing column {name}")))?;
            fields[idx].parse::<f64>().map_err(|e| parse_err(format!("column {name}: {e}")))
        };
        let get_or = |name: &str, default: f64| if cols.iter().any(|c| c == name) { get(name) } else { Ok(default) };
        rows.push(ScanRow {
            n: get("n")? as usize,
            mean_r: get("mean_R")?,
            se_r: get_or("se_R", 0.0)?,
            mean_nw: get_or("mean_NW", 0.0)?,
            replicates: get_or("replicates", 0.0)? as usize,
            failures: get_or("failures", 0.0)? as usize,
            wall_time: 0.0,
        });
    }
    Ok(rows)
}
