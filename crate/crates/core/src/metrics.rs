//! Angular error statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NormalField, Vec3};

/// Unoriented angle in degrees, in `[0, 90]`.
pub fn angular_error(pred: &Vec3, gt: &Vec3) -> f64 {
    pred.dot(gt).abs().clamp(0.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_deg: f64,
    pub rmse_deg: f64,
    /// Fraction of points with error strictly below each threshold. Keys are
    /// the thresholds formatted as given.
    pub pgp: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_point_errors_deg: Option<Vec<f64>>,
}

/// Statistics of precomputed per-point errors (degrees).
pub fn summarize(errors: &[f64], alphas: &[f64]) -> EvalReport {
    let n = errors.len().max(1) as f64;
    let mean_deg = errors.iter().sum::<f64>() / n;
    let rmse_deg = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let pgp = alphas
        .iter()
        .map(|&a| {
            let good = errors.iter().filter(|&&e| e < a).count();
            (format!("{a}"), good as f64 / n)
        })
        .collect();
    EvalReport { mean_deg, rmse_deg, pgp, per_point_errors_deg: None }
}

pub fn evaluate(pred: &NormalField, gt: &NormalField, alphas: &[f64]) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gt.len() });
    }
    let errors: Vec<f64> = pred.iter().zip(gt.iter()).map(|(p, g)| angular_error(p, g)).collect();
    let mut report = summarize(&errors, alphas);
    report.per_point_errors_deg = Some(errors);
    Ok(report)
}
