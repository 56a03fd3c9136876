//! Goodness-of-fit scores.

use serde::{Deserialize, Serialize};

use super::ForestError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScore {
    /// `None` when the actual values have zero variance.
    pub r2: Option<f64>,
    pub mae: f64,
}

fn check(predictions: &[f64], actuals: &[f64]) -> Result<(), ForestError> {
    if predictions.len() != actuals.len() || actuals.len() < 2 {
        return Err(ForestError::LengthMismatch {
            predictions: predictions.len(),
            actuals: actuals.len(),
        });
    }
    Ok(())
}

pub fn mae(predictions: &[f64], actuals: &[f64]) -> Result<f64, ForestError> {
    check(predictions, actuals)?;
    Ok(predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).abs())
        .sum::<f64>()
        / actuals.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(predictions: &[f64], actuals: &[f64]) -> Result<f64, ForestError> {
    check(predictions, actuals)?;
    let mean = actuals.iter().sum::<f64>() / actuals.len() as f64;
    let ss_tot: f64 = actuals.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(ForestError::DegenerateVariance);
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (a - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn score(predictions: &[f64], actuals: &[f64]) -> Result<OutputScore, ForestError> {
    let mae = mae(predictions, actuals)?;
    let r2 = match r2(predictions, actuals) {
        Ok(v) => Some(v),
        Err(ForestError::DegenerateVariance) => None,
        Err(e) => return Err(e),
    };
    Ok(OutputScore { r2, mae })
}

/// Scores each output column of row-major prediction and target rows.
pub fn score_outputs(
    predictions: &[Vec<f64>],
    actuals: &[Vec<f64>],
) -> Result<Vec<OutputScore>, ForestError> {
    let no = actuals.first().map_or(0, Vec::len);
    (0..no)
        .map(|o| {
            let p: Vec<f64> = predictions.iter().map(|r| r[o]).collect();
            let a: Vec<f64> = actuals.iter().map(|r| r[o]).collect();
            score(&p, &a)
        })
        .collect()
}
