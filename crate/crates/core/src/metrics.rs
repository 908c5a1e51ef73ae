//! Forecast scoring.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DefmError, Result};

fn check_lengths(op: &'static str, a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return shape_err(op, format!("lengths {} vs {}", a.len(), b.len()));
    }
    if a.len() < min {
        return shape_err(op, format!("need at least {min} points, got {}", a.len()));
    }
    Ok(())
}

fn has_spread(xs: &[f64], mean: f64) -> bool {
    let scale = xs.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    sd > 1e-12 * scale
}

/// Sample Pearson correlation; `None` when either side has no spread.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    check_lengths("pcc", a, b, 2)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    if !has_spread(a, ma) || !has_spread(b, mb) {
        return Ok(None);
    }
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths("rmse", a, b, 1)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub pcc: Option<f64>,
    pub rmse: f64,
    pub length: usize,
}

impl ScorePair {
    pub fn score(forecast: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            pcc: pcc(forecast, truth)?,
            rmse: rmse(forecast, truth)?,
            length: forecast.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    /// Mean over defined PCCs; `None` if none were defined.
    pub mean_pcc: Option<f64>,
    pub mean_rmse: f64,
    pub count: usize,
    pub undefined_pcc: usize,
}

pub fn aggregate_scores(pairs: &[ScorePair]) -> Result<ScoreSummary> {
    if pairs.is_empty() {
        return Err(DefmError::Empty("score list"));
    }
    let defined: Vec<f64> = pairs.iter().filter_map(|p| p.pcc).collect();
    let mean_pcc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ScoreSummary {
        mean_pcc,
        mean_rmse: pairs.iter().map(|p| p.rmse).sum::<f64>() / pairs.len() as f64,
        count: pairs.len(),
        undefined_pcc: pairs.len() - defined.len(),
    })
}
