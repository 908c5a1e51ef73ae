//! Univariate comparison forecasters and the attention-free DEFM variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::SeriesMatrix;
use crate::error::{DefmError, Result};
use crate::forecasting::{predict, ForecastResult};
use crate::model::ModelConfig;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Defm,
    DefmNoTemporal,
    Ma,
    Hes,
    Ar,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Defm, Method::DefmNoTemporal, Method::Ma, Method::Hes, Method::Ar];

    pub fn name(self) -> &'static str {
        match self {
            Method::Defm => "DEFM",
            Method::DefmNoTemporal => "DEFM_NO_TEMPORAL",
            Method::Ma => "MA",
            Method::Hes => "HES",
            Method::Ar => "AR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub ma_window: usize,
    pub hes_alpha: f64,
    pub hes_beta: f64,
    /// Pick `alpha`/`beta` from `{0.1, ..., 0.9}` by in-sample one-step error.
    pub hes_grid_search: bool,
    pub ar_order: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ma_window: 5,
            hes_alpha: 0.5,
            hes_beta: 0.3,
            hes_grid_search: false,
            ar_order: 5,
        }
    }
}

/// Iterated moving average over the last `window` values.
pub fn forecast_ma(series: &[f64], window: usize, horizon: usize) -> Result<Vec<f64>> {
    if window < 1 || window > series.len() {
        return Err(DefmError::Config(format!("MA window {window} outside 1..={}", series.len())));
    }
    let mut buf = series.to_vec();
    for _ in 0..horizon {
        let tail = &buf[buf.len() - window..];
        let next = tail.iter().sum::<f64>() / window as f64;
        buf.push(next);
    }
    Ok(buf.split_off(series.len()))
}

fn holt_state(series: &[f64], alpha: f64, beta: f64) -> (f64, f64, f64) {
    let mut level = series[0];
    let mut trend = series[1] - series[0];
    let mut sse = 0.0;
    for &y in &series[1..] {
        let predicted = level + trend;
        sse += (y - predicted).powi(2);
        let prev = level;
        level = alpha * y + (1.0 - alpha) * (level + trend);
        trend = beta * (level - prev) + (1.0 - beta) * trend;
    }
    (level, trend, sse)
}

/// Holt's linear-trend exponential smoothing.
pub fn forecast_hes(series: &[f64], alpha: f64, beta: f64, horizon: usize) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(DefmError::TooShort("HES needs at least two points".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0 && beta > 0.0 && beta <= 1.0) {
        return Err(DefmError::Config(format!("HES parameters ({alpha}, {beta}) outside (0, 1]")));
    }
    let (level, trend, _) = holt_state(series, alpha, beta);
    Ok((1..=horizon).map(|tau| level + tau as f64 * trend).collect())
}

/// Grid-searched `(alpha, beta)` minimizing in-sample one-step error.
pub fn fit_hes(series: &[f64]) -> Result<(f64, f64)> {
    if series.len() < 2 {
        return Err(DefmError::TooShort("HES needs at least two points".into()));
    }
    let grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let mut best = (0.5, 0.3, f64::INFINITY);
    for &a in &grid {
        for &b in &grid {
            let (_, _, sse) = holt_state(series, a, b);
            if sse < best.2 {
                best = (a, b, sse);
            }
        }
    }
    Ok((best.0, best.1))
}

/// Least-squares AR(p) fit on the mean-centered series.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub mean: f64,
    pub intercept: f64,
    /// `coefficients[i]` multiplies lag `i + 1`.
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
}

pub fn fit_ar(series: &[f64], order: usize) -> Result<ArFit> {
    let m = series.len();
    if order < 1 || m <= order + 1 {
        return Err(DefmError::Config(format!("AR order {order} needs more than {} points", order + 1)));
    }
    let mean = series.iter().sum::<f64>() / m as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let scale = series.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let rows = m - order;
    if centered.iter().all(|v| v.abs() <= 1e-12 * scale) {
        return Ok(ArFit {
            mean,
            intercept: 0.0,
            coefficients: vec![0.0; order],
            residuals: vec![0.0; rows],
        });
    }
    let design = DMatrix::from_fn(rows, order + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            centered[order + r - c]
        }
    });
    let rhs = DVector::from_fn(rows, |r, _| centered[order + r]);
    let svd = design.clone().svd(true, true);
    let (smax, smin) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    if rows < order + 1 || smin <= 1e-10 * smax {
        return Err(DefmError::SingularDesign { order });
    }
    let beta = svd
        .solve(&rhs, 0.0)
        .map_err(|_| DefmError::SingularDesign { order })?;
    let residuals = (&rhs - &design * &beta).iter().copied().collect();
    Ok(ArFit {
        mean,
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        residuals,
    })
}

impl ArFit {
    /// Iterated forecasts continuing `series`.
    pub fn forecast(&self, series: &[f64], horizon: usize) -> Vec<f64> {
        let mut buf: Vec<f64> = series.iter().map(|v| v - self.mean).collect();
        for _ in 0..horizon {
            let n = buf.len();
            let next = self.intercept
                + self
                    .coefficients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * buf[n - 1 - i])
                    .sum::<f64>();
            buf.push(next);
        }
        buf.split_off(series.len()).into_iter().map(|v| v + self.mean).collect()
    }
}

pub fn forecast_ar(series: &[f64], order: usize, horizon: usize) -> Result<Vec<f64>> {
    Ok(fit_ar(series, order)?.forecast(series, horizon))
}

/// Trains and runs the DEFM variant with the temporal branch removed.
pub fn forecast_defm_ablation(
    series: &SeriesMatrix,
    target: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<ForecastResult> {
    let cfg = ModelConfig {
        temporal: false,
        ..model_cfg.clone()
    };
    let (model, _) = train(series, target, &cfg, train_cfg)?;
    predict(series, &model)
}

/// Univariate forecast of `series`' target row with a classical method.
pub fn forecast_univariate(method: Method, series: &[f64], cfg: &BaselineConfig, horizon: usize) -> Result<Vec<f64>> {
    match method {
        Method::Ma => forecast_ma(series, cfg.ma_window, horizon),
        Method::Hes => {
            let (a, b) = if cfg.hes_grid_search {
                fit_hes(series)?
            } else {
                (cfg.hes_alpha, cfg.hes_beta)
            };
            forecast_hes(series, a, b, horizon)
        }
        Method::Ar => forecast_ar(series, cfg.ar_order, horizon),
        Method::Defm | Method::DefmNoTemporal => {
            Err(DefmError::Config(format!("{} is not a univariate method", method.name())))
        }
    }
}
