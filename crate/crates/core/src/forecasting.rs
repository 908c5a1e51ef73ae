//! One-shot and iterated forecasts from a trained model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embedding::{aggregate_antidiagonal, build_delay_embedding, EmbeddingConfig, SeriesMatrix};
use crate::error::{DefmError, Result};
use crate::metrics::{rmse, ScorePair};
use crate::model::{defm_forward, DefmModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Zero-based time index of each estimate, relative to the window start.
    pub time_indices: Vec<usize>,
    pub estimates: Vec<f64>,
    pub spreads: Vec<f64>,
    /// RMSE of the reconstructed known cells, target units.
    pub fit_rmse: f64,
    pub truth: Option<Vec<f64>>,
    pub score: Option<ScorePair>,
}

impl ForecastResult {
    /// Univariate result without spreads or fit diagnostics.
    pub fn from_point_forecast(m: usize, estimates: Vec<f64>) -> Self {
        Self {
            time_indices: (m..m + estimates.len()).collect(),
            spreads: vec![0.0; estimates.len()],
            estimates,
            fit_rmse: 0.0,
            truth: None,
            score: None,
        }
    }

    /// Attaches ground truth and scores against it.
    pub fn with_truth(mut self, truth: &[f64]) -> Result<Self> {
        self.score = Some(ScorePair::score(&self.estimates, truth)?);
        self.truth = Some(truth.to_vec());
        Ok(self)
    }

    /// CSV with header `time_index,estimate,spread,truth`; the truth
    /// column is left empty when absent. `offset` shifts the time index.
    pub fn to_csv(&self, offset: usize) -> String {
        let mut out = String::from("time_index,estimate,spread,truth\n");
        for k in 0..self.estimates.len() {
            let truth = self.truth.as_ref().map(|t| t[k].to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.time_indices[k] + offset,
                self.estimates[k],
                self.spreads[k],
                truth
            );
        }
        out
    }
}

/// `(S - 1)`-step forecast of the model's target from the window `series`.
pub fn predict(series: &SeriesMatrix, model: &DefmModel) -> Result<ForecastResult> {
    let target = model.target;
    let normalized = model.normalizer.apply(series)?;
    let grid = defm_forward(&normalized, model)?;
    if !grid.is_finite() {
        return Err(DefmError::NonFinite { op: "predict" });
    }
    let s = model.config().s;
    let emb = build_delay_embedding(&normalized, EmbeddingConfig { s, target })?;
    let sd = model.normalizer.stds[target];

    let (idx, obs) = emb.known_cells();
    let fitted: Vec<f64> = idx.iter().map(|&k| grid.data()[k]).collect();
    let fit_rmse = rmse(&fitted, &obs)? * sd;

    let horizon = aggregate_antidiagonal(&grid, &emb)?;
    Ok(ForecastResult {
        time_indices: horizon.iter().map(|h| h.time_index).collect(),
        estimates: horizon.iter().map(|h| model.normalizer.invert(target, h.mean)).collect(),
        spreads: horizon.iter().map(|h| h.spread * sd).collect(),
        fit_rmse,
        truth: None,
        score: None,
    })
}

/// Where non-forecast rows of the sliding window come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemainingSource {
    Observed,
    HoldLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTermPlan {
    pub iterations: usize,
    /// Variables whose forecasts are fed back; must contain the target.
    pub predicted_vars: Vec<usize>,
    pub remaining: RemainingSource,
}

impl LongTermPlan {
    pub fn target_only(target: usize, iterations: usize) -> Self {
        Self {
            iterations,
            predicted_vars: vec![target],
            remaining: RemainingSource::Observed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LongTermResult {
    /// All `r (S - 1)` target forecasts, in time order.
    pub forecasts: Vec<f64>,
    /// Per-iteration results, time indices relative to the first window.
    pub windows: Vec<ForecastResult>,
    /// Observed window followed by every fed-back value, `n × (m + r (S - 1))`.
    pub extended: SeriesMatrix,
}

/// Iterates a single target model; see [`predict_long_term_group`].
pub fn predict_long_term(
    series: &SeriesMatrix,
    model: &DefmModel,
    plan: &LongTermPlan,
    ground_future: Option<&SeriesMatrix>,
) -> Result<LongTermResult> {
    predict_long_term_group(series, std::slice::from_ref(model), plan, ground_future)
}

/// Chains `(S - 1)`-step forecasts, sliding the window by `S - 1` each time.
///
/// `models[k]` forecasts `plan.predicted_vars[k]`; the first predicted
/// variable is the reported target. Models are never updated.
pub fn predict_long_term_group(
    series: &SeriesMatrix,
    models: &[DefmModel],
    plan: &LongTermPlan,
    ground_future: Option<&SeriesMatrix>,
) -> Result<LongTermResult> {
    let Some(lead) = models.first() else {
        return Err(DefmError::Config("no model given".into()));
    };
    if plan.iterations < 1 {
        return Err(DefmError::Config("long-term plan needs at least one iteration".into()));
    }
    if plan.predicted_vars.len() != models.len()
        || plan.predicted_vars.iter().zip(models).any(|(&v, m)| m.target != v)
    {
        return Err(DefmError::Config("each predicted variable needs its own model, in plan order".into()));
    }
    let s = lead.config().s;
    if models.iter().any(|m| m.config().s != s || m.config().m != series.m() || m.config().n != series.n()) {
        return Err(DefmError::Config("all models must share the window shape and span".into()));
    }
    let (n, m, span, r) = (series.n(), series.m(), s - 1, plan.iterations);
    if span == 0 {
        return Err(DefmError::Config("S = 1 has no forecast span".into()));
    }
    let needed = r * span;
    if plan.remaining == RemainingSource::Observed {
        match ground_future {
            Some(g) if g.n() == n && g.m() >= needed => {}
            Some(g) => {
                return Err(DefmError::TooShort(format!(
                    "ground future has {}x{}, need {n}x{needed}",
                    g.n(),
                    g.m()
                )))
            }
            None => return Err(DefmError::Config("observed remaining rows need ground_future".into())),
        }
    }

    let total = m + needed;
    let mut buffer = vec![0.0; n * total];
    for j in 0..n {
        buffer[j * total..j * total + m].copy_from_slice(series.row(j));
    }
    let mut extended = SeriesMatrix::new(n, total, buffer, series.dt)?.with_names(series.names.clone())?;
    let mut forecasts = Vec::with_capacity(needed);
    let mut windows = Vec::with_capacity(r);

    for q in 0..r {
        let offset = q * span;
        let window = extended.window(offset, m)?;
        let mut lead_result = None;
        for (k, model) in models.iter().enumerate() {
            let mut result = predict(&window, model)?;
            let var = plan.predicted_vars[k];
            for (c, &v) in result.estimates.iter().enumerate() {
                extended.set(var, offset + m + c, v);
            }
            result.time_indices.iter_mut().for_each(|t| *t += offset);
            if k == 0 {
                lead_result = Some(result);
            }
        }
        for j in (0..n).filter(|j| !plan.predicted_vars.contains(j)) {
            for c in 0..span {
                let col = offset + m + c;
                let v = match (plan.remaining, ground_future) {
                    (RemainingSource::Observed, Some(g)) => g.get(j, col - m),
                    _ => extended.get(j, offset + m - 1),
                };
                extended.set(j, col, v);
            }
        }
        let lead_result = lead_result.expect("at least one model");
        forecasts.extend_from_slice(&lead_result.estimates);
        windows.push(lead_result);
    }
    Ok(LongTermResult {
        forecasts,
        windows,
        extended,
    })
}
