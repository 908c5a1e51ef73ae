//! Sweeps over sampled Lorenz cases, shared by the `benchmark` and
//! `long-term` commands and the acceptance suite.

use std::fmt::Write as _;

use anyhow::{Context, Result};

use defm_core::baselines::{forecast_univariate, BaselineConfig, Method};
use defm_core::embedding::SeriesMatrix;
use defm_core::forecasting::{predict, predict_long_term, LongTermPlan, LongTermResult, RemainingSource};
use defm_core::lorenz::{add_noise, sample_cases, Case, NoiseSpec};
use defm_core::metrics::{aggregate_scores, pcc, ScorePair, ScoreSummary};
use defm_core::training::{train, TrainConfig};

use crate::config::{derived_seed, stream, ArchConfig, BenchmarkSection};

/// Everything a method needs besides the case itself.
#[derive(Debug, Clone)]
pub struct Setup {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub root_seed: u64,
}

const NOISE_BLOCK: u64 = 100;
const CASE_BLOCK: u64 = 200;
const MODEL_BLOCK: u64 = 10_000;
const TRAIN_BLOCK: u64 = 20_000;

impl Setup {
    fn seed(&self, block: u64, k: usize) -> u64 {
        derived_seed(self.root_seed, stream::BENCH + block + k as u64)
    }

    /// Forecast of `case.future` by `method`. Case `k` gets the same model
    /// and train seeds in every grid cell, so cells are paired.
    pub fn forecast(&self, method: Method, case: &Case, s: usize, k: usize, fraction: f64) -> Result<Vec<f64>> {
        match method {
            Method::Defm | Method::DefmNoTemporal => {
                let mut mc = self.arch.model_config(case.known.n(), case.known.m(), s, self.seed(MODEL_BLOCK, k));
                mc.temporal = method == Method::Defm && self.arch.temporal;
                let tc = TrainConfig {
                    seed: self.seed(TRAIN_BLOCK, k),
                    supervised_fraction: fraction,
                    ..self.train.clone()
                };
                let (model, _) = train(&case.known, case.target, &mc, &tc)?;
                Ok(predict(&case.known, &model)?.estimates)
            }
            _ => Ok(forecast_univariate(method, case.known.row(case.target), &self.baselines, s - 1)?),
        }
    }
}

/// One line of the score table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub method: Method,
    pub m: usize,
    pub noise: f64,
    pub fraction: f64,
    pub summary: ScoreSummary,
    /// Cases on which the method raised an error; excluded from the summary.
    pub failed: usize,
}

/// Per-case detail behind a [`CellRow`].
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRow {
    pub method: Method,
    pub m: usize,
    pub noise: f64,
    pub fraction: f64,
    pub case: usize,
    pub start: usize,
    pub target: usize,
    pub score: Option<ScorePair>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOutput {
    pub cells: Vec<CellRow>,
    pub cases: Vec<CaseRow>,
}

impl BenchmarkOutput {
    pub fn cell(&self, method: Method, m: usize, noise: f64, fraction: f64) -> Option<&CellRow> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.m == m && c.noise == noise && c.fraction == fraction)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("method,m,noise,fraction,cases,mean_pcc,mean_rmse,undefined_pcc,failed\n");
        for c in &self.cells {
            let pcc = c.summary.mean_pcc.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.method.name(),
                c.m,
                c.noise,
                c.fraction,
                c.summary.count,
                pcc,
                c.summary.mean_rmse,
                c.summary.undefined_pcc,
                c.failed
            );
        }
        out
    }

    pub fn cases_csv(&self) -> String {
        let mut out = String::from("method,m,noise,fraction,case,start,target,pcc,rmse\n");
        for c in &self.cases {
            let (pcc, rmse) = match c.score {
                Some(s) => (s.pcc.map(|p| p.to_string()).unwrap_or_default(), s.rmse.to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.method.name(),
                c.m,
                c.noise,
                c.fraction,
                c.case,
                c.start,
                c.target,
                pcc,
                rmse
            );
        }
        out
    }
}

/// Runs every (noise, m, fraction, method) cell on `raw`.
///
/// Noise is added to the raw states, then each variable is z-scored over the
/// whole series; windows, forecasts and truth all live on that scale. The
/// same cases are drawn for every noise level. Univariate baselines do not
/// see the fraction, so their rows repeat across fractions.
pub fn run_benchmark(
    raw: &SeriesMatrix,
    grid: &BenchmarkSection,
    setup: &Setup,
    mut progress: impl FnMut(&str),
) -> Result<BenchmarkOutput> {
    let mut out = BenchmarkOutput::default();
    for (a, &noise) in grid.noise_variances.iter().enumerate() {
        let noisy = add_noise(raw, NoiseSpec { variance: noise }, setup.seed(NOISE_BLOCK, a))?;
        let (z, _, _) = noisy.zscore();
        for (b, &m) in grid.m_values.iter().enumerate() {
            let cases = sample_cases(&z, grid.cases, m, grid.s, setup.seed(CASE_BLOCK, b))
                .with_context(|| format!("sampling {} cases with m = {m}", grid.cases))?;
            for &method in &grid.methods {
                let neural = matches!(method, Method::Defm | Method::DefmNoTemporal);
                let mut cached: Option<(Vec<CaseRow>, Vec<ScorePair>)> = None;
                for &fraction in &grid.fractions {
                    let (rows, scores) = match (&cached, neural) {
                        (Some(c), false) => c.clone(),
                        _ => {
                            let mut rows = Vec::with_capacity(cases.len());
                            let mut scores = Vec::new();
                            for (k, case) in cases.iter().enumerate() {
                                let score = setup
                                    .forecast(method, case, grid.s, k, fraction)
                                    .and_then(|f| Ok(ScorePair::score(&f, &case.future)?))
                                    .ok();
                                scores.extend(score);
                                rows.push(CaseRow {
                                    method,
                                    m,
                                    noise,
                                    fraction,
                                    case: k,
                                    start: case.start,
                                    target: case.target,
                                    score,
                                });
                            }
                            cached = Some((rows.clone(), scores.clone()));
                            (rows, scores)
                        }
                    };
                    let failed = rows.iter().filter(|r| r.score.is_none()).count();
                    let summary = if scores.is_empty() {
                        ScoreSummary {
                            mean_pcc: None,
                            mean_rmse: f64::NAN,
                            count: 0,
                            undefined_pcc: 0,
                        }
                    } else {
                        aggregate_scores(&scores)?
                    };
                    progress(&format!(
                        "{} m={m} noise={noise} fraction={fraction}: pcc {:?} rmse {:.4}",
                        method.name(),
                        summary.mean_pcc,
                        summary.mean_rmse
                    ));
                    out.cases.extend(rows.into_iter().map(|r| CaseRow { fraction, ..r }));
                    out.cells.push(CellRow {
                        method,
                        m,
                        noise,
                        fraction,
                        summary,
                        failed,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Iterated forecast of one window plus its scoring.
#[derive(Debug, Clone)]
pub struct LongTermRun {
    pub result: LongTermResult,
    pub truth: Vec<f64>,
    /// PCC of every `S - 1` window against the truth; `None` when undefined.
    pub window_pcc: Vec<Option<f64>>,
}

impl LongTermRun {
    pub fn mean_window_pcc(&self) -> Option<f64> {
        let defined: Vec<f64> = self.window_pcc.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Trains once on `series[start .. start + m]` and iterates for `steps`
/// points (rounded up to whole spans). Non-target rows come from `series`.
#[allow(clippy::too_many_arguments)]
pub fn long_term_run(
    series: &SeriesMatrix,
    start: usize,
    target: usize,
    m: usize,
    span: usize,
    steps: usize,
    remaining: RemainingSource,
    setup: &Setup,
    k: usize,
) -> Result<LongTermRun> {
    let iterations = steps.div_ceil(span);
    let needed = iterations * span;
    let known = series.window(start, m)?;
    let ground = series
        .window(start + m, needed)
        .with_context(|| format!("need {needed} rows after the window"))?;
    let mc = setup.arch.model_config(series.n(), m, span + 1, setup.seed(MODEL_BLOCK, k));
    let tc = TrainConfig {
        seed: setup.seed(TRAIN_BLOCK, k),
        ..setup.train.clone()
    };
    let (model, _) = train(&known, target, &mc, &tc)?;
    let plan = LongTermPlan {
        iterations,
        predicted_vars: vec![target],
        remaining,
    };
    let result = predict_long_term(&known, &model, &plan, Some(&ground))?;
    let truth = ground.row(target).to_vec();
    let window_pcc = result
        .forecasts
        .chunks(span)
        .zip(truth.chunks(span))
        .map(|(f, t)| pcc(f, t).ok().flatten())
        .collect();
    Ok(LongTermRun {
        result,
        truth,
        window_pcc,
    })
}
