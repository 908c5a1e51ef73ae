//! Coupled Lorenz ring benchmarks, measurement noise, and case sampling.
//!
//! Oscillator `j` obeys
//!
//! ```text
//! x' = sigma (y - x) + c x_{j-1}
//! y' = x (rho - z) - y
//! z' = x y - beta z
//! ```
//!
//! with cyclic `j - 1`. This unidirectional ring is a reconstruction of the
//! benchmark, not a published equation set; every constant is configurable.
//! State variables are ordered `x1, y1, z1, x2, ...`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::SeriesMatrix;
use crate::error::{DefmError, Result};

const GUARD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzConfig {
    pub oscillators: usize,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub coupling: f64,
    pub dt_integrate: f64,
    pub dt_sample: f64,
    pub transient: f64,
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            oscillators: 30,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            coupling: 0.1,
            dt_integrate: 0.002,
            dt_sample: 0.02,
            transient: 100.0,
            seed: 0,
        }
    }
}

impl LorenzConfig {
    pub fn dim(&self) -> usize {
        3 * self.oscillators
    }

    fn steps_per_sample(&self) -> Result<usize> {
        if self.oscillators < 1 {
            return Err(DefmError::Config("need at least one oscillator".into()));
        }
        if !(self.dt_integrate > 0.0) || self.dt_integrate > self.dt_sample || !(self.transient >= 0.0) {
            return Err(DefmError::Config(
                "need 0 < dt_integrate <= dt_sample and transient >= 0".into(),
            ));
        }
        let ratio = self.dt_sample / self.dt_integrate;
        let k = ratio.round();
        if (ratio - k).abs() > 1e-9 * ratio {
            return Err(DefmError::Config("dt_sample must be a multiple of dt_integrate".into()));
        }
        Ok(k as usize)
    }

    pub fn variable_names(&self) -> Vec<String> {
        (1..=self.oscillators)
            .flat_map(|j| [format!("x{j}"), format!("y{j}"), format!("z{j}")])
            .collect()
    }
}

/// Piecewise-constant `rho`, redrawn every `switch_period` time units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchSchedule {
    pub switch_period: f64,
    pub rho_range: (f64, f64),
    pub seed: u64,
}

impl Default for SwitchSchedule {
    fn default() -> Self {
        Self {
            switch_period: 100.0,
            rho_range: (28.0, 42.0),
            seed: 1,
        }
    }
}

/// One constant-parameter stretch of a switching run (recorded time axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub rho: f64,
}

impl SwitchSchedule {
    /// Segments tiling `[0, duration)`.
    pub fn segments(&self, duration: f64) -> Result<Vec<Segment>> {
        if !(self.switch_period > 0.0) || !(self.rho_range.0 <= self.rho_range.1) {
            return Err(DefmError::Config("switch_period must be positive and rho_range ordered".into()));
        }
        let count = ((duration / self.switch_period).ceil() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..count)
            .map(|k| Segment {
                start: k as f64 * self.switch_period,
                end: ((k + 1) as f64 * self.switch_period).min(duration),
                rho: rng.random_range(self.rho_range.0..=self.rho_range.1),
            })
            .collect())
    }
}

fn field(state: &[f64], out: &mut [f64], cfg: &LorenzConfig, rho: f64) {
    let osc = state.len() / 3;
    for j in 0..osc {
        let (x, y, z) = (state[3 * j], state[3 * j + 1], state[3 * j + 2]);
        let prev_x = state[3 * ((j + osc - 1) % osc)];
        out[3 * j] = cfg.sigma * (y - x) + cfg.coupling * prev_x;
        out[3 * j + 1] = x * (rho - z) - y;
        out[3 * j + 2] = x * y - cfg.beta * z;
    }
}

struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    fn step(&mut self, state: &mut [f64], h: f64, cfg: &LorenzConfig, rho: f64) {
        let [k1, k2, k3, k4] = &mut self.k;
        field(state, k1, cfg, rho);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        field(&self.tmp, k2, cfg, rho);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        field(&self.tmp, k3, cfg, rho);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + h * k3[i];
        }
        field(&self.tmp, k4, cfg, rho);
        for i in 0..state.len() {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Seeded initial state, uniform in `[-5, 5]` per coordinate.
pub fn random_initial_state(cfg: &LorenzConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.dim()).map(|_| rng.random_range(-5.0..5.0)).collect()
}

/// Integrates from a seeded random state; see [`integrate_lorenz_from`].
pub fn integrate_lorenz(cfg: &LorenzConfig, duration: f64, schedule: Option<&SwitchSchedule>) -> Result<SeriesMatrix> {
    integrate_lorenz_from(cfg, &random_initial_state(cfg), duration, schedule)
}

/// Classical RK4 over the ring. After `transient` time units (run at the
/// first segment's parameters) the state is recorded every `dt_sample`
/// for `duration` time units.
pub fn integrate_lorenz_from(
    cfg: &LorenzConfig,
    initial: &[f64],
    duration: f64,
    schedule: Option<&SwitchSchedule>,
) -> Result<SeriesMatrix> {
    let per_sample = cfg.steps_per_sample()?;
    if initial.len() != cfg.dim() {
        return Err(DefmError::Config(format!("initial state has {} entries, need {}", initial.len(), cfg.dim())));
    }
    let samples = (duration / cfg.dt_sample).round() as usize;
    if samples < 2 {
        return Err(DefmError::TooShort(format!("duration {duration} yields fewer than 2 samples")));
    }
    let segments = schedule.map(|s| s.segments(duration)).transpose()?;
    let steps_per_segment = schedule.map(|s| (s.switch_period / cfg.dt_integrate).round() as usize);
    let rho_at = |step: usize| -> f64 {
        match (&segments, steps_per_segment) {
            (Some(segs), Some(per)) => segs[(step / per.max(1)).min(segs.len() - 1)].rho,
            _ => cfg.rho,
        }
    };

    let dim = cfg.dim();
    let mut state = initial.to_vec();
    let mut rk = Rk4::new(dim);
    let h = cfg.dt_integrate;
    let transient_steps = (cfg.transient / h).round() as usize;
    let rho0 = rho_at(0);
    for step in 0..transient_steps {
        rk.step(&mut state, h, cfg, rho0);
        guard(&state, (step + 1) as f64 * h - cfg.transient)?;
    }

    let mut data = vec![0.0; dim * samples];
    let mut step = 0usize;
    for t in 0..samples {
        if t > 0 {
            for _ in 0..per_sample {
                rk.step(&mut state, h, cfg, rho_at(step));
                step += 1;
            }
            guard(&state, step as f64 * h)?;
        }
        for (v, &s) in state.iter().enumerate() {
            data[v * samples + t] = s;
        }
    }
    SeriesMatrix::new(dim, samples, data, cfg.dt_sample)?.with_names(cfg.variable_names())
}

fn guard(state: &[f64], time: f64) -> Result<()> {
    if state.iter().any(|v| !v.is_finite() || v.abs() > GUARD) {
        return Err(DefmError::BlowUp { time });
    }
    Ok(())
}

/// Additive white Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
}

pub fn add_noise(series: &SeriesMatrix, spec: NoiseSpec, seed: u64) -> Result<SeriesMatrix> {
    if !(spec.variance >= 0.0) || !spec.variance.is_finite() {
        return Err(DefmError::Config(format!("noise variance {} must be finite and >= 0", spec.variance)));
    }
    if spec.variance == 0.0 {
        return Ok(series.clone());
    }
    let normal = Normal::new(0.0, spec.variance.sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = series.clone();
    for j in 0..series.n() {
        for v in out.row_mut(j) {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// One forecasting problem cut from a long series.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub start: usize,
    pub target: usize,
    pub known: SeriesMatrix,
    /// Target values at the `s - 1` time points after the window.
    pub future: Vec<f64>,
    /// Every variable over the same future stretch.
    pub future_all: SeriesMatrix,
}

/// Samples `count` distinct (start, target) pairs uniformly.
pub fn sample_cases(series: &SeriesMatrix, count: usize, m: usize, s: usize, seed: u64) -> Result<Vec<Case>> {
    if m < 2 || s < 2 {
        return Err(DefmError::Config("sample_cases needs m >= 2 and s >= 2".into()));
    }
    let span = m + s - 1;
    if series.m() < span {
        return Err(DefmError::TooShort(format!(
            "{} time points cannot hold a window of {m} plus {} future points",
            series.m(),
            s - 1
        )));
    }
    let starts = series.m() - span + 1;
    let total = starts * series.n();
    if count > total {
        return Err(DefmError::TooShort(format!("only {total} distinct cases available, {count} requested")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, total, count)
        .into_iter()
        .map(|flat| {
            let (start, target) = (flat / series.n(), flat % series.n());
            let known = series.window(start, m)?;
            let future_all = series.window(start + m, s - 1)?;
            Ok(Case {
                start,
                target,
                known,
                future: future_all.row(target).to_vec(),
                future_all,
            })
        })
        .collect()
}
