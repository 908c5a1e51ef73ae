//! Self-supervised fitting on a single observed window.
//!
//! Known cells of the delay-embedding grid are fitted directly; cells that
//! reach past the window are tied together along their anti-diagonals.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::embedding::{build_delay_embedding, consistency_pairs, DelayEmbedding, EmbeddingConfig, SeriesMatrix};
use crate::error::{shape_err, DefmError, Result};
use crate::model::{DefmModel, ModelConfig, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_fc: f64,
    pub patience: usize,
    pub tol: f64,
    pub seed: u64,
    /// Share of columns whose known cells supervise the fit; the rest only
    /// take part in the consistency term.
    pub supervised_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 1e-3,
            lambda_fc: 1.0,
            patience: 200,
            tol: 1e-6,
            seed: 0,
            supervised_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(DefmError::Config("epochs must be >= 1".into()));
        }
        if !(self.lambda_fc >= 0.0) || !(self.lr > 0.0) {
            return Err(DefmError::Config("lambda_fc must be >= 0 and lr > 0".into()));
        }
        if !(self.supervised_fraction > 0.0 && self.supervised_fraction <= 1.0) {
            return Err(DefmError::Config("supervised_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ds: f64,
    pub l_fc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
    pub duration: Duration,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }

    /// One `epoch,l_ds,l_fc,total` line per epoch, with header.
    pub fn to_log_csv(&self) -> String {
        let mut out = String::from("epoch,l_ds,l_fc,total\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.l_ds, r.l_fc, r.total);
        }
        out
    }
}

fn check_grid(op: &'static str, pred: &Tensor, emb: &DelayEmbedding) -> Result<()> {
    if pred.shape() != [emb.s(), emb.m()] {
        return shape_err(op, format!("prediction {:?} vs {}x{}", pred.shape(), emb.s(), emb.m()));
    }
    Ok(())
}

/// Mean squared error over known cells.
pub fn loss_determined(pred: &Tensor, emb: &DelayEmbedding) -> Result<f64> {
    check_grid("loss_determined", pred, emb)?;
    let (idx, obs) = emb.known_cells();
    if idx.is_empty() {
        return Err(DefmError::Empty("known cells"));
    }
    let sse: f64 = idx.iter().zip(&obs).map(|(&k, &y)| (pred.data()[k] - y).powi(2)).sum();
    Ok(sse / idx.len() as f64)
}

/// Mean squared disagreement across consistency pairs; zero without pairs.
pub fn loss_future_consistency(pred: &Tensor, emb: &DelayEmbedding) -> Result<f64> {
    check_grid("loss_future_consistency", pred, emb)?;
    let pairs = consistency_pairs(emb);
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = pairs
        .iter()
        .map(|&((j, i), (j2, i2))| (pred.at(j, i) - pred.at(j2, i2)).powi(2))
        .sum();
    Ok(sse / pairs.len() as f64)
}

/// Taped form of [`loss_determined`].
pub fn loss_determined_on_tape(tape: &mut Tape, pred: Var, emb: &DelayEmbedding) -> Result<Var> {
    check_grid("loss_determined", tape.value(pred), emb)?;
    let (idx, obs) = emb.known_cells();
    if idx.is_empty() {
        return Err(DefmError::Empty("known cells"));
    }
    let picked = tape.gather(pred, &idx)?;
    let target = tape.constant(Tensor::new(vec![obs.len()], obs)?);
    let diff = tape.sub(picked, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Taped form of [`loss_future_consistency`].
pub fn loss_future_consistency_on_tape(tape: &mut Tape, pred: Var, emb: &DelayEmbedding) -> Result<Var> {
    check_grid("loss_future_consistency", tape.value(pred), emb)?;
    let pairs = consistency_pairs(emb);
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = emb.m();
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().map(|&((j, i), (j2, i2))| (j * m + i, j2 * m + i2)).unzip();
    let lhs = tape.gather(pred, &a)?;
    let rhs = tape.gather(pred, &b)?;
    let diff = tape.sub(lhs, rhs)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Embedding of the normalized window, with supervision thinned to the
/// configured fraction of columns.
fn training_embedding(normalized: &SeriesMatrix, target: usize, s: usize, cfg: &TrainConfig) -> Result<DelayEmbedding> {
    let mut emb = build_delay_embedding(normalized, EmbeddingConfig { s, target })?;
    if cfg.supervised_fraction < 1.0 {
        let m = normalized.m();
        let keep = ((cfg.supervised_fraction * m as f64).round() as usize).clamp(1, m);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f4ac));
        let mut flags = vec![false; m];
        order[..keep].iter().for_each(|&i| flags[i] = true);
        emb.restrict_supervision(&flags)?;
    }
    Ok(emb)
}

/// Fits a fresh model to `series`, forecasting variable `target`.
///
/// Returns the parameters with the lowest recorded total loss.
pub fn train(
    series: &SeriesMatrix,
    target: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(DefmModel, TrainReport)> {
    cfg.validate()?;
    if (series.n(), series.m()) != (model_cfg.n, model_cfg.m) {
        return Err(DefmError::Config(format!(
            "series {}x{} does not match model {}x{}",
            series.n(),
            series.m(),
            model_cfg.n,
            model_cfg.m
        )));
    }
    if model_cfg.s > series.m() {
        return Err(DefmError::Config(format!("S = {} exceeds m = {}", model_cfg.s, series.m())));
    }
    let start = Instant::now();
    let mut model = DefmModel::new(model_cfg.clone())?;
    if target >= series.n() {
        return Err(DefmError::Config(format!("target {target} outside 0..{}", series.n())));
    }
    model.target = target;
    model.normalizer = Normalizer::fit(series);
    let normalized = model.normalizer.apply(series)?;
    let emb = training_embedding(&normalized, target, model_cfg.s, cfg)?;

    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_total = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = model.params().to_vec();
    let mut reference = f64::INFINITY;
    let mut last_gain = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.epochs {
        let diverged = |_| DefmError::Diverged { epoch };
        let mut tape = Tape::new();
        let vars = model.forward_on_tape(&mut tape, &normalized).map_err(diverged)?;
        let l_ds = loss_determined_on_tape(&mut tape, vars.output, &emb)?;
        let l_fc = loss_future_consistency_on_tape(&mut tape, vars.output, &emb)?;
        let weighted = tape.scale(l_fc, cfg.lambda_fc).map_err(diverged)?;
        let total = tape.add(l_ds, weighted).map_err(diverged)?;
        let record = EpochRecord {
            epoch,
            l_ds: tape.value(l_ds).data()[0],
            l_fc: tape.value(l_fc).data()[0],
            total: tape.value(total).data()[0],
        };
        if !record.total.is_finite() {
            return Err(DefmError::Diverged { epoch });
        }
        history.push(record);

        if record.total < best_total {
            best_total = record.total;
            best_epoch = epoch;
            best_params.clone_from_slice(model.params());
        }
        if record.total < reference * (1.0 - cfg.tol) {
            reference = record.total;
            last_gain = epoch;
        } else if epoch - last_gain >= cfg.patience {
            stop = StopReason::EarlyStop { epoch };
            break;
        }

        tape.backward(total)?;
        model.collect_grads(&tape, &vars.params);
        adam.step(model.params_mut())?;
    }

    for (p, best) in model.params_mut().iter_mut().zip(best_params) {
        *p = best;
    }
    Ok((
        model,
        TrainReport {
            history,
            best_epoch,
            stop,
            duration: start.elapsed(),
        },
    ))
}
