//! Delay-embedding forecast machine.
//!
//! A short window of an `n`-variable series is mapped, column by column, to
//! the delay embedding of one target variable. Cells of that embedding that
//! lie past the window are the forecast. The network is fitted on the window
//! alone: known cells against observations, unknown cells against each other
//! along their shared time index.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod csvio;
pub mod embedding;
pub mod error;
pub mod forecasting;
pub mod lorenz;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;

pub use embedding::{DelayEmbedding, EmbeddingConfig, SeriesMatrix};
pub use error::{DefmError, Result};
pub use forecasting::{predict, predict_long_term, ForecastResult, LongTermPlan, RemainingSource};
pub use model::{DefmModel, ModelConfig};
pub use training::{train, TrainConfig, TrainReport};
