//! Run configuration: one TOML file with a section per stage, overridden by
//! command-line flags. Every field has a default, so an empty file is valid.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use defm_core::baselines::{BaselineConfig, Method};
use defm_core::forecasting::RemainingSource;
use defm_core::lorenz::{LorenzConfig, SwitchSchedule};
use defm_core::model::{Activation, ModelConfig};
use defm_core::seed::sub_seed;
use defm_core::training::TrainConfig;

/// Environment variable holding the root seed.
pub const SEED_ENV: &str = "DEFM_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stochastic stage derives its own seed from it.
    pub seed: u64,
    pub lorenz: LorenzConfig,
    pub generate: GenerateConfig,
    pub schedule: SwitchSchedule,
    pub embedding: EmbeddingSection,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub long_term: LongTermSection,
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub samples: usize,
    pub time_varying: bool,
    /// Measurement-noise variance, in the units of the raw states.
    pub noise_variance: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            time_varying: false,
            noise_variance: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Known window length.
    pub m: usize,
    /// Embedding dimension; the forecast covers `s - 1` steps.
    pub s: usize,
    /// Target variable, by header name or zero-based index.
    pub target: String,
    /// First row of the window within the series.
    pub start: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            m: 45,
            s: 19,
            target: "0".into(),
            start: 0,
        }
    }
}

/// Architecture fields of [`ModelConfig`]; the shape comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub temporal: bool,
    pub attn_layers: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub spatial_hidden: Vec<usize>,
    pub merge_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = ModelConfig::new(1, 1, 1);
        Self {
            temporal: d.temporal,
            attn_layers: d.attn_layers,
            attn_dim: d.attn_dim,
            heads: d.heads,
            ff_width: d.ff_width,
            spatial_hidden: d.spatial_hidden,
            merge_hidden: d.merge_hidden,
            activation: d.activation,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, n: usize, m: usize, s: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n,
            m,
            s,
            temporal: self.temporal,
            attn_layers: self.attn_layers,
            attn_dim: self.attn_dim,
            heads: self.heads,
            ff_width: self.ff_width,
            spatial_hidden: self.spatial_hidden.clone(),
            merge_hidden: self.merge_hidden.clone(),
            activation: self.activation,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongTermSection {
    pub iterations: usize,
    /// Extra variables (names or indices) forecast and fed back with the target.
    pub predicted_vars: Vec<String>,
    pub remaining: RemainingSource,
}

impl Default for LongTermSection {
    fn default() -> Self {
        Self {
            iterations: 10,
            predicted_vars: Vec::new(),
            remaining: RemainingSource::Observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub m_values: Vec<usize>,
    pub s: usize,
    pub methods: Vec<Method>,
    pub cases: usize,
    pub noise_variances: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            m_values: vec![40, 60, 80],
            s: 19,
            methods: Method::ALL.to_vec(),
            cases: 30,
            noise_variances: vec![0.0],
            fractions: vec![1.0],
        }
    }
}

/// Seed streams derived from the root seed.
pub mod stream {
    pub const LORENZ: u64 = 0;
    pub const SCHEDULE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MODEL: u64 = 3;
    pub const TRAIN: u64 = 4;
    /// Benchmark streams are offset by a block index.
    pub const BENCH: u64 = 1_000;
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing config")
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    /// Pins every derived seed so the echoed config reproduces the run.
    pub fn resolve_seeds(&mut self) {
        self.lorenz.seed = derived_seed(self.seed, stream::LORENZ);
        self.schedule.seed = derived_seed(self.seed, stream::SCHEDULE);
        self.train.seed = derived_seed(self.seed, stream::TRAIN);
    }

    pub fn model_seed(&self) -> u64 {
        derived_seed(self.seed, stream::MODEL)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.s < 2 {
            bail!("embedding.s must be at least 2 to forecast anything");
        }
        if self.embedding.m < self.embedding.s {
            bail!("embedding.m = {} must be >= s = {}", self.embedding.m, self.embedding.s);
        }
        self.train.validate()?;
        if self.benchmark.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("benchmark fractions must lie in (0, 1]");
        }
        if self.benchmark.noise_variances.iter().any(|v| !(*v >= 0.0)) {
            bail!("benchmark noise variances must be >= 0");
        }
        Ok(())
    }
}

/// Sub-seed of `root`, kept to 63 bits so it survives a TOML echo.
pub fn derived_seed(root: u64, stream: u64) -> u64 {
    sub_seed(root, stream) >> 1
}

/// Root seed: flag, then environment, then file.
pub fn root_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    let seed = match (flag, std::env::var(SEED_ENV)) {
        (Some(s), _) => s,
        (None, Ok(v)) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?,
        (None, Err(_)) => file,
    };
    if seed > i64::MAX as u64 {
        bail!("root seed {seed} exceeds {}", i64::MAX);
    }
    Ok(seed)
}

/// Resolves a variable given by header name or zero-based index.
pub fn resolve_variable(spec: &str, names: &[String]) -> Result<usize> {
    if let Some(k) = names.iter().position(|n| n == spec) {
        return Ok(k);
    }
    match spec.parse::<usize>() {
        Ok(k) if k < names.len() => Ok(k),
        _ => bail!("unknown variable '{spec}' (have {} columns)", names.len()),
    }
}
