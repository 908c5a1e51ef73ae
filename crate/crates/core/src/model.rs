//! The three-branch network: stacked self-attention over time positions, a
//! dense stack over each spatial vector, and a dense merge stack that emits
//! one `S`-vector per column.
//!
//! Internally every branch is time-major (`m` rows of features); the public
//! per-branch functions transpose back to the feature-major layout of the
//! input matrix.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::embedding::SeriesMatrix;
use crate::error::{shape_err, DefmError, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    /// `false` removes the temporal branch entirely.
    pub temporal: bool,
    pub attn_layers: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Spatial widths; the last one is the shared feature width of both branches.
    pub spatial_hidden: Vec<usize>,
    /// Hidden merge widths; a final linear layer to `s` outputs follows.
    pub merge_hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture for an `n`-variable, `m`-point window.
    pub fn new(n: usize, m: usize, s: usize) -> Self {
        Self {
            n,
            m,
            s,
            temporal: true,
            attn_layers: 2,
            attn_dim: 64,
            heads: 4,
            ff_width: 128,
            spatial_hidden: vec![128, 64],
            merge_hidden: vec![128],
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    pub fn feature_width(&self) -> usize {
        *self.spatial_hidden.last().unwrap_or(&self.n)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DefmError::Config(msg));
        if self.n == 0 || self.m == 0 || self.s == 0 {
            return fail(format!("n, m, s must be positive (got {}, {}, {})", self.n, self.m, self.s));
        }
        if self.spatial_hidden.is_empty() || self.spatial_hidden.iter().chain(&self.merge_hidden).any(|&w| w == 0) {
            return fail("spatial stack needs at least one layer and all widths must be positive".into());
        }
        if self.temporal {
            if self.attn_layers == 0 || self.attn_dim == 0 || self.heads == 0 || self.ff_width == 0 {
                return fail("attention sizes must be positive".into());
            }
            if !self.attn_dim.is_multiple_of(self.heads) {
                return fail(format!("attn_dim {} not divisible by {} heads", self.attn_dim, self.heads));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct AttentionHead {
    query: usize,
    key: usize,
    value: usize,
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    heads: Vec<AttentionHead>,
    out: Dense,
    norm1: (usize, usize),
    ff1: Dense,
    ff2: Dense,
    norm2: (usize, usize),
}

#[derive(Debug, Clone)]
struct TemporalLayout {
    input: Dense,
    position: usize,
    layers: Vec<AttentionLayer>,
    output: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    temporal: Option<TemporalLayout>,
    spatial: Vec<Dense>,
    merge: Vec<Dense>,
}

/// Per-variable affine map fitted on the training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    pub fn fit(series: &SeriesMatrix) -> Self {
        let (_, means, stds) = series.zscore();
        Self { means, stds }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            means: vec![0.0; n],
            stds: vec![1.0; n],
        }
    }

    pub fn apply(&self, series: &SeriesMatrix) -> Result<SeriesMatrix> {
        if series.n() != self.means.len() {
            return shape_err("normalize", format!("{} variables vs {}", series.n(), self.means.len()));
        }
        let mut out = series.clone();
        for j in 0..series.n() {
            let (mu, sd) = (self.means[j], self.stds[j]);
            out.row_mut(j).iter_mut().for_each(|v| *v = (*v - mu) / sd);
        }
        Ok(out)
    }

    pub fn invert(&self, var: usize, v: f64) -> f64 {
        v * self.stds[var] + self.means[var]
    }
}

/// Trainable parameters plus the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct DefmModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    pub normalizer: Normalizer,
    /// Variable whose delay embedding the output estimates.
    pub target: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t.with_grad());
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, Tensor::new(shape, data).expect("valid shape"))
    }

    fn filled(&mut self, name: String, len: usize, v: f64) -> usize {
        self.push(name, Tensor::new(vec![len], vec![v; len]).expect("valid shape"))
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let bound = (1.0 / fan_in as f64).sqrt();
        Dense {
            w: self.uniform(format!("{name}.weight"), vec![fan_in, fan_out], bound),
            b: self.uniform(format!("{name}.bias"), vec![fan_out], bound),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> (usize, usize) {
        (
            self.filled(format!("{name}.gain"), width, 1.0),
            self.filled(format!("{name}.bias"), width, 0.0),
        )
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<String>, Vec<Tensor>) {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        names: Vec::new(),
        params: Vec::new(),
    };
    let feat = cfg.feature_width();
    let temporal = cfg.temporal.then(|| {
        let d = cfg.attn_dim;
        let dh = d / cfg.heads;
        let input = b.dense("temporal.input", cfg.n, d);
        let position = b.uniform("temporal.position".into(), vec![cfg.m, d], (1.0 / d as f64).sqrt());
        let layers = (0..cfg.attn_layers)
            .map(|l| {
                let heads = (0..cfg.heads)
                    .map(|h| {
                        let bound = (1.0 / d as f64).sqrt();
                        AttentionHead {
                            query: b.uniform(format!("temporal.layer{l}.head{h}.query"), vec![d, dh], bound),
                            key: b.uniform(format!("temporal.layer{l}.head{h}.key"), vec![d, dh], bound),
                            value: b.uniform(format!("temporal.layer{l}.head{h}.value"), vec![d, dh], bound),
                        }
                    })
                    .collect();
                AttentionLayer {
                    heads,
                    out: b.dense(&format!("temporal.layer{l}.out"), d, d),
                    norm1: b.norm(&format!("temporal.layer{l}.norm1"), d),
                    ff1: b.dense(&format!("temporal.layer{l}.ff1"), d, cfg.ff_width),
                    ff2: b.dense(&format!("temporal.layer{l}.ff2"), cfg.ff_width, d),
                    norm2: b.norm(&format!("temporal.layer{l}.norm2"), d),
                }
            })
            .collect();
        let output = b.dense("temporal.output", d, feat);
        TemporalLayout {
            input,
            position,
            layers,
            output,
        }
    });
    let mut fan_in = cfg.n;
    let spatial = cfg
        .spatial_hidden
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let layer = b.dense(&format!("spatial.{k}"), fan_in, w);
            fan_in = w;
            layer
        })
        .collect();
    let mut fan_in = if cfg.temporal { 2 * feat } else { feat };
    let merge = cfg
        .merge_hidden
        .iter()
        .chain(std::iter::once(&cfg.s))
        .enumerate()
        .map(|(k, &w)| {
            let layer = b.dense(&format!("merge.{k}"), fan_in, w);
            fan_in = w;
            layer
        })
        .collect();
    (Layout { temporal, spatial, merge }, b.names, b.params)
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    /// One handle per model parameter, in model order.
    pub params: Vec<Var>,
    /// Time-major temporal features (`m×ñ`), absent in the ablation.
    pub temporal: Option<Var>,
    /// Time-major spatial features (`m×ñ`).
    pub spatial: Var,
    /// Prediction grid, `S×m`.
    pub output: Var,
    /// Attention weights (`m×m`), grouped by layer then head.
    pub attention: Vec<Vec<Var>>,
}

impl DefmModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, names, params) = build_layout(&config);
        let normalizer = Normalizer::identity(config.n);
        Ok(Self {
            config,
            names,
            params,
            layout,
            normalizer,
            target: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Overwrites a named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let Some(k) = self.names.iter().position(|n| n == name) else {
            return Err(DefmError::Config(format!("no parameter named {name}")));
        };
        let shape = self.params[k].shape().to_vec();
        self.params[k] = Tensor::new(shape, data)?.with_grad();
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|k| &self.params[k])
    }

    fn check_input(&self, z: &SeriesMatrix) -> Result<()> {
        if (z.n(), z.m()) != (self.config.n, self.config.m) {
            return shape_err(
                "defm_forward",
                format!("input {}x{} vs model {}x{}", z.n(), z.m(), self.config.n, self.config.m),
            );
        }
        Ok(())
    }

    /// Records the full network on `tape`. `z` is used as-is (no normalization).
    pub fn forward_on_tape(&self, tape: &mut Tape, z: &SeriesMatrix) -> Result<ForwardVars> {
        self.check_input(z)?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let input = Tensor::new(vec![z.n(), z.m()], z.data().to_vec())?;
        let zin = tape.constant(input);
        let x = tape.transpose(zin)?;

        let (temporal, attention) = match &self.layout.temporal {
            Some(t) => {
                let (out, attn) = self.temporal_on_tape(tape, &params, t, x)?;
                (Some(out), attn)
            }
            None => (None, Vec::new()),
        };
        let spatial = self.spatial_on_tape(tape, &params, x)?;
        let output = self.merge_on_tape(tape, &params, temporal, spatial)?;
        Ok(ForwardVars {
            params,
            temporal,
            spatial,
            output,
            attention,
        })
    }

    fn dense(&self, tape: &mut Tape, p: &[Var], layer: &Dense, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[layer.w])?;
        tape.add_row(h, p[layer.b])
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }

    fn norm(&self, tape: &mut Tape, p: &[Var], (gain, bias): (usize, usize), x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, LN_EPS)?;
        let h = tape.mul_row(h, p[gain])?;
        tape.add_row(h, p[bias])
    }

    fn temporal_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        t: &TemporalLayout,
        x: Var,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let dh = self.config.attn_dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = self.dense(tape, p, &t.input, x)?;
        h = tape.add(h, p[t.position])?;
        let mut weights = Vec::with_capacity(t.layers.len());
        for layer in &t.layers {
            let mut outs = Vec::with_capacity(layer.heads.len());
            let mut layer_weights = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let q = tape.matmul(h, p[head.query])?;
                let k = tape.matmul(h, p[head.key])?;
                let v = tape.matmul(h, p[head.value])?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale)?;
                let a = tape.softmax_rows(scores)?;
                outs.push(tape.matmul(a, v)?);
                layer_weights.push(a);
            }
            let cat = tape.concat_cols(&outs)?;
            let attended = self.dense(tape, p, &layer.out, cat)?;
            let res = tape.add(h, attended)?;
            let h1 = self.norm(tape, p, layer.norm1, res)?;
            let f = self.dense(tape, p, &layer.ff1, h1)?;
            let f = tape.relu(f)?;
            let f = self.dense(tape, p, &layer.ff2, f)?;
            let res = tape.add(h1, f)?;
            h = self.norm(tape, p, layer.norm2, res)?;
            weights.push(layer_weights);
        }
        let out = self.dense(tape, p, &t.output, h)?;
        Ok((out, weights))
    }

    fn spatial_on_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layout.spatial {
            h = self.dense(tape, p, layer, h)?;
            h = self.activate(tape, h)?;
        }
        Ok(h)
    }

    fn merge_on_tape(&self, tape: &mut Tape, p: &[Var], temporal: Option<Var>, spatial: Var) -> Result<Var> {
        let mut h = match temporal {
            Some(t) => tape.concat_cols(&[t, spatial])?,
            None => spatial,
        };
        let last = self.layout.merge.len() - 1;
        for (k, layer) in self.layout.merge.iter().enumerate() {
            h = self.dense(tape, p, layer, h)?;
            if k < last {
                h = self.activate(tape, h)?;
            }
        }
        tape.transpose(h)
    }

    /// Accumulates tape gradients into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(g),
                None => p.accumulate_grad(&vec![0.0; p.len()]),
            }
        }
    }
}

fn transposed(tape: &mut Tape, v: Var) -> Result<Tensor> {
    let t = tape.transpose(v)?;
    Ok(tape.value(t).clone())
}

/// Temporal-branch features, `ñ×m`.
pub fn temporal_forward(z: &SeriesMatrix, model: &DefmModel) -> Result<Tensor> {
    let Some(layout) = &model.layout.temporal else {
        return Err(DefmError::Config("model has no temporal branch".into()));
    };
    model.check_input(z)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
    let zin = tape.constant(Tensor::new(vec![z.n(), z.m()], z.data().to_vec())?);
    let x = tape.transpose(zin)?;
    let (out, _) = model.temporal_on_tape(&mut tape, &params, layout, x)?;
    transposed(&mut tape, out)
}

/// Spatial features of one `n`-vector.
pub fn spatial_forward(column: &[f64], model: &DefmModel) -> Result<Vec<f64>> {
    if column.len() != model.config.n {
        return shape_err("spatial_forward", format!("{} inputs vs n = {}", column.len(), model.config.n));
    }
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
    let x = tape.constant(Tensor::new(vec![1, column.len()], column.to_vec())?);
    let out = model.spatial_on_tape(&mut tape, &params, x)?;
    Ok(tape.value(out).data().to_vec())
}

/// Merges feature grids (`ñ×m` each) into the `S×m` prediction.
pub fn merge_forward(temporal: Option<&Tensor>, spatial: &Tensor, model: &DefmModel) -> Result<Tensor> {
    if temporal.is_some() != model.config.temporal {
        return Err(DefmError::Config("temporal features must be given iff the model has a temporal branch".into()));
    }
    let (_, m) = spatial
        .dims2()
        .map_or_else(|| shape_err("merge_forward", "spatial features must be 2-D"), Ok)?;
    if let Some(t) = temporal {
        if t.dims2().map(|d| d.1) != Some(m) {
            return shape_err("merge_forward", format!("column counts {:?} vs {m}", t.shape()));
        }
    }
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
    let s = tape.constant(spatial.clone());
    let s = tape.transpose(s)?;
    let t = match temporal {
        Some(t) => {
            let v = tape.constant(t.clone());
            Some(tape.transpose(v)?)
        }
        None => None,
    };
    let out = model.merge_on_tape(&mut tape, &params, t, s)?;
    Ok(tape.value(out).clone())
}

/// Network output for `z` (no normalization applied), `S×m`.
pub fn defm_forward(z: &SeriesMatrix, model: &DefmModel) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.forward_on_tape(&mut tape, z)?;
    Ok(tape.value(vars.output).clone())
}

const CHECKPOINT_FORMAT: &str = "defm-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// JSON checkpoint: `{format, version, config, target, normalizer, params: [{name, shape, data}]}`.
///
/// Floats are written in shortest round-trip form, so a load reproduces the
/// parameters bit for bit.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    target: usize,
    normalizer: Normalizer,
    params: Vec<NamedArray>,
}

impl DefmModel {
    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            target: self.target,
            normalizer: self.normalizer.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, p)| NamedArray {
                    name: name.clone(),
                    shape: p.shape().to_vec(),
                    data: p.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(DefmError::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let mut model = Self::new(ck.config)?;
        if ck.params.len() != model.params.len() {
            return Err(DefmError::Config(format!(
                "checkpoint holds {} arrays, architecture needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for (k, arr) in ck.params.into_iter().enumerate() {
            if arr.name != model.names[k] || arr.shape != model.params[k].shape() {
                return Err(DefmError::Config(format!(
                    "checkpoint array {} {:?} does not match {} {:?}",
                    arr.name,
                    arr.shape,
                    model.names[k],
                    model.params[k].shape()
                )));
            }
            model.params[k] = Tensor::new(arr.shape, arr.data)?.with_grad();
        }
        if ck.normalizer.means.len() != model.config.n || ck.normalizer.stds.len() != model.config.n {
            return Err(DefmError::Config("normalizer length does not match n".into()));
        }
        if ck.target >= model.config.n {
            return Err(DefmError::Config(format!("target {} outside 0..{}", ck.target, model.config.n)));
        }
        model.normalizer = ck.normalizer;
        model.target = ck.target;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
