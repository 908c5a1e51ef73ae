//! The five subcommands. Each one merges flags over the config file, pins
//! the derived seeds, and writes the effective config next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use defm_core::baselines::Method;
use defm_core::csvio::{read_series_file, write_series_file, SeriesTable};
use defm_core::embedding::EmbeddingConfig;
use defm_core::forecasting::{predict, predict_long_term_group, ForecastResult, LongTermPlan, RemainingSource};
use defm_core::lorenz::{add_noise, integrate_lorenz, NoiseSpec};
use defm_core::metrics::ScorePair;
use defm_core::model::DefmModel;
use defm_core::training::train;

use crate::bench::{run_benchmark, Setup};
use crate::config::{derived_seed, resolve_variable, root_seed, stream, RunConfig};
use crate::plot::{escape, render_svg, ForecastSeries};

#[derive(Debug, Parser)]
#[command(name = "defm", version, about = "Delay-embedding forecasts from short high-dimensional series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the coupled Lorenz ring and write it as a series CSV.
    Generate(GenerateArgs),
    /// Fit one window, forecast S-1 steps, score against held-out rows.
    TrainPredict(TrainPredictArgs),
    /// Chain forecasts by feeding predictions back into the window.
    LongTerm(LongTermArgs),
    /// Score all methods over sampled cases on a grid of settings.
    Benchmark(BenchmarkArgs),
    /// Draw forecast CSVs as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides DEFM_SEED and the file).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_fc: Option<f64>,
    /// Drop the temporal branch.
    #[arg(long)]
    pub no_temporal: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub oscillators: Option<usize>,
    /// Redraw rho every switch period.
    #[arg(long)]
    pub time_varying: bool,
    /// Measurement-noise variance.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WindowFlags {
    #[arg(long)]
    pub series: PathBuf,
    /// Target column, by name or zero-based index.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    /// First data row of the window.
    #[arg(long)]
    pub start: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainPredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub window: WindowFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct LongTermArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub window: WindowFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Extra variables forecast and fed back alongside the target.
    #[arg(long, value_delimiter = ',')]
    pub predicted: Option<Vec<String>>,
    /// Source of the other rows: observed or hold-last.
    #[arg(long)]
    pub remaining: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub m_values: Option<Vec<usize>>,
    #[arg(long)]
    pub s: Option<usize>,
    /// Comma-separated: DEFM, DEFM_NO_TEMPORAL, MA, HES, AR.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub noise: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Score table (one row per method, m, noise, fraction).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-case scores.
    #[arg(long)]
    pub cases_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Forecast CSVs written by train-predict or long-term.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Legend labels, one per input (defaults to file stems).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long, default_value = "forecast")]
    pub title: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::TrainPredict(a) => cmd_train_predict(&a),
        Command::LongTerm(a) => cmd_long_term(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.seed = root_seed(common.seed, cfg.seed)?;
    Ok(cfg)
}

fn finish_config(cfg: &mut RunConfig) -> Result<()> {
    cfg.resolve_seeds();
    cfg.validate()?;
    eprintln!("effective config:\n{}", cfg.to_toml()?);
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, t: &TrainFlags) {
    if let Some(e) = t.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = t.lr {
        cfg.train.lr = lr;
    }
    if let Some(l) = t.lambda_fc {
        cfg.train.lambda_fc = l;
    }
    if t.no_temporal {
        cfg.model.temporal = false;
    }
}

fn apply_window(cfg: &mut RunConfig, w: &WindowFlags) {
    if let Some(t) = &w.target {
        cfg.embedding.target = t.clone();
    }
    if let Some(m) = w.m {
        cfg.embedding.m = m;
    }
    if let Some(s) = w.s {
        cfg.embedding.s = s;
    }
    if let Some(st) = w.start {
        cfg.embedding.start = st;
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn effective(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(s) = a.samples {
        cfg.generate.samples = s;
    }
    if let Some(o) = a.oscillators {
        cfg.lorenz.oscillators = o;
    }
    if a.time_varying {
        cfg.generate.time_varying = true;
    }
    if let Some(v) = a.noise {
        cfg.generate.noise_variance = v;
    }
    finish_config(&mut cfg)?;
    let duration = cfg.generate.samples as f64 * cfg.lorenz.dt_sample;
    let schedule = cfg.generate.time_varying.then_some(&cfg.schedule);
    let clean = integrate_lorenz(&cfg.lorenz, duration, schedule)?;
    let noise_seed = derived_seed(cfg.seed, stream::NOISE);
    let series = add_noise(&clean, NoiseSpec { variance: cfg.generate.noise_variance }, noise_seed)?;
    write_series_file(&a.out, &series, 0.0).with_context(|| format!("writing {}", a.out.display()))?;
    let segments = match schedule {
        Some(s) => Some(s.segments(duration)?),
        None => None,
    };
    let meta = json!({
        "command": "generate",
        "config": effective(&cfg)?,
        "root_seed": cfg.seed,
        "noise_seed": noise_seed,
        "variables": series.n(),
        "samples": series.m(),
        "duration": duration,
        "segments": segments,
    });
    write(&sidecar(&a.out), &serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} ({} rows x {} variables)", a.out.display(), series.m(), series.n());
    Ok(())
}

struct Window {
    table: SeriesTable,
    target: usize,
    start: usize,
    m: usize,
    s: usize,
}

fn load_window(cfg: &RunConfig, path: &Path) -> Result<Window> {
    let table = read_series_file(path).with_context(|| format!("reading {}", path.display()))?;
    let target = resolve_variable(&cfg.embedding.target, &table.series.names)?;
    let (start, m, s) = (cfg.embedding.start, cfg.embedding.m, cfg.embedding.s);
    if start + m > table.series.m() {
        bail!("window rows {start}..{} exceed the {} rows available", start + m, table.series.m());
    }
    eprintln!("{}", EmbeddingConfig { s, target }.takens_note());
    Ok(Window { table, target, start, m, s })
}

fn fit(cfg: &RunConfig, w: &Window, target: usize) -> Result<(DefmModel, String)> {
    let known = w.table.series.window(w.start, w.m)?;
    let mc = cfg.model.model_config(known.n(), w.m, w.s, cfg.model_seed());
    let (model, report) = train(&known, target, &mc, &cfg.train)?;
    let best = report.best();
    eprintln!(
        "trained on {} in {:.1?}: best epoch {} total {:.3e} ({:?})",
        w.table.series.names[target], report.duration, best.epoch, best.total, report.stop
    );
    Ok((model, report.to_log_csv()))
}

fn score_json(score: &Option<ScorePair>) -> serde_json::Value {
    match score {
        Some(s) => json!({ "pcc": s.pcc, "rmse": s.rmse, "length": s.length }),
        None => serde_json::Value::Null,
    }
}

pub fn cmd_train_predict(a: &TrainPredictArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_window(&mut cfg, &a.window);
    apply_train(&mut cfg, &a.train);
    finish_config(&mut cfg)?;
    let w = load_window(&cfg, &a.window.series)?;
    let (model, log) = fit(&cfg, &w, w.target)?;
    let known = w.table.series.window(w.start, w.m)?;
    let mut result = predict(&known, &model)?;
    let horizon = w.s - 1;
    let truth_start = w.start + w.m;
    let mut notice = None;
    if truth_start + horizon <= w.table.series.m() {
        let truth = w.table.series.row(w.target)[truth_start..truth_start + horizon].to_vec();
        result = result.with_truth(&truth)?;
    } else {
        let msg = format!(
            "only {} rows after the window, {horizon} needed: metrics omitted",
            w.table.series.m() - truth_start
        );
        eprintln!("notice: {msg}");
        notice = Some(msg);
    }

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    model.save(&a.out_dir.join("model.json"))?;
    write(&a.out_dir.join("forecast.csv"), &result.to_csv(w.start))?;
    write(&a.out_dir.join("train_log.csv"), &log)?;
    let summary = json!({
        "command": "train-predict",
        "config": effective(&cfg)?,
        "series": a.window.series.display().to_string(),
        "target": w.table.series.names[w.target],
        "target_index": w.target,
        "fit_rmse": result.fit_rmse,
        "score": score_json(&result.score),
        "notice": notice,
    });
    write(&a.out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    match result.score {
        Some(s) => println!(
            "{} steps of {}: PCC {} RMSE {:.4}",
            horizon,
            w.table.series.names[w.target],
            s.pcc.map(|p| format!("{p:.4}")).unwrap_or_else(|| "undefined".into()),
            s.rmse
        ),
        None => println!("{horizon} steps of {} forecast (no truth)", w.table.series.names[w.target]),
    }
    Ok(())
}

pub fn cmd_long_term(a: &LongTermArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_window(&mut cfg, &a.window);
    apply_train(&mut cfg, &a.train);
    if let Some(r) = a.iterations {
        cfg.long_term.iterations = r;
    }
    if let Some(p) = &a.predicted {
        cfg.long_term.predicted_vars = p.clone();
    }
    if let Some(r) = &a.remaining {
        cfg.long_term.remaining = match r.as_str() {
            "observed" => RemainingSource::Observed,
            "hold-last" => RemainingSource::HoldLast,
            other => bail!("--remaining must be observed or hold-last, got {other}"),
        };
    }
    finish_config(&mut cfg)?;
    let w = load_window(&cfg, &a.window.series)?;
    let names = &w.table.series.names;
    let mut vars = vec![w.target];
    for v in &cfg.long_term.predicted_vars {
        let k = resolve_variable(v, names)?;
        if !vars.contains(&k) {
            vars.push(k);
        }
    }
    let span = w.s - 1;
    let r = cfg.long_term.iterations;
    let after = w.start + w.m;
    let available = w.table.series.m() - after;
    let ground = match cfg.long_term.remaining {
        RemainingSource::Observed if available < r * span => {
            bail!("observed remaining rows need {} rows after the window, {available} available", r * span)
        }
        RemainingSource::Observed => Some(w.table.series.window(after, r * span)?),
        RemainingSource::HoldLast => None,
    };
    let mut models = Vec::with_capacity(vars.len());
    let mut logs = String::new();
    for &v in &vars {
        let (model, log) = fit(&cfg, &w, v)?;
        let _ = write!(logs, "# {}\n{log}", names[v]);
        models.push(model);
    }
    let known = w.table.series.window(w.start, w.m)?;
    let plan = LongTermPlan {
        iterations: r,
        predicted_vars: vars.clone(),
        remaining: cfg.long_term.remaining,
    };
    let out = predict_long_term_group(&known, &models, &plan, ground.as_ref())?;

    let truth_len = available.min(out.forecasts.len());
    let truth = &w.table.series.row(w.target)[after..after + truth_len];
    let mut whole = ForecastResult {
        time_indices: (w.m..w.m + out.forecasts.len()).collect(),
        estimates: out.forecasts.clone(),
        spreads: out.windows.iter().flat_map(|f| f.spreads.iter().copied()).collect(),
        fit_rmse: out.windows[0].fit_rmse,
        truth: None,
        score: None,
    };
    if truth_len == out.forecasts.len() {
        whole = whole.with_truth(truth)?;
    }
    let mut windows_csv = String::from("window,first_index,pcc,rmse\n");
    let mut window_pcc = Vec::new();
    for (q, f) in out.windows.iter().enumerate() {
        let lo = q * span;
        let score = (lo + span <= truth_len)
            .then(|| ScorePair::score(&f.estimates, &truth[lo..lo + span]).ok())
            .flatten();
        let (p, e) = match score {
            Some(s) => {
                window_pcc.extend(s.pcc);
                (s.pcc.map(|v| v.to_string()).unwrap_or_default(), s.rmse.to_string())
            }
            None => (String::new(), String::new()),
        };
        let _ = writeln!(windows_csv, "{q},{},{p},{e}", w.start + f.time_indices[0]);
    }
    let mean_window_pcc = (!window_pcc.is_empty()).then(|| window_pcc.iter().sum::<f64>() / window_pcc.len() as f64);

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write(&a.out_dir.join("forecast.csv"), &whole.to_csv(w.start))?;
    write(&a.out_dir.join("windows.csv"), &windows_csv)?;
    write(&a.out_dir.join("train_log.csv"), &logs)?;
    let summary = json!({
        "command": "long-term",
        "config": effective(&cfg)?,
        "target": names[w.target],
        "predicted_vars": vars.iter().map(|&v| names[v].clone()).collect::<Vec<_>>(),
        "span": span,
        "iterations": r,
        "score": score_json(&whole.score),
        "mean_window_pcc": mean_window_pcc,
    });
    write(&a.out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} steps of {} in {r} windows of {span}: mean window PCC {}",
        out.forecasts.len(),
        names[w.target],
        mean_window_pcc.map(|p| format!("{p:.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_train(&mut cfg, &a.train);
    if let Some(v) = &a.m_values {
        cfg.benchmark.m_values = v.clone();
    }
    if let Some(s) = a.s {
        cfg.benchmark.s = s;
    }
    if let Some(ms) = &a.methods {
        cfg.benchmark.methods = ms
            .iter()
            .map(|m| Method::parse(m).with_context(|| format!("unknown method {m}")))
            .collect::<Result<_>>()?;
    }
    if let Some(c) = a.cases {
        cfg.benchmark.cases = c;
    }
    if let Some(n) = &a.noise {
        cfg.benchmark.noise_variances = n.clone();
    }
    if let Some(f) = &a.fractions {
        cfg.benchmark.fractions = f.clone();
    }
    finish_config(&mut cfg)?;
    let b = &cfg.benchmark;
    if b.s < 2 || b.m_values.iter().any(|&m| m < b.s) {
        bail!("infeasible grid: need s >= 2 and every m >= s");
    }
    let table = read_series_file(&a.series).with_context(|| format!("reading {}", a.series.display()))?;
    let longest = b.m_values.iter().max().copied().unwrap_or(0) + b.s - 1;
    if longest > table.series.m() {
        bail!("infeasible grid: windows need {longest} rows, series has {}", table.series.m());
    }
    let setup = Setup {
        arch: cfg.model.clone(),
        train: cfg.train.clone(),
        baselines: cfg.baselines.clone(),
        root_seed: cfg.seed,
    };
    let out = run_benchmark(&table.series, b, &setup, |line| eprintln!("{line}"))?;
    write(&a.out, &out.table_csv())?;
    if let Some(p) = &a.cases_out {
        write(p, &out.cases_csv())?;
    }
    let meta = json!({
        "command": "benchmark",
        "config": effective(&cfg)?,
        "series": a.series.display().to_string(),
    });
    write(&sidecar(&a.out), &serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} ({} rows)", a.out.display(), out.cells.len());
    Ok(())
}

pub fn cmd_plot(a: &PlotArgs) -> Result<()> {
    if let Some(l) = &a.labels {
        if l.len() != a.inputs.len() {
            bail!("{} labels for {} inputs", l.len(), a.inputs.len());
        }
    }
    let mut series = Vec::with_capacity(a.inputs.len());
    for (k, p) in a.inputs.iter().enumerate() {
        let mut s = ForecastSeries::from_file(p)?;
        if let Some(l) = &a.labels {
            s.label = l[k].clone();
        }
        series.push(s);
    }
    let mut svg = render_svg(&series, &a.title)?;
    let effective = json!({
        "command": "plot",
        "inputs": a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "labels": series.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
        "title": a.title,
    });
    let at = svg.find('\n').map_or(svg.len(), |k| k + 1);
    svg.insert_str(at, &format!("<desc>{}</desc>\n", escape(&effective.to_string())));
    write(&a.out, &svg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
