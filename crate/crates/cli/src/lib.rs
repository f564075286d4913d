//! `fincast` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 10-17 weight-file errors (see `WeightFileError::code`).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fincast_core::config::{freq_index, freq_seconds, RunConfig};
use fincast_core::data::clean::clean;
use fincast_core::data::eval::{evaluate, EvalOptions};
use fincast_core::data::ingest::ingest_csv;
use fincast_core::data::manifest::{split_bounds, DatasetManifest};
use fincast_core::data::synth::{regime_mixture, synth_generate, SynthKind, SynthParams};
use fincast_core::diagnostics::{composite_gradcheck, routing_by_label};
use fincast_core::error::FincastError;
use fincast_core::inference::forecast_multichannel;
use fincast_core::input::Series;
use fincast_core::trainer::{Trainer, TrainingSet};
use fincast_core::weights::load_weights;

#[derive(Parser, Debug)]
#[command(
    name = "fincast",
    version,
    about = "Sparse mixture-of-experts time-series forecaster"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Forecast every value column of a CSV file.
    Forecast(ForecastArgs),
    /// Score a checkpoint on the test split of a dataset directory.
    Eval(EvalArgs),
    /// Finite-difference check of the training objective's gradient.
    Gradcheck(GradcheckArgs),
    /// Expert-assignment breakdown of a checkpoint.
    Experts(ExpertsArgs),
    /// Write a synthetic series as CSV.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// dense_moe, mse_only or no_freq_embedding; repeatable or comma separated.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Frequency for files not listed in a manifest.
    #[arg(long, default_value = "daily")]
    freq: String,
    /// Continue from the checkpoint at --out.
    #[arg(long)]
    resume: bool,
    /// Stop (with a checkpoint) once this many steps are done in total.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Print a progress line every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value = "daily")]
    freq: String,
    /// Add one column per quantile level.
    #[arg(long)]
    quantiles: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 30, 60])]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    context: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "daily")]
    freq: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Args, Debug)]
struct ExpertsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; tokens are grouped by series.
    #[arg(long, conflicts_with = "regime_mixture")]
    data: Option<PathBuf>,
    /// Route a generated three-regime mixture with this many series per
    /// regime; tokens are grouped by regime.
    #[arg(long)]
    regime_mixture: Option<usize>,
    #[arg(long, default_value_t = 128)]
    context: usize,
    #[arg(long, default_value = "daily")]
    freq: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// sinusoid, trend, regime_ar or random_walk
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    /// Generator setting as key=value; repeatable.
    #[arg(long = "param")]
    params: Vec<String>,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(FincastError),
}

impl From<FincastError> for Failure {
    fn from(e: FincastError) -> Self {
        match e {
            FincastError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parse `argv` (program name first) and run the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let res = match cli.command {
        Command::Train(a) => train(a),
        Command::Forecast(a) => forecast(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Experts(a) => experts(a),
        Command::Synth(a) => synth(a),
    };
    match res {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `fincast --help` for usage");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            match e {
                FincastError::Weights(w) => w.code(),
                _ => 1,
            }
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_freq(name: &str) -> std::result::Result<usize, Failure> {
    freq_index(name).map_err(|e| usage(e.to_string()))
}

fn load_run(
    path: &Path,
    seed: Option<u64>,
    ablate: &[String],
) -> std::result::Result<RunConfig, Failure> {
    let mut run = RunConfig::load(path).map_err(|e| match e {
        FincastError::Io(io) => usage(format!("cannot read config {}: {io}", path.display())),
        other => usage(other.to_string()),
    })?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    for a in ablate.iter().filter(|a| !a.is_empty()) {
        run.ablations.set(a).map_err(|e| usage(e.to_string()))?;
    }
    run.validate()?;
    Ok(run)
}

fn write_out(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Runtime(e.into())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let run = load_run(&a.config, a.seed, &a.ablate)?;
    print!("{}", run.dump());
    let freq = parse_freq(&a.freq)?;
    let manifest = DatasetManifest::load(&a.data, freq)?;
    let model_cfg = run.effective_model();
    let window = run.train.context_len + model_cfg.h_out;
    let (series, report) = manifest.load_series(window)?;
    for (path, rows) in &report.bad_rows {
        eprintln!("{}: {} unparsable rows", path.display(), rows.len());
    }
    let train: Vec<Series> = series
        .into_iter()
        .filter_map(|mut s| {
            let (end, _) = split_bounds(s.len(), run.split);
            s.values.truncate(end);
            s.timestamps = None;
            (s.len() >= window).then_some(s)
        })
        .collect();
    let data = TrainingSet::new(train, run.train.context_len, model_cfg.h_out)?;
    let mut trainer = Trainer::from_run_config(&run)?.with_checkpoint(&a.out);
    if a.resume {
        trainer.resume(&a.out)?;
    }
    eprintln!(
        "training {} parameters on {} windows",
        trainer.model.num_params(),
        data.n_windows()
    );
    let stop = a
        .stop_after
        .unwrap_or(usize::MAX)
        .min(run.train.total_steps);
    while trainer.log.len() < stop {
        let row = trainer.step(&data)?;
        let done = trainer.log.len();
        if a.log_every > 0 && done.is_multiple_of(a.log_every) {
            eprintln!(
                "step {} total {:.5} point {:.5} lr {:.3e}",
                row.step, row.loss.total, row.loss.point, row.lr
            );
        }
        let every = run.train.checkpoint_every;
        if every > 0 && done.is_multiple_of(every) {
            trainer.save_checkpoint(&a.out)?;
        }
    }
    trainer.save_checkpoint(&a.out)?;
    if trainer.state.skipped > 0 {
        eprintln!(
            "{} steps skipped for non-finite gradients",
            trainer.state.skipped
        );
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn quantile_label(q: f64) -> String {
    let pct = (q * 100.0 * 1e6).round() / 1e6;
    format!("q{pct}")
}

fn forecast(a: ForecastArgs) -> CmdResult {
    if a.horizon == 0 {
        return Err(usage("--horizon must be >= 1"));
    }
    let freq = parse_freq(&a.freq)?;
    let model = load_weights(&a.ckpt, None)?;
    let ing = ingest_csv(&a.input, freq)?;
    if !ing.bad_rows.is_empty() {
        eprintln!("{} unparsable rows skipped", ing.bad_rows.len());
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for raw in &ing.series {
        let c = clean(raw, 1);
        match c.into_series()? {
            Some(s) => {
                names.push(s.name);
                values.push(s.values);
            }
            None => eprintln!("column {} has no usable values", raw.name),
        }
    }
    if values.is_empty() {
        return Err(Failure::Runtime(FincastError::Data(
            "no usable value columns".into(),
        )));
    }
    // equal-length channels go through together; others one at a time
    let mut paths = Vec::with_capacity(values.len());
    if values.iter().all(|v| v.len() == values[0].len()) {
        let refs: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        paths = forecast_multichannel(&model, &refs, freq, a.horizon)?;
    } else {
        for v in &values {
            paths.extend(forecast_multichannel(&model, &[v], freq, a.horizon)?);
        }
    }
    let levels = &model.config().quantiles;
    let mut s = String::from("channel,step,point");
    if a.quantiles {
        for &q in levels {
            let _ = write!(s, ",{}", quantile_label(q));
        }
    }
    s.push('\n');
    for (name, p) in names.iter().zip(&paths) {
        for t in 0..a.horizon {
            let _ = write!(s, "{name},{},{}", t + 1, p.point[t]);
            if a.quantiles {
                for q in &p.quantiles {
                    let _ = write!(s, ",{}", q[t]);
                }
            }
            s.push('\n');
        }
        if a.quantiles && levels.len() > 1 {
            eprintln!("{name}: quantile crossing rate {:.4}", p.crossing_rate());
        }
    }
    write_out(a.out.as_deref(), &s)
}

fn eval(a: EvalArgs) -> CmdResult {
    if a.horizons.is_empty() || a.horizons.contains(&0) {
        return Err(usage("--horizons must list positive integers"));
    }
    if a.context == 0 || a.stride == 0 {
        return Err(usage("--context and --stride must be >= 1"));
    }
    let freq = parse_freq(&a.freq)?;
    let model = load_weights(&a.ckpt, None)?;
    let manifest = DatasetManifest::load(&a.data, freq)?;
    let max_h = *a.horizons.iter().max().expect("non-empty");
    let (series, _) = manifest.load_series(a.context + max_h)?;
    let mut datasets: Vec<(String, Vec<Series>)> = Vec::new();
    for mut s in series {
        let (_, val_end) = split_bounds(s.len(), manifest.split);
        // test windows may look back into validation data for context
        let start = val_end.saturating_sub(a.context);
        s.values.drain(..start);
        s.timestamps = None;
        let dataset = s.name.split('/').next().unwrap_or("").to_string();
        match datasets.iter_mut().find(|d| d.0 == dataset) {
            Some(d) => d.1.push(s),
            None => datasets.push((dataset, vec![s])),
        }
    }
    let opts = EvalOptions {
        context_len: a.context,
        horizons: a.horizons.clone(),
        stride: a.stride,
        baselines: true,
    };
    let report = evaluate(&model, &datasets, &opts)?;
    write_out(a.out.as_deref(), &report.to_csv())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.coords == 0 || !(a.step > 0.0) || !(a.tol > 0.0) {
        return Err(usage("--coords, --step and --tol must be positive"));
    }
    let run = load_run(&a.config, a.seed, &a.ablate)?;
    let rep = composite_gradcheck(&run, a.coords, run.train.seed, a.step, a.tol)?;
    println!("coords_checked={}", rep.coords.len() - rep.kinks_skipped);
    println!("kinks_skipped={}", rep.kinks_skipped);
    println!("max_rel_err={:e}", rep.max_rel_err);
    println!("tol={:e}", rep.tol);
    println!("{}", if rep.passed { "PASS" } else { "FAIL" });
    if rep.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(FincastError::InvalidArgument(format!(
            "gradient check failed: max relative error {:e}",
            rep.max_rel_err
        ))))
    }
}

fn experts(a: ExpertsArgs) -> CmdResult {
    let model = load_weights(&a.ckpt, None)?;
    let ctx = a.context;
    let series: Vec<(Series, Vec<usize>)> = match (&a.data, a.regime_mixture) {
        (Some(dir), None) => {
            let freq = parse_freq(&a.freq)?;
            let (series, _) = DatasetManifest::load(dir, freq)?.load_series(ctx)?;
            series
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let labels = vec![i; s.len()];
                    (s, labels)
                })
                .collect()
        }
        (None, Some(n)) => regime_mixture(n, (4 * ctx).max(ctx + 1), a.seed)?
            .into_iter()
            .map(|s| {
                let labels = s.regimes.clone().unwrap_or_else(|| vec![0; s.len()]);
                (s, labels)
            })
            .collect(),
        _ => return Err(usage("give exactly one of --data or --regime-mixture")),
    };
    let mut contexts = Vec::new();
    for (s, labels) in &series {
        if s.len() < ctx {
            continue;
        }
        for st in (0..=s.len() - ctx).step_by(ctx.max(1)) {
            contexts.push((&s.values[st..st + ctx], s.freq_index, &labels[st..st + ctx]));
        }
    }
    if contexts.is_empty() {
        return Err(Failure::Runtime(FincastError::Data(format!(
            "no series with at least {ctx} points"
        ))));
    }
    let layers = routing_by_label(&model, &contexts, 64)?;
    let mut out = String::from("layer,group,expert,fraction\n");
    for (l, layer) in layers.iter().enumerate() {
        for (e, f) in layer.overall.iter().enumerate() {
            let _ = writeln!(out, "{l},all,{e},{f}");
        }
        for (g, dist) in &layer.by_label {
            for (e, f) in dist.iter().enumerate() {
                let _ = writeln!(out, "{l},{g},{e},{f}");
            }
        }
    }
    print!("{out}");
    for (l, layer) in layers.iter().enumerate() {
        let max = layer.overall.iter().fold(0.0f64, |m, &x| m.max(x));
        eprintln!(
            "layer {l}: max group TV distance {:.4}, max expert share {:.4}",
            layer.max_tv, max
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let kind = SynthKind::parse(&a.kind).map_err(|e| usage(e.to_string()))?;
    let mut p = SynthParams::default();
    for kv in &a.params {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--param expects key=value, got {kv:?}")))?;
        p.set(k.trim(), v).map_err(|e| usage(e.to_string()))?;
    }
    if a.channels == 0 {
        return Err(usage("--channels must be >= 1"));
    }
    let series = (0..a.channels as u64)
        .map(|c| synth_generate(kind, &p, a.seed.wrapping_add(c)))
        .collect::<fincast_core::Result<Vec<_>>>()?;
    let step = freq_seconds(p.freq_index);
    let mut s = String::from("timestamp");
    for (c, _) in series.iter().enumerate() {
        let _ = write!(s, ",x{c}");
    }
    s.push('\n');
    for t in 0..p.len {
        let _ = write!(s, "{}", t as i64 * step);
        for ser in &series {
            let _ = write!(s, ",{}", ser.values[t]);
        }
        s.push('\n');
    }
    std::fs::write(&a.out, s).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(labels) = series[0].regimes.as_ref() {
        let mut l = String::from("timestamp,regime\n");
        for (t, r) in labels.iter().enumerate() {
            let _ = writeln!(l, "{},{r}", t as i64 * step);
        }
        // not .csv, so dataset directories do not pick it up as data
        std::fs::write(a.out.with_extension("regimes"), l)
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}
