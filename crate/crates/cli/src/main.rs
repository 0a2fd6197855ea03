//! aeroop: generate synthetic pollution fields, train and evaluate the
//! operator models, and render forecasts and extreme-event reports.
//!
//! Every subcommand takes a JSON config file; unknown keys are rejected.
//! Exit codes: 0 success, 1 usage or config problems, 2 data or shape
//! problems, 3 numeric failures. AEROOP_THREADS caps worker threads.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use aeroop_core::data::{
    grid_index_of, make_windows, read_gsf, shuffle_split, write_gsf, write_point_csv, DataError,
    Normalizer, Series,
};
use aeroop_core::eval::{
    evaluate_rollout, extreme_events, point_series, rollout_table, write_pgm16,
};
use aeroop_core::model::{run_label, ModelConfig, OperatorModel};
use aeroop_core::synth;
use aeroop_core::tensor::TensorError;
use aeroop_core::train::{
    load_checkpoint, run_training, save_checkpoint, write_loss_csv, Adam, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "aeroop", version, about = "Neural-operator air quality forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic pollutant series and write it as GSF.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model on a GSF series and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint over held-out windows and print a table.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Roll a checkpoint forward and export point forecasts as CSV.
    Forecast {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank extreme events and render fields around the top one.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Failure categories mapped to process exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Failure {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Failure {
        match e {
            TrainError::Numeric(m) => Failure::Numeric(m),
            TrainError::Tensor(TensorError::NonFinite { context }) => Failure::Numeric(context),
            TrainError::Format(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Failure {
        match e {
            TensorError::NonFinite { context } => Failure::Numeric(context),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::init();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message());
        return ExitCode::from(f.code());
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::GenData { config } => cmd_gen_data(&config),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval { config } => cmd_eval(&config),
        Cmd::Forecast { config } => cmd_forecast(&config),
        Cmd::Report { config } => cmd_report(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(raw) = std::env::var("AEROOP_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("AEROOP_THREADS must be a positive integer, got {raw:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
        log::info!("worker threads capped at {n}");
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    preset: String,
    hours: usize,
    out: PathBuf,
}

fn cmd_gen_data(config: &Path) -> Result<(), Failure> {
    let cfg: GenDataConfig = load_config(config)?;
    let sim = match cfg.preset.as_str() {
        "urban-toy" => synth::urban_toy(),
        other => return Err(Failure::Usage(format!("unknown preset {other:?} (try \"urban-toy\")"))),
    };
    if cfg.hours == 0 {
        return Err(Failure::Usage("hours must be positive".into()));
    }
    let series = synth::generate(&sim, cfg.hours)?;
    write_gsf(&cfg.out, &series)?;
    println!(
        "wrote {} frames of {}x{} to {}",
        series.t(),
        series.h,
        series.w,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSpec {
    n_train: usize,
    n_val: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    data: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
    split: SplitSpec,
    checkpoint_out: PathBuf,
    #[serde(default)]
    loss_csv: Option<PathBuf>,
    #[serde(default)]
    resume: Option<PathBuf>,
}

/// Windows, split and train-window normalizer shared by train and eval.
fn prepare_windows(
    series: &Series,
    k: usize,
    n: usize,
    split: &SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>, Normalizer), Failure> {
    let windows = make_windows(series.t(), k, n)?;
    let (train_idx, val_idx) = shuffle_split(windows.len(), split.n_train, split.n_val, split.seed)?;
    let train_w: Vec<usize> = train_idx.iter().map(|&i| windows[i]).collect();
    let val_w: Vec<usize> = val_idx.iter().map(|&i| windows[i]).collect();
    let nrm = Normalizer::fit_windows(series, &train_w, k, n)?;
    Ok((train_w, val_w, nrm))
}

fn cmd_train(config: &Path) -> Result<(), Failure> {
    let cfg: TrainCmdConfig = load_config(config)?;
    cfg.train
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let series = read_gsf(&cfg.data)?;

    let (mut model, mut adam, start_epoch) = match &cfg.resume {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.model.config != cfg.model {
                return Err(Failure::Usage(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            log::info!("resuming from {} at epoch {}", path.display(), loaded.epoch);
            (loaded.model, loaded.adam, loaded.epoch)
        }
        None => {
            let model = OperatorModel::new(cfg.model.clone(), series.h, series.w, cfg.train.seed)?;
            let adam = Adam::new(model.params());
            (model, adam, 0)
        }
    };

    let k = cfg.model.history_k;
    let n = cfg.train.rollout_steps;
    let (train_w, val_w, nrm) = prepare_windows(&series, k, n, &cfg.split)?;
    let normalized = nrm.apply_series(&series)?;

    let diag = cfg.checkpoint_out.with_extension("diag.aoc");
    let logs = run_training(
        &mut model,
        &mut adam,
        &normalized,
        &train_w,
        &val_w,
        &cfg.train,
        start_epoch,
        Some(nrm),
        Some(&diag),
        |l| {
            log::info!("epoch {:>4}  train {:.6}  val {:.6}", l.epoch, l.train_loss, l.val_loss);
        },
    )
    .map_err(|e| {
        if diag.exists() {
            eprintln!("diagnostic checkpoint written to {}", diag.display());
        }
        Failure::from(e)
    })?;

    save_checkpoint(&cfg.checkpoint_out, &model, &adam, &cfg.train, Some(nrm), cfg.train.epochs)?;
    if let Some(csv) = &cfg.loss_csv {
        write_loss_csv(csv, &logs)?;
    }
    let last = logs.last();
    println!(
        "trained {} for {} epochs; final train {:.6}, val {:.6}; checkpoint {}",
        run_label(cfg.model.flavor, n),
        cfg.train.epochs - start_epoch,
        last.map(|l| l.train_loss).unwrap_or(f64::NAN),
        last.map(|l| l.val_loss).unwrap_or(f64::NAN),
        cfg.checkpoint_out.display()
    );
    Ok(())
}

fn default_metric() -> String {
    "rl2".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalCmdConfig {
    data: PathBuf,
    checkpoint: PathBuf,
    split: SplitSpec,
    rollout_steps: usize,
    #[serde(default = "default_metric")]
    metric: String,
    #[serde(default)]
    table_out: Option<PathBuf>,
    #[serde(default)]
    label: Option<String>,
}

fn cmd_eval(config: &Path) -> Result<(), Failure> {
    let cfg: EvalCmdConfig = load_config(config)?;
    if cfg.rollout_steps == 0 {
        return Err(Failure::Usage("rollout_steps must be positive".into()));
    }
    let loaded = load_checkpoint(&cfg.checkpoint)?;
    let nrm = loaded
        .normalizer
        .ok_or_else(|| Failure::Usage("checkpoint carries no normalizer; cannot evaluate raw data".into()))?;
    let series = read_gsf(&cfg.data)?;
    let k = loaded.model.config.history_k;
    let (_, val_w, _) = prepare_windows(&series, k, cfg.rollout_steps, &cfg.split)?;
    if val_w.is_empty() {
        return Err(Failure::Usage("split leaves no validation windows".into()));
    }
    let normalized = nrm.apply_series(&series)?;

    let metrics = evaluate_rollout(&loaded.model, &normalized, &val_w, cfg.rollout_steps)?;
    // The (n) in the run label is the training loss horizon, not the
    // evaluation horizon, so it comes from the checkpoint.
    let label = cfg
        .label
        .clone()
        .unwrap_or_else(|| run_label(loaded.model.config.flavor, loaded.train.rollout_steps));
    let table = rollout_table(
        format!("{} over {} validation windows (normalized units)", cfg.metric, val_w.len()),
        &cfg.metric,
        &[(label, &metrics[..])],
    )?;
    let text = table.render();
    print!("{text}");
    if let Some(out) = &cfg.table_out {
        std::fs::write(out, &text).map_err(|e| Failure::Data(format!("write {}: {e}", out.display())))?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointSpec {
    #[serde(default)]
    i: Option<usize>,
    #[serde(default)]
    j: Option<usize>,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ForecastCmdConfig {
    data: PathBuf,
    checkpoint: PathBuf,
    window_start: usize,
    steps: usize,
    point: PointSpec,
    pred_csv: PathBuf,
    actual_csv: PathBuf,
}

fn resolve_point(series: &Series, p: &PointSpec) -> Result<(usize, usize), Failure> {
    match (p.i, p.j, p.lat, p.lon) {
        (Some(i), Some(j), None, None) => Ok((i, j)),
        (None, None, Some(lat), Some(lon)) => Ok(grid_index_of(series, lat, lon)?),
        _ => Err(Failure::Usage(
            "point needs either grid indices {i, j} or coordinates {lat, lon}".into(),
        )),
    }
}

fn cmd_forecast(config: &Path) -> Result<(), Failure> {
    let cfg: ForecastCmdConfig = load_config(config)?;
    if cfg.steps == 0 {
        return Err(Failure::Usage("steps must be positive".into()));
    }
    let loaded = load_checkpoint(&cfg.checkpoint)?;
    let nrm = loaded
        .normalizer
        .ok_or_else(|| Failure::Usage("checkpoint carries no normalizer".into()))?;
    let series = read_gsf(&cfg.data)?;
    let point = resolve_point(&series, &cfg.point)?;
    let normalized = nrm.apply_series(&series)?;
    let rows = point_series(&loaded.model, &normalized, &nrm, cfg.window_start, cfg.steps, point)?;

    let pred: Vec<(i64, f64)> = rows.iter().map(|&(ts, p, _)| (ts, p)).collect();
    let actual: Vec<(i64, f64)> = rows.iter().map(|&(ts, _, a)| (ts, a)).collect();
    write_point_csv(&cfg.pred_csv, &pred)?;
    write_point_csv(&cfg.actual_csv, &actual)?;
    println!(
        "forecast at grid point ({}, {}), physical units: {} steps to {} and {}",
        point.0,
        point.1,
        cfg.steps,
        cfg.pred_csv.display(),
        cfg.actual_csv.display()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportCmdConfig {
    data: PathBuf,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    top_k: usize,
    #[serde(default)]
    hours: Option<(u8, u8)>,
    out_dir: PathBuf,
}

fn cmd_report(config: &Path) -> Result<(), Failure> {
    let cfg: ReportCmdConfig = load_config(config)?;
    if cfg.top_k == 0 {
        return Err(Failure::Usage("top_k must be positive".into()));
    }
    let series = read_gsf(&cfg.data)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Data(format!("create {}: {e}", cfg.out_dir.display())))?;

    let events = extreme_events(&series, cfg.top_k, cfg.hours);
    if events.is_empty() {
        return Err(Failure::Data("no frames pass the hour filter".into()));
    }
    let mut listing = String::from("rank,frame,timestamp,total\n");
    for (rank, e) in events.iter().enumerate() {
        listing.push_str(&format!("{},{},{},{}\n", rank + 1, e.frame, e.timestamp, e.total));
    }
    let listing_path = cfg.out_dir.join("events.csv");
    std::fs::write(&listing_path, &listing)
        .map_err(|e| Failure::Data(format!("write {}: {e}", listing_path.display())))?;
    print!("{listing}");

    let top = events[0];
    let actual = series.frame(top.frame).to_vec();
    let vmin = actual.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = actual.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(vmax > vmin) {
        return Err(Failure::Numeric("top event frame is constant; nothing to render".into()));
    }
    write_pgm16(&cfg.out_dir.join("top-actual.pgm"), series.h, series.w, &actual, vmin, vmax)?;
    println!("top event frame {} rendered with vmin={vmin} vmax={vmax} (physical units)", top.frame);

    if let Some(ckpt) = &cfg.checkpoint {
        let loaded = load_checkpoint(ckpt)?;
        let nrm = loaded
            .normalizer
            .ok_or_else(|| Failure::Usage("checkpoint carries no normalizer".into()))?;
        let k = loaded.model.config.history_k;
        if top.frame < k {
            return Err(Failure::Data(format!(
                "top event at frame {} has fewer than {k} history frames",
                top.frame
            )));
        }
        let normalized = nrm.apply_series(&series)?;
        let hist = normalized.stack(top.frame - k, k)?;
        let pred_norm = loaded.model.rollout(&hist, 1).map_err(TrainError::from)?;
        let pred: Vec<f64> = pred_norm.real_data().iter().map(|&v| nrm.invert(v)).collect();
        let err: Vec<f64> = pred.iter().zip(&actual).map(|(p, a)| (p - a).abs()).collect();
        write_pgm16(&cfg.out_dir.join("top-pred.pgm"), series.h, series.w, &pred, vmin, vmax)?;
        let emax = err.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-30);
        write_pgm16(&cfg.out_dir.join("top-abserr.pgm"), series.h, series.w, &err, 0.0, emax)?;
        println!("prediction and absolute error rendered, error range [0, {emax}]");
    }
    Ok(())
}
