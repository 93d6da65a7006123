//! `tim`: synthetic data, training, evaluation, detection and diagnostics
//! for the interval-conditioned audio-visual transformer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tim_core::checkpoint::{load_checkpoint, save_checkpoint};
use tim_core::config::{Mode, RunConfig};
use tim_core::data::{enumerate_windows, recognition_window, Dataset};
use tim_core::detection::{build_pyramid, detection_window};
use tim_core::evaluation::{evaluate_detection, evaluate_recognition, shift_scale_analysis};
use tim_core::gradcheck::{check_objective, tiny_run, GRAD_FLOOR};
use tim_core::interval::NormalizedInterval;
use tim_core::io::{load_dataset, save_dataset, write_atomic, write_detections, JsonlWriter};
use tim_core::model::TimModel;
use tim_core::synth::generate_synthetic;
use tim_core::train::{detection_sets, init_rng, train, EpochMetrics, TrainHooks};
use tim_core::{Result, TimError};

#[derive(Parser)]
#[command(name = "tim", version, about = "Interval-conditioned audio-visual transformer on feature streams")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; keys override the preset, unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start from the paper-scale preset instead of the desk preset.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Recognition,
    Detection,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Recognition => Mode::Recognition,
            ModeArg::Detection => Mode::Detection,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// The videos held out for validation.
    HeldOut,
    Train,
    All,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory or manifest. Without it the configured synthetic set is generated.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "held-out")]
    split: Split,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Synth,
    /// Train a model; writes checkpoint, step log and report into --out.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print top-1 and per-class accuracy, or detection mAP.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run detection and write detections.jsonl into --out.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Accuracy under shifted and scaled queries, written as CSV.
    AnalyzeShift {
        #[command(flatten)]
        model: ModelArgs,
        /// Label set as `modality/set`; defaults to the first.
        #[arg(long)]
        label_set: Option<String>,
    },
    /// Finite-difference check of the full objective on a tiny model.
    GradCheck {
        /// Check at most this many entries per parameter tensor.
        #[arg(long)]
        max_per_tensor: Option<usize>,
    },
    /// Interval encodings on a grid of window-normalized intervals, as CSV.
    InspectEncodings {
        /// Without a checkpoint a freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid resolution: intervals [i/n, j/n] for 0 <= i < j <= n.
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Attention weights of one window, as CSV.
    DumpAttention {
        #[command(flatten)]
        model: ModelArgs,
        /// Video id; defaults to the first video of the split.
        #[arg(long)]
        video: Option<String>,
        /// Window start in seconds; defaults to the first window.
        #[arg(long)]
        window_start: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| TimError::invalid(format!("TIM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| TimError::invalid(e.to_string()))
}

/// Preset (or checkpoint run), then the config file, then flags.
fn resolve(g: &Global, base: Option<RunConfig>) -> Result<RunConfig> {
    let mode = g.mode.map(Mode::from);
    let mut run = match base {
        Some(r) => r,
        None if g.paper_scale && mode == Some(Mode::Detection) => RunConfig::paper_detection(),
        None if g.paper_scale => RunConfig::paper(),
        None => RunConfig::desk(),
    };
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| TimError::io(path, e))?;
        let overrides: Value = serde_json::from_str(&text).map_err(|e| TimError::format(path.display().to_string(), e.to_string()))?;
        run = RunConfig::merged(&run, &overrides)?;
    }
    if let Some(seed) = g.seed {
        run.train.seed = seed;
    }
    if let Some(m) = mode {
        run.train.mode = m;
    }
    run.validate()?;
    Ok(run)
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| TimError::invalid("--out is required for this command"))
}

fn echo_config(dir: &Path, command: &str, run: &RunConfig) -> Result<()> {
    let body = json!({ "command": command, "config": run });
    write_atomic(&dir.join("run_config.json"), &pretty(&body)?)
}

fn pretty(v: &Value) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn dataset(args: &DataArgs, run: &RunConfig) -> Result<Dataset> {
    let data = match &args.data {
        Some(p) => load_dataset(p)?,
        None => generate_synthetic(&run.synth, &run.model, run.train.seed)?,
    };
    data.validate(&run.model)?;
    Ok(data)
}

fn videos(data: &Dataset, run: &RunConfig, split: Split) -> Vec<usize> {
    let (train, held) = data.split(run.train.validation_fraction);
    match split {
        Split::HeldOut => held,
        Split::Train => train,
        Split::All => (0..data.videos.len()).collect(),
    }
}

/// Loads a checkpoint and resolves the run it was trained with.
fn restore(g: &Global, path: &Path) -> Result<(TimModel, RunConfig)> {
    let (model, header) = load_checkpoint(path)?;
    let stored = if header.run.is_null() {
        None
    } else {
        Some(serde_json::from_value(header.run).map_err(|e| TimError::format("checkpoint run config", e.to_string()))?)
    };
    let mut run = resolve(g, stored)?;
    run.model = model.config.clone();
    Ok((model, run))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => cmd_synth(g),
        Command::Train { data } => cmd_train(g, data),
        Command::Evaluate { model } => cmd_evaluate(g, model),
        Command::Detect { model } => cmd_detect(g, model),
        Command::AnalyzeShift { model, label_set } => cmd_analyze_shift(g, model, label_set.as_deref()),
        Command::GradCheck { max_per_tensor } => cmd_grad_check(g, *max_per_tensor),
        Command::InspectEncodings { checkpoint, steps } => cmd_inspect_encodings(g, checkpoint.as_deref(), *steps),
        Command::DumpAttention { model, video, window_start } => cmd_dump_attention(g, model, video.as_deref(), *window_start),
    }
}

fn cmd_synth(g: &Global) -> Result<()> {
    let run = resolve(g, None)?;
    let dir = out_dir(g)?;
    let data = generate_synthetic(&run.synth, &run.model, run.train.seed)?;
    save_dataset(dir, &data)?;
    echo_config(dir, "synth", &run)?;
    let features: usize = data.videos.iter().flat_map(|v| v.streams.values()).map(|s| s.len()).sum();
    println!(
        "wrote {} videos, {} events, {features} feature vectors to {}",
        data.videos.len(),
        data.annotations.events.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(g: &Global, args: &DataArgs) -> Result<()> {
    let run = resolve(g, None)?;
    let dir = out_dir(g)?;
    let data = dataset(args, &run)?;
    let (train_videos, val_videos) = data.split(run.train.validation_fraction);
    let mut model = TimModel::new(run.model.clone(), &mut init_rng(run.train.seed))?;

    let log_path = dir.join("train_log.jsonl");
    let partial = dir.join("train_log.jsonl.partial");
    let mut log = JsonlWriter::create(&partial)?;
    let mut progress = |m: &EpochMetrics| {
        let score = m.score.map_or("-".to_string(), |s| format!("{s:.4}"));
        eprintln!("epoch {:>3}  loss {:.4}  validation {score}", m.epoch, m.train_loss);
    };
    let result = train(
        &mut model,
        &data,
        &train_videos,
        &val_videos,
        &run,
        TrainHooks {
            log: Some(&mut log),
            on_epoch: Some(&mut progress),
        },
    );
    drop(log);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            let _ = std::fs::remove_file(&partial);
            return Err(e);
        }
    };
    let config = serde_json::to_value(&run)?;
    save_checkpoint(&dir.join("checkpoint.timc"), &model, config.clone())?;
    write_atomic(&dir.join("train_report.json"), &pretty(&json!({ "config": config, "report": report }))?)?;
    std::fs::rename(&partial, &log_path).map_err(|e| TimError::io(&log_path, e))?;
    echo_config(dir, "train", &run)?;
    println!(
        "trained {} steps over {} windows; selected epoch {}",
        report.steps,
        report.train_windows,
        report.selected_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(())
}

fn cmd_evaluate(g: &Global, args: &ModelArgs) -> Result<()> {
    let (model, run) = restore(g, &args.checkpoint)?;
    let data = dataset(&args.data, &run)?;
    let vids = videos(&data, &run, args.split);
    let summary = match run.train.mode {
        Mode::Recognition => {
            let report = evaluate_recognition(&model, &data, &vids, &run.window)?;
            for ls in &report.label_sets {
                println!("{:<20} top-1 {:.4}  per-class {:.4}  queries {}", ls.label_set, ls.top1, ls.per_class, ls.count);
            }
            json!({ "label_sets": report.label_sets })
        }
        Mode::Detection => {
            let sets = detection_sets(&run, &model)?;
            let (dets, map) = evaluate_detection(&model, &data, &vids, &run.window, &run.pyramid, &sets)?;
            for (t, m) in map.thresholds.iter().zip(&map.map) {
                println!("mAP@{t:.1} {m:.4}");
            }
            println!("average {:.4} over {} classes, {} detections", map.average, map.classes, dets.len());
            json!({ "map": map })
        }
    };
    if let Some(dir) = &g.out {
        let body = json!({ "config": run, "checkpoint": args.checkpoint, "videos": vids.len(), "metrics": summary });
        write_atomic(&dir.join("evaluation.json"), &pretty(&body)?)?;
        echo_config(dir, "evaluate", &run)?;
    }
    Ok(())
}

fn cmd_detect(g: &Global, args: &ModelArgs) -> Result<()> {
    let (model, mut run) = restore(g, &args.checkpoint)?;
    run.train.mode = Mode::Detection;
    let dir = out_dir(g)?;
    let data = dataset(&args.data, &run)?;
    let vids = videos(&data, &run, args.split);
    let sets = detection_sets(&run, &model)?;
    let (dets, map) = evaluate_detection(&model, &data, &vids, &run.window, &run.pyramid, &sets)?;
    write_detections(&dir.join("detections.jsonl"), &dets)?;
    echo_config(dir, "detect", &run)?;
    println!("{} detections over {} videos; mAP average {:.4}", dets.len(), vids.len(), map.average);
    Ok(())
}

fn cmd_analyze_shift(g: &Global, args: &ModelArgs, label_set: Option<&str>) -> Result<()> {
    let (model, run) = restore(g, &args.checkpoint)?;
    let dir = out_dir(g)?;
    let data = dataset(&args.data, &run)?;
    let vids = videos(&data, &run, args.split);
    let set = match label_set {
        None => 0,
        Some(name) => model
            .label_sets()
            .iter()
            .position(|s| s.qualified() == name)
            .ok_or_else(|| TimError::invalid(format!("unknown label set {name}")))?,
    };
    let points = shift_scale_analysis(&model, &data, &vids, &run.window, &run.analysis, set)?;
    let mut csv = String::from("kind,value,top1,top1_short,top1_long,count\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for p in &points {
        writeln!(csv, "{},{},{},{},{},{}", p.kind, p.value, p.top1, opt(p.top1_short), opt(p.top1_long), p.count).expect("string write");
    }
    write_atomic(&dir.join("shift_curve.csv"), csv.as_bytes())?;
    echo_config(dir, "analyze-shift", &run)?;
    for p in points.iter().filter(|p| p.kind == "shift") {
        println!("shift {:+.2} s  top-1 {:.4}", p.value, p.top1);
    }
    Ok(())
}

fn cmd_grad_check(g: &Global, max_per_tensor: Option<usize>) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    let modes = match g.mode {
        Some(m) => vec![Mode::from(m)],
        None => vec![Mode::Recognition, Mode::Detection],
    };
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for mode in modes {
        let mut run = tiny_run(mode);
        if let Some(path) = &g.config {
            let text = std::fs::read_to_string(path).map_err(|e| TimError::io(path, e))?;
            let overrides: Value = serde_json::from_str(&text).map_err(|e| TimError::format(path.display().to_string(), e.to_string()))?;
            run = RunConfig::merged(&run, &overrides)?;
        }
        let report = check_objective(&run, seed, max_per_tensor)?;
        println!("{mode:?}: max relative error {:.3e} over {} entries", report.max_rel_error, report.checked);
        worst = worst.max(report.max_rel_error);
        rows.push(json!({ "mode": mode, "config": run, "report": report }));
    }
    if let Some(dir) = &g.out {
        write_atomic(&dir.join("grad_check.json"), &pretty(&json!({ "seed": seed, "floor": GRAD_FLOOR, "checks": rows }))?)?;
    }
    if worst > 1e-4 {
        return Err(TimError::invalid(format!("gradient check failed: {worst:.3e} exceeds 1e-4")));
    }
    println!("passed");
    Ok(())
}

fn cmd_inspect_encodings(g: &Global, checkpoint: Option<&Path>, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(TimError::invalid("--steps must be positive"));
    }
    let (model, run) = match checkpoint {
        Some(p) => restore(g, p)?,
        None => {
            let run = resolve(g, None)?;
            (TimModel::new(run.model.clone(), &mut init_rng(run.train.seed))?, run)
        }
    };
    let dir = out_dir(g)?;
    let n = steps as f64;
    let intervals: Vec<NormalizedInterval> = (0..steps)
        .flat_map(|i| (i + 1..=steps).map(move |j| NormalizedInterval::new(i as f64 / n, j as f64 / n)))
        .collect();
    let enc = model.encode_intervals(&intervals);
    let mut csv = String::from("interval_start,interval_end");
    for d in 0..enc.ncols() {
        write!(csv, ",dim_{d}").expect("string write");
    }
    csv.push('\n');
    for (t, row) in intervals.iter().zip(enc.outer_iter()) {
        write!(csv, "{},{}", t.start, t.end).expect("string write");
        for x in row {
            write!(csv, ",{x}").expect("string write");
        }
        csv.push('\n');
    }
    write_atomic(&dir.join("interval_encodings.csv"), csv.as_bytes())?;
    echo_config(dir, "inspect-encodings", &run)?;
    println!("{} intervals × {} dims", intervals.len(), enc.ncols());
    Ok(())
}

fn cmd_dump_attention(g: &Global, args: &ModelArgs, video: Option<&str>, window_start: Option<f64>) -> Result<()> {
    let (model, run) = restore(g, &args.checkpoint)?;
    let dir = out_dir(g)?;
    let data = dataset(&args.data, &run)?;
    let vi = match video {
        Some(id) => data
            .videos
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| TimError::invalid(format!("unknown video {id}")))?,
        None => *videos(&data, &run, args.split)
            .first()
            .ok_or_else(|| TimError::invalid("the split has no videos"))?,
    };
    let starts = enumerate_windows(data.videos[vi].length_s, &run.window)?;
    let ws = match window_start {
        None => starts[0],
        Some(s) => *starts
            .iter()
            .find(|&&w| (w - s).abs() < 1e-9)
            .ok_or_else(|| TimError::invalid(format!("no window starts at {s} s; starts are {starts:?}")))?,
    };
    let events = data.events_by_video();
    let sample = match run.train.mode {
        Mode::Recognition => recognition_window(&data, vi, &events[vi], ws, &run.window, &model.config),
        Mode::Detection => {
            let sets = detection_sets(&run, &model)?;
            let pyramid = build_pyramid(run.window.window_s, &run.pyramid);
            detection_window(&data, vi, &events[vi], ws, &run.window, &model.config, &pyramid, &run.pyramid, &sets)
        }
    };
    let entries = model.attention_dump(&sample)?;
    let mut csv = String::from("layer,head,token,token_kind,token_tag,token_start,token_end,key,key_kind,key_tag,key_start,key_end,weight\n");
    for e in &entries {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.layer,
            e.head,
            e.token,
            e.token_kind,
            e.token_tag,
            e.token_interval.start,
            e.token_interval.end,
            e.key,
            e.key_kind,
            e.key_tag,
            e.key_interval.start,
            e.key_interval.end,
            e.weight
        )
        .expect("string write");
    }
    write_atomic(&dir.join("attention.csv"), csv.as_bytes())?;
    echo_config(dir, "dump-attention", &run)?;
    println!("{} weights for {} at {ws} s", entries.len(), data.videos[vi].id);
    Ok(())
}
