//! Command-line entry point: dataset generation, training, evaluation,
//! prediction dumps, pretraining and ablation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use vtloc::checkpoint::{load_model, save_model};
use vtloc::dataset::{load_dataset, write_synthetic};
use vtloc::predictions::write_jsonl;
use vtloc::report::write_report;
use vtloc_core::config::{LossKind, ModelConfig, PyramidStyle, Task, TextMode};
use vtloc_core::data::{
    generate_synthetic, sample_frames, SamplingMode, SourceVideo, SyntheticSpec,
};
use vtloc_core::pipeline::{
    evaluate_with_predictions, infer_dims, pretrain_multilabel, train, CurvePoint,
    EvalOptions, Model, PretrainClip, TrainConfig,
};
use vtloc_core::rng::Rng;

const OUT_ENV: &str = "VTLOC_OUT";

#[derive(Parser)]
#[command(name = "vtloc", version, about = "Temporal localization over video-text pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (annotations + features).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Dump decoded predictions as JSON lines.
    Predict(PredictArgs),
    /// Multi-label pretraining on trimmed clips cut from the dataset.
    Pretrain(TrainArgs),
    /// Run a config grid and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "tal")]
    task: String,
    #[arg(long, default_value_t = 50)]
    videos: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inclusive frame-count range, "lo,hi".
    #[arg(long, default_value = "128,128")]
    frames: String,
    /// Inclusive events-per-video range, "lo,hi".
    #[arg(long, default_value = "2,4")]
    events: String,
    /// Event length buckets, "lo-hi,lo-hi,...".
    #[arg(long, default_value = "3-7,10-15,36-56")]
    lengths: String,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Target background fraction; overrides the event-count range.
    #[arg(long)]
    bg_fraction: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    fps: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file mirroring the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set optim.steps=200.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    ensemble_prompts: bool,
    /// Override prompt templates ("..{label}.." strings, comma separated).
    #[arg(long, value_delimiter = ',')]
    templates: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated loss kinds: l1,iou,diou,l1+iou.
    #[arg(long, default_value = "l1")]
    losses: String,
    /// Comma-separated pyramid styles: vitdet,fpn,none.
    #[arg(long, default_value = "vitdet")]
    pyramids: String,
    /// Comma-separated head conv block counts.
    #[arg(long, default_value = "3")]
    head_blocks: String,
    /// Comma-separated text modes: cls-only,all-tokens,no-text.
    #[arg(long, default_value = "all-tokens")]
    text_modes: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

impl From<vtloc::FormatError> for CliError {
    fn from(e: vtloc::FormatError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<vtloc_core::pipeline::PipelineError> for CliError {
    fn from(e: vtloc_core::pipeline::PipelineError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

fn main() -> ExitCode {
    // Clap's default error exit code is 2; user errors here are 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn resolve_out(out: Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(dir) => dir,
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(command),
            None => PathBuf::from("out").join(command),
        },
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::user(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn parse_task(name: &str) -> Result<Task, CliError> {
    match name {
        "tal" => Ok(Task::Tal),
        "mr" => Ok(Task::Mr),
        "as" => Ok(Task::As),
        other => Err(CliError::user(format!("unknown task {other:?} (tal|mr|as)"))),
    }
}

fn parse_pair(text: &str, flag: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(CliError::user(format!("--{flag} expects \"lo,hi\", got {text:?}")));
    }
    let lo = parts[0].trim().parse().map_err(|_| CliError::user(format!("--{flag}: bad number {:?}", parts[0])))?;
    let hi = parts[1].trim().parse().map_err(|_| CliError::user(format!("--{flag}: bad number {:?}", parts[1])))?;
    if lo > hi {
        return Err(CliError::user(format!("--{flag}: lo {lo} exceeds hi {hi}")));
    }
    Ok((lo, hi))
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let task = parse_task(&args.task)?;
    let out = resolve_out(args.out, "gen-data")?;
    let frames = parse_pair(&args.frames, "frames")?;
    let events = parse_pair(&args.events, "events")?;
    let mut lengths = Vec::new();
    for bucket in args.lengths.split(',') {
        let parts: Vec<&str> = bucket.split('-').collect();
        if parts.len() != 2 {
            return Err(CliError::user(format!(
                "--lengths expects \"lo-hi,...\", got {bucket:?}"
            )));
        }
        let lo: usize = parts[0].trim().parse().map_err(|_| CliError::user("bad length bucket"))?;
        let hi: usize = parts[1].trim().parse().map_err(|_| CliError::user("bad length bucket"))?;
        lengths.push((lo, hi));
    }
    let spec = SyntheticSpec {
        n_videos: args.videos,
        n_classes: args.classes,
        frames_per_video: frames,
        events_per_video: events,
        event_lengths: lengths,
        feature_dim: args.feature_dim,
        noise_std: args.noise,
        background_fraction: args.bg_fraction,
        seed: args.seed,
    };
    let data = generate_synthetic(&spec).map_err(|e| CliError::user(e.to_string()))?;
    write_synthetic(&out, &data, task, args.fps)?;
    println!(
        "wrote {} videos ({} classes, task {}) to {}",
        args.videos,
        args.classes,
        args.task,
        out.display()
    );
    Ok(())
}

/// Default config -> optional file -> --set overrides, strictly checked.
fn resolve_config(
    task: Task,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<TrainConfig, CliError> {
    let base = TrainConfig::new(ModelConfig::desk_default(task));
    let mut value = serde_json::to_value(&base).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        merge_strict(&mut value, &overlay, "")?;
    }
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| CliError::user(format!("--set expects KEY=VALUE, got {entry:?}")))?;
        set_path(&mut value, key, raw)?;
    }
    let mut config: TrainConfig =
        serde_json::from_value(value).map_err(|e| CliError::user(format!("config: {e}")))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::user(e.to_string()))?;
    Ok(config)
}

fn merge_strict(base: &mut Value, overlay: &Value, path: &str) -> Result<(), CliError> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let sub_path = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge_strict(slot, v, &sub_path)?,
                    None => {
                        return Err(CliError::user(format!("config: unknown key {sub_path:?}")))
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn set_path(value: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = value;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| CliError::user(format!("--set: unknown config key {key:?}")))?;
    }
    // Try JSON first so numbers/bools/arrays parse naturally; fall back to
    // a bare string (lets users write --set model.task=tal).
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), CliError> {
    let mut text = String::from("step,cls_loss,reg_loss,total\n");
    for p in curve {
        text.push_str(&format!("{},{},{},{}\n", p.step, p.cls_loss, p.reg_loss, p.total));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let out = resolve_out(args.out, "train")?;
    let loaded = load_dataset(&args.data)?;
    let config = resolve_config(loaded.task, args.config.as_deref(), &args.overrides, args.seed)?;
    let (mut model, curve) = train(&config, &loaded.samples)?;
    save_model(&out.join("checkpoint.bin"), &mut model, &loaded.ctx)?;
    write_curve(&out.join("loss_curve.csv"), &curve)?;
    let last = curve.last().map(|p| p.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} samples; final loss {last:.4}; artifacts in {}",
        curve.len(),
        loaded.samples.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let out = resolve_out(args.out, "eval")?;
    let mut loaded = load_dataset(&args.data)?;
    let (model, mut ctx) = load_model(&args.checkpoint)?;
    if !args.templates.is_empty() {
        ctx.prompts = vtloc_core::data::PromptSet::new(args.templates.clone(), args.templates.len())
            .map_err(|e| CliError::user(e.to_string()))?;
    }
    // Token ids must come from the checkpoint's vocabulary and templates.
    loaded.re_encode_texts(&ctx);
    let opts = EvalOptions {
        ensemble_prompts: args.ensemble_prompts,
        ..EvalOptions::default()
    };
    let (report, _) = evaluate_with_predictions(&model, &loaded.samples, &opts, Some(&ctx))?;
    write_report(&out.join("report.json"), &report)?;
    print!("{}", report.render_table());
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let out = resolve_out(args.out, "predict")?;
    let mut loaded = load_dataset(&args.data)?;
    let (model, ckpt_ctx) = load_model(&args.checkpoint)?;
    loaded.re_encode_texts(&ckpt_ctx);
    let opts = EvalOptions::default();
    let (_, predictions) =
        evaluate_with_predictions(&model, &loaded.samples, &opts, Some(&ckpt_ctx))?;
    let path = out.join("predictions.jsonl");
    write_jsonl(&path, loaded.task, &predictions, &loaded.video_ids)?;
    let count: usize = predictions.iter().map(|p| p.candidates.len()).sum();
    println!("wrote {count} candidates to {}", path.display());
    Ok(())
}

fn cmd_pretrain(args: TrainArgs) -> Result<(), CliError> {
    let out = resolve_out(args.out, "pretrain")?;
    let loaded = load_dataset(&args.data)?;
    if loaded.task == Task::Mr {
        return Err(CliError::user(
            "pretraining needs class labels; use a tal or as dataset",
        ));
    }
    let config = resolve_config(loaded.task, args.config.as_deref(), &args.overrides, args.seed)?;

    // Cut every annotated segment into a trimmed clip, resampled to the
    // model's frame budget.
    let mut rng = Rng::new(config.seed);
    let mut clips = Vec::new();
    for sample in &loaded.samples {
        for gt in &sample.video.gts {
            let lo = gt.start.floor().max(0.0) as usize;
            let hi = (gt.end.ceil() as usize).min(sample.video.frames.rows() - 1);
            if hi <= lo {
                continue;
            }
            let cropped = SourceVideo {
                id: sample.video_id,
                frames: sample.video.frames.slice_rows(lo, hi + 1),
                gts: vec![],
            };
            let clip = sample_frames(
                &cropped,
                SamplingMode::EvenlySpaced,
                config.model.n_frames,
                sample.seconds_per_frame,
                &mut rng,
            )
            .map_err(|e| CliError::user(e.to_string()))?;
            clips.push(PretrainClip {
                rows: clip.rows,
                label: gt.class_id,
            });
        }
    }
    let texts: Vec<Vec<u32>> = (0..loaded.ctx.class_labels.len())
        .map(|c| loaded.ctx.label_ids(c))
        .collect();
    let dims = infer_dims(&loaded.samples)?;
    let mut model = Model::new(&config.model, dims, config.late_fusion, config.seed)?;
    let curve = pretrain_multilabel(&mut model, &clips, &texts, &config.optim, config.seed)?;
    save_model(&out.join("pretrained.bin"), &mut model, &loaded.ctx)?;
    write_curve(&out.join("pretrain_curve.csv"), &curve)?;
    println!(
        "pretrained on {} clips for {} steps; artifacts in {}",
        clips.len(),
        curve.len(),
        out.display()
    );
    Ok(())
}

fn parse_list<T>(text: &str, flag: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(str::trim)
        .map(|item| parse(item).ok_or_else(|| CliError::user(format!("--{flag}: bad value {item:?}"))))
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let out = resolve_out(args.out, "ablate")?;
    let loaded = load_dataset(&args.data)?;
    let base = resolve_config(loaded.task, args.config.as_deref(), &args.overrides, args.seed)?;

    let losses = parse_list(&args.losses, "losses", |s| match s {
        "l1" => Some(LossKind::L1),
        "iou" => Some(LossKind::Iou),
        "diou" => Some(LossKind::Diou),
        "l1+iou" => Some(LossKind::L1Iou),
        _ => None,
    })?;
    let pyramids = parse_list(&args.pyramids, "pyramids", |s| match s {
        "vitdet" => Some(PyramidStyle::Vitdet),
        "fpn" => Some(PyramidStyle::Fpn),
        "none" => Some(PyramidStyle::None),
        _ => None,
    })?;
    let blocks = parse_list(&args.head_blocks, "head-blocks", |s| s.parse::<usize>().ok())?;
    let modes = parse_list(&args.text_modes, "text-modes", |s| match s {
        "cls-only" => Some(TextMode::ClsOnly),
        "all-tokens" => Some(TextMode::AllTokens),
        "no-text" => Some(TextMode::NoText),
        _ => None,
    })?;

    let metric_name = match loaded.task {
        Task::Tal => "mAP@0.5",
        Task::Mr => "recall@1@0.5",
        Task::As => "frame_accuracy",
    };
    let mut rows = Vec::new();
    for &loss in &losses {
        for &pyramid in &pyramids {
            for &m in &blocks {
                for &mode in &modes {
                    let mut config = base.clone();
                    config.model.loss_kind = loss;
                    config.model.pyramid_style = pyramid;
                    config.model.head_blocks = m;
                    config.model.text_mode = mode;
                    config.optim.steps = args.steps;
                    if pyramid == PyramidStyle::None {
                        config.model.n_levels = 1;
                        config.model.regression_ranges =
                            vtloc_core::config::default_regression_ranges(1);
                    }
                    config.validate().map_err(|e| CliError::user(e.to_string()))?;
                    let (model, _) = train(&config, &loaded.samples)?;
                    let (report, _) = evaluate_with_predictions(
                        &model,
                        &loaded.samples,
                        &EvalOptions::default(),
                        Some(&loaded.ctx),
                    )?;
                    let value = report.get(metric_name).unwrap_or(0.0);
                    rows.push((loss, pyramid, m, mode, value));
                }
            }
        }
    }

    let mut table = String::from("loss,pyramid,head_blocks,text_mode,metric,value\n");
    println!("{:<8} {:<8} {:<4} {:<11} {}", "loss", "pyramid", "M", "text_mode", metric_name);
    for (loss, pyramid, m, mode, value) in &rows {
        let loss_s = match loss {
            LossKind::L1 => "l1",
            LossKind::Iou => "iou",
            LossKind::Diou => "diou",
            LossKind::L1Iou => "l1+iou",
        };
        let pyr_s = match pyramid {
            PyramidStyle::Vitdet => "vitdet",
            PyramidStyle::Fpn => "fpn",
            PyramidStyle::None => "none",
        };
        let mode_s = match mode {
            TextMode::ClsOnly => "cls-only",
            TextMode::AllTokens => "all-tokens",
            TextMode::NoText => "no-text",
        };
        println!("{loss_s:<8} {pyr_s:<8} {m:<4} {mode_s:<11} {value:.4}");
        table.push_str(&format!("{loss_s},{pyr_s},{m},{mode_s},{metric_name},{value}\n"));
    }
    std::fs::write(out.join("ablation.csv"), table)?;
    println!("grid written to {}", out.join("ablation.csv").display());
    Ok(())
}
