//! Command-line front end: dataset generation, training, evaluation,
//! prediction dumps, gradient checking, and overlay rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nextact::checks::{default_seeds, format_battery, run_battery};
use nextact::data::io::{read_dataset, write_dataset};
use nextact::data::synth::{generate_synthetic, SynthConfig};
use nextact::data::{Clip, Dataset};
use nextact::error::{Error, Result};
use nextact::fusion::{FusionMode, GuidanceScope};
use nextact::model::{OutputMode, StaModel};
use nextact::overlay::write_overlay;
use nextact::train::{evaluate_model, load_model, train, write_report, RunConfig};

#[derive(Parser)]
#[command(
    name = "nextact",
    version,
    about = "Short-term anticipation of the next active object",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    GenData(GenDataArgs),
    /// Train a model and checkpoint it every epoch
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write the report files
    Eval(EvalArgs),
    /// Print per-query predictions for one clip or the whole dataset
    Predict(PredictArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Render a frame with prediction and ground-truth boxes as PPM
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of clips to generate
    #[arg(long, default_value_t = 64)]
    clips: usize,
    /// Uniform detection-box noise amplitude in normalized units
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    frame_size: Option<usize>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    nouns: Option<usize>,
    #[arg(long)]
    verbs: Option<usize>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory to train on
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random flip, rescale, and crop during training (true/false)
    #[arg(long)]
    augment: Option<bool>,
    /// Fusion arm: guided, concat, or none
    #[arg(long)]
    fusion: Option<String>,
    /// Output mode: detector_box or predict_boxes
    #[arg(long)]
    output_mode: Option<String>,
    /// Guidance scope: per_frame or global
    #[arg(long)]
    guidance_scope: Option<String>,
    #[arg(long)]
    lambda_box: Option<f64>,
    #[arg(long)]
    lambda_noun: Option<f64>,
    #[arg(long)]
    lambda_verb: Option<f64>,
    #[arg(long)]
    lambda_ttc: Option<f64>,
    #[arg(long)]
    background_weight: Option<f64>,
    /// Swap the regression bindings: MSE on boxes, smooth-L1 on ttc
    #[arg(long)]
    swap_regression: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory to score on
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint produced by train
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for report.txt and report.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip id; omitted means every clip
    #[arg(long)]
    clip: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated seed list; at least five seeds by default
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip id to render
    #[arg(long)]
    clip: usize,
    /// Output PPM path
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Overlay(a) => run_overlay(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_resolved<T: serde::Serialize>(what: &str, cfg: &T) -> Result<()> {
    let text =
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config encode: {e}")))?;
    println!("# resolved {what} config");
    print!("{text}");
    println!();
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig::default();
    if let Some(v) = a.jitter {
        cfg.jitter = v;
    }
    if let Some(v) = a.frame_size {
        cfg.frame_size = v;
    }
    if let Some(v) = a.clip_len {
        cfg.clip_len = v;
    }
    if let Some(v) = a.fps {
        cfg.fps = v;
    }
    if let Some(v) = a.nouns {
        cfg.n_nouns = v;
    }
    if let Some(v) = a.verbs {
        cfg.n_verbs = v;
    }
    if let Some(v) = a.min_objects {
        cfg.min_objects = v;
    }
    if let Some(v) = a.max_objects {
        cfg.max_objects = v;
    }
    print_resolved("generator", &cfg)?;
    let ds: Dataset = generate_synthetic(a.seed, a.clips, &cfg)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} clips to {}", ds.clips.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_fusion(s: &str) -> Result<FusionMode> {
    match s {
        "guided" => Ok(FusionMode::Guided),
        "concat" => Ok(FusionMode::Concat),
        "none" => Ok(FusionMode::None),
        other => Err(Error::Config(format!(
            "unknown fusion mode {other:?}; expected guided, concat, or none"
        ))),
    }
}

fn parse_output_mode(s: &str) -> Result<OutputMode> {
    match s {
        "detector_box" => Ok(OutputMode::DetectorBox),
        "predict_boxes" => Ok(OutputMode::PredictBoxes),
        other => Err(Error::Config(format!(
            "unknown output mode {other:?}; expected detector_box or predict_boxes"
        ))),
    }
}

fn parse_scope(s: &str) -> Result<GuidanceScope> {
    match s {
        "per_frame" => Ok(GuidanceScope::PerFrame),
        "global" => Ok(GuidanceScope::Global),
        other => Err(Error::Config(format!(
            "unknown guidance scope {other:?}; expected per_frame or global"
        ))),
    }
}

/// Checks that the model's input dimensions describe the dataset.
fn check_dims(run: &RunConfig, ds: &Dataset) -> Result<()> {
    let Some(clip) = ds.clips.first() else {
        return Err(Error::Data("dataset has no clips".into()));
    };
    let shape = clip.frames.shape();
    let expect = [run.model.in_channels, run.model.t_in, run.model.frame_size, run.model.frame_size];
    if shape != expect {
        return Err(Error::Config(format!(
            "model expects clip tensors {expect:?} but the dataset holds {shape:?}; \
             adjust the model config to the data"
        )));
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs, ds: &Dataset) -> Result<RunConfig> {
    let mut run = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            RunConfig::from_toml(&text)?
        }
        None => {
            // Without a config file the model section adapts to the data.
            let mut run = RunConfig::default();
            let shape = ds
                .clips
                .first()
                .map(|c| c.frames.shape())
                .ok_or_else(|| Error::Data("dataset has no clips".into()))?;
            run.model.in_channels = shape[0];
            run.model.t_in = shape[1];
            run.model.frame_size = shape[2];
            run.model.n_nouns = ds.n_nouns;
            run.model.n_verbs = ds.n_verbs;
            run
        }
    };
    if let Some(v) = a.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = a.lr {
        run.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = a.weight_decay {
        run.train.weight_decay = v;
    }
    if let Some(v) = a.momentum {
        run.train.momentum = v;
    }
    if let Some(v) = a.seed {
        run.train.seed = v;
    }
    if let Some(v) = a.augment {
        run.train.augment = v;
    }
    if let Some(v) = &a.fusion {
        run.model.fusion = parse_fusion(v)?;
    }
    if let Some(v) = &a.output_mode {
        run.model.output_mode = parse_output_mode(v)?;
    }
    if let Some(v) = &a.guidance_scope {
        run.model.guidance_scope = parse_scope(v)?;
    }
    if let Some(v) = a.lambda_box {
        run.loss.weights.lambda_box = v;
    }
    if let Some(v) = a.lambda_noun {
        run.loss.weights.lambda_noun = v;
    }
    if let Some(v) = a.lambda_verb {
        run.loss.weights.lambda_verb = v;
    }
    if let Some(v) = a.lambda_ttc {
        run.loss.weights.lambda_ttc = v;
    }
    if let Some(v) = a.background_weight {
        run.loss.background_weight = v;
    }
    if let Some(v) = a.swap_regression {
        run.loss.swap_regression = v;
    }
    Ok(run)
}

fn run_train(a: TrainArgs) -> Result<ExitCode> {
    let ds: Dataset = read_dataset(&a.data)?;
    let run = resolve_train_config(&a, &ds)?;
    run.validate()?;
    check_dims(&run, &ds)?;
    print_resolved("run", &run)?;
    println!("training on {} clips from {}", ds.clips.len(), a.data.display());
    let (_, summary) = train(&ds, &run, &a.out, |log| {
        println!(
            "epoch {:>4}  loss {:.6}  (box {:.6} noun {:.6} verb {:.6} ttc {:.6})  lr {:.6}  clips {}/{}",
            log.epoch,
            log.parts.total,
            log.parts.bbox,
            log.parts.noun,
            log.parts.verb,
            log.parts.ttc,
            log.lr,
            log.clips_used,
            log.clips_used + log.clips_skipped,
        );
    })?;
    println!("done after {} optimizer steps; checkpoint at {}", summary.steps, summary.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn load_for_inference(data: &Path, checkpoint: &Path) -> Result<(RunConfig, StaModel<f64>, Dataset)> {
    let ds: Dataset = read_dataset(data)?;
    let (run, model) = load_model::<f64>(checkpoint)?;
    check_dims(&run, &ds)?;
    Ok((run, model, ds))
}

fn run_eval(a: EvalArgs) -> Result<ExitCode> {
    let (run, model, ds) = load_for_inference(&a.data, &a.checkpoint)?;
    print_resolved("run", &run)?;
    let summary = evaluate_model(&model, &ds)?;
    let (text_path, json_path) = write_report(&a.out, &run, &summary)?;
    print!("{}", nextact::metrics::format_report(&summary));
    println!("report written to {} and {}", text_path.display(), json_path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_predict(a: PredictArgs) -> Result<ExitCode> {
    let (run, model, ds) = load_for_inference(&a.data, &a.checkpoint)?;
    print_resolved("run", &run)?;
    let clips: Vec<&Clip> = match a.clip {
        Some(id) => vec![find_clip(&ds, id)?],
        None => ds.clips.iter().collect(),
    };
    for clip in clips {
        for (q, p) in model.predict(clip)?.iter().enumerate() {
            println!(
                "clip {:>4} query {}  noun {:>2} verb {:>2} ttc {:.3}s conf {:.4}  box ({:.3}, {:.3}, {:.3}, {:.3}){}",
                clip.id,
                q,
                p.noun,
                p.verb,
                p.ttc,
                p.confidence,
                p.bbox.cx,
                p.bbox.cy,
                p.bbox.w,
                p.bbox.h,
                if p.roi.is_some() { "  [roi]" } else { "" },
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let seeds = match &a.seeds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed {s:?} in --seeds")))
            })
            .collect::<Result<Vec<u64>>>()?,
        None => default_seeds(),
    };
    println!("# gradient check over seeds {seeds:?}");
    let reports = run_battery(&seeds)?;
    print!("{}", format_battery(&reports));
    if reports.iter().all(|r| r.passed()) {
        println!("all {} blocks within tolerance", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed");
        Ok(ExitCode::FAILURE)
    }
}

fn find_clip(ds: &Dataset, id: usize) -> Result<&Clip> {
    ds.clips
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Data(format!("no clip with id {id} in the dataset")))
}

fn run_overlay(a: OverlayArgs) -> Result<ExitCode> {
    let (run, model, ds) = load_for_inference(&a.data, &a.checkpoint)?;
    print_resolved("run", &run)?;
    let clip = find_clip(&ds, a.clip)?;
    let preds = model.predict(clip)?;
    write_overlay(clip, &preds, &a.out)?;
    println!("wrote overlay for clip {} to {}", a.clip, a.out.display());
    Ok(ExitCode::SUCCESS)
}
