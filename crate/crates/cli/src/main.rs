//! `xiqa`: synthesize degraded corpora, pretrain the cross-token model,
//! fine-tune the score head, evaluate SROCC/PLCC, and dump reconstructions.
//!
//! Exit codes: 0 success, 2 I/O, 3 config/validation, 4 numerical failure,
//! 5 data contract violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xiqa_core::checkpoint::{Checkpoint, CheckpointError};
use xiqa_core::degrade::{build_synthetic_dataset, DegradationKind, DegradeError};
use xiqa_core::eval::{evaluate_model, finetune_and_evaluate, split_by_reference, EvalError, ScoreRow};
use xiqa_core::image::{center_crop, load_image, save_image, ImageError};
use xiqa_core::manifest::{DatasetManifest, ManifestError};
use xiqa_core::metrics::{aggregate_runs, MetricError, RunMetrics};
use xiqa_core::model::{assemble_cross_input, decode_reconstruct, encode, ModelError};
use xiqa_core::train::{finetune_run, pretrain_run, TraceRow, TrainError};

mod config;
use config::{ConfigError, RunConfig};

const EXIT_IO: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_DATA: u8 = 5;

#[derive(Parser)]
#[command(name = "xiqa", version, about = "No-reference image quality scoring via cross class-token reconstruction pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic degradations of source images and write a manifest
    Synth(SynthArgs),
    /// Pretrain the reconstruction model on an unlabeled manifest
    Pretrain(PretrainArgs),
    /// Fit the linear score head on a labeled manifest (towers frozen)
    Finetune(FinetuneArgs),
    /// Evaluate SROCC/PLCC on labeled data, optionally over repeated splits
    Eval(EvalArgs),
    /// Reconstruct a degraded image through the cross-token decoder
    Reconstruct(ReconstructArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of source images (PNG/PPM/PGM)
    #[arg(long)]
    sources: PathBuf,
    /// Comma-separated degradation kinds (e.g. GaussianBlur,GaussianNoise)
    #[arg(long)]
    kinds: String,
    /// Output directory for degraded images and manifest.csv
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed (drives noise realizations)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Unlabeled manifest produced by `synth`
    #[arg(long)]
    manifest: PathBuf,
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV path (default: loss.csv next to the checkpoint)
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Labeled manifest (all rows must carry scores)
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// After training, re-check that encoder bytes are unchanged
    #[arg(long)]
    verify_frozen: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint: fine-tuned (default mode) or pretrained (--fresh-splits)
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of evaluation repeats
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    /// Re-split and re-fit the head per repeat (requires --config)
    #[arg(long)]
    fresh_splits: bool,
    /// Run configuration file (needed with --fresh-splits)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for fresh splits (repeat r uses seed + r)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Results CSV path
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Directory for per-run score dumps (optional)
    #[arg(long)]
    scores_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Checkpoint with trained reconstruction towers
    #[arg(long)]
    ckpt: PathBuf,
    /// Pristine reference image
    #[arg(long)]
    original: PathBuf,
    /// Degraded rendition of the same content
    #[arg(long)]
    degraded: PathBuf,
    /// Output directory (receives original/reconstruction/degraded)
    #[arg(long)]
    out: PathBuf,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_CONFIG, format!("config error: {e}"))
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        let code = match &e {
            ImageError::CropLargerThanImage { .. } | ImageError::InvalidImage(_) => EXIT_CONFIG,
            _ => EXIT_IO,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<DegradeError> for CliError {
    fn from(e: DegradeError) -> Self {
        let code = match &e {
            DegradeError::UnknownKind(_) | DegradeError::LevelOutOfRange(_) => EXIT_CONFIG,
            DegradeError::EmptySourceList => EXIT_DATA,
            DegradeError::Image(img) => return CliError::from_image_ref(img),
            DegradeError::Io(_) => EXIT_IO,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        let code = match &e {
            ManifestError::Io(_) => EXIT_IO,
            ManifestError::Malformed { .. } => EXIT_DATA,
            ManifestError::Degrade(_) => EXIT_DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match &e {
            CheckpointError::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::new(EXIT_CONFIG, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFiniteLoss(_) => EXIT_NUMERIC,
            TrainError::MissingScores
            | TrainError::InsufficientVariants(_)
            | TrainError::MissingPristine(_)
            | TrainError::ContentMismatch(_) => EXIT_DATA,
            TrainError::Image(img) => return CliError::from_image_ref(img),
            TrainError::Manifest(m) => return CliError::new(CliError::from_manifest_code(m), e.to_string()),
            TrainError::Checkpoint(CheckpointError::Io(_)) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let code = match &e {
            MetricError::ZeroVariance(_) | MetricError::NonFiniteGroundTruth => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::TooFewReferences(_) => CliError::new(EXIT_DATA, e.to_string()),
            EvalError::Metric(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Image(i) => i.into(),
            EvalError::Checkpoint(c) => c.into(),
        }
    }
}

impl CliError {
    fn from_image_ref(e: &ImageError) -> CliError {
        let code = match e {
            ImageError::CropLargerThanImage { .. } | ImageError::InvalidImage(_) => EXIT_CONFIG,
            _ => EXIT_IO,
        };
        CliError::new(code, e.to_string())
    }

    fn from_manifest_code(e: &ManifestError) -> u8 {
        match e {
            ManifestError::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut kinds = Vec::new();
    for name in args.kinds.split(',').filter(|s| !s.trim().is_empty()) {
        kinds.push(
            name.trim()
                .parse::<DegradationKind>()
                .map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?,
        );
    }
    if kinds.is_empty() {
        return Err(CliError::new(EXIT_CONFIG, "no degradation kinds given"));
    }
    let mut sources: Vec<PathBuf> = std::fs::read_dir(&args.sources)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot read {}: {e}", args.sources.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "ppm" | "pgm")
            )
        })
        .collect();
    sources.sort();
    let manifest = build_synthetic_dataset(&sources, &kinds, &args.out, args.seed)?;
    manifest.save(&args.out.join("manifest.csv"))?;
    println!("{} rows -> {}", manifest.rows.len(), args.out.join("manifest.csv").display());
    Ok(())
}

fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TraceRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let (checkpoint, trace) = pretrain_run(&manifest, &cfg.train, &cfg.model)?;
    checkpoint.save(&args.out)?;
    let trace_path = args
        .trace
        .unwrap_or_else(|| args.out.parent().unwrap_or(Path::new(".")).join("loss.csv"));
    write_file(&trace_path, &trace_csv(&trace))?;
    let last = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps, final loss {last:.6}; checkpoint {} trace {}",
        trace.len(),
        args.out.display(),
        trace_path.display()
    );
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    if !manifest.all_scored() {
        return Err(CliError::new(
            EXIT_DATA,
            "manifest has unscored rows; fine-tuning needs quality labels",
        ));
    }
    let pretrained = Checkpoint::load(&args.ckpt)?;
    let split = split_by_reference(&manifest, 0.8, cfg.train.seed)?;
    let train_side = manifest.filter_refs(|id| split.is_train(id));
    let mut tuned = finetune_run(&train_side, &pretrained, &cfg.train)?;
    tuned.meta.split = Some(split);
    tuned.save(&args.out)?;
    if args.verify_frozen {
        let before = pretrained.build_model()?.encoder_bytes();
        let after = tuned.build_model()?.encoder_bytes();
        if before != after {
            return Err(CliError::new(
                EXIT_NUMERIC,
                "encoder bytes changed during fine-tuning",
            ));
        }
        println!("verify-frozen: encoder bytes identical");
    }
    println!("fine-tuned head -> {}", args.out.display());
    Ok(())
}

fn results_csv(runs: &[(u64, u64, RunMetrics)]) -> Result<String, CliError> {
    let mut out = String::from("run,seed,plcc,srocc\n");
    for (run, seed, m) in runs {
        out.push_str(&format!("{run},{seed},{},{}\n", m.plcc, m.srocc));
    }
    let agg = aggregate_runs(&runs.iter().map(|(_, _, m)| *m).collect::<Vec<_>>())?;
    out.push_str(&format!("mean,,{},{}\n", agg.mean_plcc, agg.mean_srocc));
    Ok(out)
}

fn dump_scores(dir: &Path, run: u64, rows: &[ScoreRow]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot create {}: {e}", dir.display())))?;
    let mut out = String::from(ScoreRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    write_file(&dir.join(format!("scores_run{run}.csv")), &out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    if !manifest.all_scored() {
        return Err(CliError::new(EXIT_DATA, "manifest has unscored rows"));
    }
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let mut runs = Vec::new();
    if args.fresh_splits {
        let cfg_path = args.config.as_ref().ok_or_else(|| {
            CliError::new(EXIT_CONFIG, "--fresh-splits requires --config for head fitting")
        })?;
        let cfg = RunConfig::load(cfg_path)?;
        for r in 0..args.repeats {
            let split_seed = args.seed + r;
            let (metrics, tuned) = finetune_and_evaluate(&checkpoint, &manifest, &cfg.train, split_seed)?;
            if let Some(dir) = &args.scores_dir {
                let split = tuned.meta.split.as_ref().unwrap();
                let test_side = manifest.filter_refs(|id| split.is_test(id));
                let (_, rows) = evaluate_model(&tuned, &test_side)?;
                dump_scores(dir, r, &rows)?;
            }
            println!("run {r}: plcc {:.4} srocc {:.4}", metrics.plcc, metrics.srocc);
            runs.push((r, split_seed, metrics));
        }
    } else {
        if args.repeats != 1 {
            return Err(CliError::new(
                EXIT_CONFIG,
                "--repeats > 1 needs --fresh-splits; a fixed head and split is one run",
            ));
        }
        let split = checkpoint.meta.split.clone().ok_or_else(|| {
            CliError::new(
                EXIT_CONFIG,
                "checkpoint has no recorded split; run finetune first or pass --fresh-splits",
            )
        })?;
        let test_side = manifest.filter_refs(|id| split.is_test(id));
        let (metrics, rows) = evaluate_model(&checkpoint, &test_side)?;
        if let Some(dir) = &args.scores_dir {
            dump_scores(dir, 0, &rows)?;
        }
        println!("run 0: plcc {:.4} srocc {:.4}", metrics.plcc, metrics.srocc);
        runs.push((0, split.seed, metrics));
    }
    let csv = results_csv(&runs)?;
    write_file(&args.out, &csv)?;
    let agg = aggregate_runs(&runs.iter().map(|(_, _, m)| *m).collect::<Vec<_>>())?;
    println!(
        "mean plcc {:.4} (std {:.4}), mean srocc {:.4} (std {:.4}) over {} run(s) -> {}",
        agg.mean_plcc,
        agg.std_plcc,
        agg.mean_srocc,
        agg.std_srocc,
        agg.runs,
        args.out.display()
    );
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let model = checkpoint.build_model()?;
    let original = load_image(&args.original)?;
    let mut degraded = load_image(&args.degraded)?;
    if original.shape() != degraded.shape() {
        return Err(CliError::new(
            EXIT_CONFIG,
            format!(
                "image shapes differ: {:?} vs {:?}",
                original.shape(),
                degraded.shape()
            ),
        ));
    }
    // the two files are renditions of one content
    degraded.reference_id = original.reference_id.clone();
    let size = model.cfg.image_size;
    let original = center_crop(&original, size)?;
    let degraded = center_crop(&degraded, size)?;
    let enc = encode(&degraded, &model.encoder, &model.cfg, None)?;
    let input = assemble_cross_input(&enc, &original, &model.decoder, &model.cfg, None)?;
    let reconstruction = decode_reconstruct(&input, &model.decoder, &model.cfg, &original.reference_id)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot create {}: {e}", args.out.display())))?;
    let ext = if original.channels == 3 { "ppm" } else { "pgm" };
    save_image(&original, &args.out.join(format!("original.{ext}")))?;
    save_image(&reconstruction, &args.out.join(format!("reconstruction.{ext}")))?;
    save_image(&degraded, &args.out.join(format!("degraded.{ext}")))?;
    println!(
        "wrote original/reconstruction/degraded ({}x{}) to {}",
        size,
        size,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success; anything else is a usage
            // (configuration) error
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
