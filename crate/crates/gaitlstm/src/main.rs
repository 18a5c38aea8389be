//! Command-line entry point binding ingestion, training, evaluation,
//! prediction, and gradient verification into one reproducible workflow.
//!
//! Every subcommand prints its fully resolved configuration before doing any
//! work, takes all inputs from flags (no environment variables), and derives
//! all randomness from a single --seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gaitlstm::data::{
    self, label_from_name, CohortLabel, IngestConfig, Manifest, Segment, SplitMode, SplitSpec,
    SplitSide, WINDOW,
};
use gaitlstm::error::{Error, Result};
use gaitlstm::eval::{compute_metrics, predict_subject, EvalLevel, EvalReport};
use gaitlstm::model::{gradcheck_probe, gradient_check, GradCheckConfig};
use gaitlstm::train::{
    emit_curves, predict_segments, Checkpoint, Preset, TrainConfig, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "gaitlstm",
    version,
    about = "LSTM classifier for gait recordings: ingest, train, evaluate, predict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a directory of VGRF recordings into segments and write a
    /// train/validation manifest plus a data-quality report.
    Ingest(IngestArgs),
    /// Train a model on a manifest and write a checkpoint (and curves).
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a manifest's validation split.
    Evaluate(EvaluateArgs),
    /// Classify one recording file with a trained checkpoint.
    Predict(PredictArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// List the built-in hyperparameter presets and their reference metrics.
    Presets,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Segment,
    Subject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LevelArg {
    Segment,
    Subject,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of whitespace-separated 19-column recording files.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_manifest: PathBuf,
    /// Split granularity: segment-level (stratified) or subject-level.
    #[arg(long, value_enum, default_value_t = SplitArg::Segment)]
    split: SplitArg,
    #[arg(long, default_value_t = 0.70)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip z-score normalization (stats in the manifest become identity).
    #[arg(long)]
    no_normalize: bool,
    /// Sidecar label file: one "<filename> <PD|Control>" per line.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Hyperparameter preset; explicit flags below override its fields.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Width of an optional ReLU layer between the LSTM and the head.
    #[arg(long)]
    dense: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    curves_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Keep the best-validation-accuracy epoch instead of the last one.
    #[arg(long)]
    select_best_val: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = LevelArg::Segment)]
    level: LevelArg,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    recording: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    input_dim: usize,
    #[arg(long, default_value_t = 5)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// L2 strength of the regularized loss under test.
    #[arg(long, default_value_t = 0.001)]
    l2: f64,
    /// Check only this many sampled coordinates instead of all of them.
    #[arg(long)]
    sample: Option<usize>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::from_str(s).ok_or_else(|| format!("unknown preset {s:?} (expected model1|model2|model3)"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Train(args) => cmd_train(*args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Presets => cmd_presets(),
    }
}

fn echo_config(command: &str, pairs: &[(&str, String)]) {
    println!("resolved configuration:");
    println!("  command = {command}");
    for (k, v) in pairs {
        println!("  {k} = {v}");
    }
}

fn opt_str<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "none".to_string(),
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<ExitCode> {
    let mode = match args.split {
        SplitArg::Segment => SplitMode::SegmentLevel,
        SplitArg::Subject => SplitMode::SubjectLevel,
    };
    echo_config(
        "ingest",
        &[
            ("data_dir", args.data_dir.display().to_string()),
            ("out_manifest", args.out_manifest.display().to_string()),
            ("split", mode.as_str().to_string()),
            ("train_frac", args.train_frac.to_string()),
            ("seed", args.seed.to_string()),
            ("normalize", (!args.no_normalize).to_string()),
            (
                "labels",
                opt_str(&args.labels.as_ref().map(|p| p.display())),
            ),
        ],
    );

    let cfg = IngestConfig {
        data_dir: args.data_dir.clone(),
        split: SplitSpec {
            train_fraction: args.train_frac,
            mode,
            seed: args.seed,
            stratified: true,
        },
        normalize: !args.no_normalize,
        labels_sidecar: args.labels.clone(),
        window: WINDOW,
    };
    let out = data::ingest(&cfg)?;
    for w in &out.warnings {
        println!("warning: {w}");
    }
    out.manifest.save(&args.out_manifest)?;
    println!("manifest written to {}", args.out_manifest.display());

    let quality_path = quality_path_for(&args.out_manifest);
    std::fs::write(&quality_path, format!("{}\n", out.quality))
        .map_err(|e| Error::io(&quality_path, e))?;
    println!("quality report written to {}", quality_path.display());
    println!("{}", out.quality);

    let train_count = out
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == SplitSide::Train)
        .count();
    println!(
        "segments: {} train / {} validation",
        train_count,
        out.manifest.entries.len() - train_count
    );
    Ok(ExitCode::SUCCESS)
}

fn quality_path_for(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".quality");
    manifest.with_file_name(name)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match args.preset {
        Some(p) => p.config(args.seed),
        None => TrainConfig {
            seed: args.seed,
            ..TrainConfig::default()
        },
    };
    if let Some(h) = args.hidden {
        cfg.hidden_dim = h;
    }
    if args.dense.is_some() {
        cfg.dense_dim = args.dense;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(l) = args.l2 {
        cfg.l2_lambda = l;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(b) = args.batch {
        cfg.batch_size = b;
    }
    if let Some(d) = args.dropout {
        cfg.dropout_p = d;
    }

    echo_config(
        "train",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("preset", opt_str(&cfg.preset_name.map(|p| p.as_str()))),
            ("hidden_dim", cfg.hidden_dim.to_string()),
            ("dense_dim", opt_str(&cfg.dense_dim)),
            ("epochs", cfg.epochs.to_string()),
            ("l2_lambda", cfg.l2_lambda.to_string()),
            ("lr", cfg.lr.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("dropout_p", cfg.dropout_p.to_string()),
            ("seed", cfg.seed.to_string()),
            ("threads", args.threads.to_string()),
            ("select_best_val", args.select_best_val.to_string()),
            ("out_checkpoint", args.out_checkpoint.display().to_string()),
            (
                "curves_csv",
                opt_str(&args.curves_csv.as_ref().map(|p| p.display())),
            ),
        ],
    );

    let manifest = Manifest::load(&args.manifest)?;
    let (train_set, val_set) = data::load_from_manifest(&manifest, WINDOW)?;
    let options = TrainOptions {
        threads: args.threads,
        select_best_val: args.select_best_val,
        normalization: Some(manifest.stats.clone()),
    };
    let (checkpoint, records) = gaitlstm::train::train(
        &cfg,
        &options,
        &train_set,
        &val_set,
        &mut |line| println!("{line}"),
    )?;

    let segment_report = report_for(
        &checkpoint,
        &val_set,
        EvalLevel::Segment,
        args.threads,
    )?;
    let subject_report = report_for(
        &checkpoint,
        &val_set,
        EvalLevel::Subject,
        args.threads,
    )?;
    println!("validation metrics (segment level):");
    println!("{segment_report}");
    println!("validation metrics (subject level):");
    println!("{subject_report}");

    if let Some(preset) = cfg.preset_name {
        print_reference_gap(preset, &segment_report);
    }

    checkpoint.save(&args.out_checkpoint)?;
    println!("checkpoint written to {}", args.out_checkpoint.display());
    if let Some(curves) = &args.curves_csv {
        emit_curves(&records, curves)?;
        println!("curves written to {}", curves.display());
    }
    if args.select_best_val {
        let best = records
            .iter()
            .max_by(|a, b| a.val_accuracy.total_cmp(&b.val_accuracy))
            .expect("training produced at least one epoch record");
        let last = records.last().expect("nonempty records");
        println!(
            "best-validation epoch {} (val_acc={}) kept; last epoch {} had val_acc={}",
            best.epoch, best.val_accuracy, last.epoch, last.val_accuracy
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Gap between a trained run's segment-level validation metrics and the
/// published reference figures for the preset.
fn print_reference_gap(preset: Preset, report: &EvalReport) {
    let reference = preset.reference_metrics();
    println!("reference comparison ({}):", preset.as_str());
    let rows = [
        ("precision", report.precision, reference.precision),
        ("sensitivity", report.sensitivity, reference.sensitivity),
        ("specificity", report.specificity, reference.specificity),
        ("accuracy", report.accuracy, reference.accuracy),
    ];
    for (name, got, want) in rows {
        match got {
            Some(g) => println!(
                "  {name}: run={g} reference={want} gap={}",
                g - want
            ),
            None => println!("  {name}: run=undefined reference={want} gap=undefined"),
        }
    }
}

fn check_dims(cp: &Checkpoint, features: usize) -> Result<()> {
    if cp.params.input_dim() != features {
        return Err(Error::DimensionMismatch {
            context: format!(
                "checkpoint expects {} input features, data provides {features}",
                cp.params.input_dim()
            ),
        });
    }
    Ok(())
}

/// Evaluate a checkpoint on a segment set at either granularity.
fn report_for(
    cp: &Checkpoint,
    segments: &[Segment],
    level: EvalLevel,
    threads: usize,
) -> Result<EvalReport> {
    if segments.is_empty() {
        return Err(Error::InvalidInput(
            "no segments on the evaluated split".to_string(),
        ));
    }
    check_dims(cp, segments[0].features.cols())?;
    let dropout = cp.config.dropout_p;
    match level {
        EvalLevel::Segment => {
            let preds = predict_segments(&cp.params, segments, dropout, threads)?;
            let truths: Vec<CohortLabel> = segments.iter().map(|s| s.label).collect();
            Ok(compute_metrics(&preds, &truths, EvalLevel::Segment))
        }
        EvalLevel::Subject => {
            let mut by_file: BTreeMap<&str, Vec<Segment>> = BTreeMap::new();
            for seg in segments {
                by_file
                    .entry(seg.source_file.as_str())
                    .or_default()
                    .push(seg.clone());
            }
            let mut preds = Vec::with_capacity(by_file.len());
            let mut truths = Vec::with_capacity(by_file.len());
            for (_, segs) in by_file {
                let (label, _) = predict_subject(&cp.params, &segs, dropout)?;
                preds.push(label);
                truths.push(segs[0].label);
            }
            Ok(compute_metrics(&preds, &truths, EvalLevel::Subject))
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let level = match args.level {
        LevelArg::Segment => EvalLevel::Segment,
        LevelArg::Subject => EvalLevel::Subject,
    };
    echo_config(
        "evaluate",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("level", level.as_str().to_string()),
            ("threads", args.threads.to_string()),
            ("subset", "validation".to_string()),
        ],
    );
    let cp = Checkpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    check_dims(&cp, manifest.stats.mean.len())?;
    let (_, val_set) = data::load_from_manifest(&manifest, WINDOW)?;
    let report = report_for(&cp, &val_set, level, args.threads)?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode> {
    echo_config(
        "predict",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("recording", args.recording.display().to_string()),
        ],
    );
    let cp = Checkpoint::load(&args.checkpoint)?;
    // Truth labels play no role in prediction; fall back to Control when the
    // file name encodes no cohort so unlabeled recordings can be classified.
    let name = args
        .recording
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let label = label_from_name(&name).unwrap_or(CohortLabel::Control);
    let recording = data::parse_recording_with_label(&args.recording, Some(label))?;
    if recording.frames.cols() - 1 != cp.params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "checkpoint expects {} input features, recording provides {}",
                cp.params.input_dim(),
                recording.frames.cols() - 1
            ),
        });
    }
    let outcome = data::segment_recording(&recording, WINDOW);
    if let Some(w) = outcome.warning() {
        println!("warning: {w}");
    }
    if outcome.segments.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no segments to classify",
            args.recording.display()
        )));
    }
    let segments: Vec<Segment> = outcome
        .segments
        .iter()
        .map(|s| data::apply_normalization(&cp.normalization, s))
        .collect();
    let (pred, pooled) = predict_subject(&cp.params, &segments, cp.config.dropout_p)?;
    println!("segments: {}", segments.len());
    println!(
        "probabilities: Control={} PD={}",
        pooled[CohortLabel::Control.class_index()],
        pooled[CohortLabel::Pd.class_index()]
    );
    println!("prediction: {pred}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    echo_config(
        "gradcheck",
        &[
            ("hidden", args.hidden.to_string()),
            ("input_dim", args.input_dim.to_string()),
            ("seq_len", args.seq_len.to_string()),
            ("seed", args.seed.to_string()),
            ("tolerance", args.tolerance.to_string()),
            ("l2", args.l2.to_string()),
            ("sample", opt_str(&args.sample)),
        ],
    );
    if args.hidden == 0 || args.input_dim == 0 || args.seq_len == 0 {
        return Err(Error::InvalidConfig(
            "hidden, input-dim and seq-len must all be at least 1".to_string(),
        ));
    }
    let (params, seq, label) = gradcheck_probe(args.hidden, args.input_dim, args.seq_len, args.seed);
    let cfg = GradCheckConfig {
        tolerance: args.tolerance,
        l2_lambda: args.l2,
        sample: args.sample.map(|n| (n, args.seed)),
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&params, &seq, label, &cfg);
    let verdict = if report.passed() { "pass" } else { "fail" };
    println!(
        "checked={} max_relative_error={} tolerance={} result={verdict}",
        report.checked, report.max_relative_error, report.tolerance
    );
    if let Some((tensor, index)) = report.worst {
        println!("worst coordinate: {tensor}[{index}]");
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_presets() -> Result<ExitCode> {
    for p in Preset::all() {
        let (hidden, epochs, l2, lr, batch) = p.row();
        let m = p.reference_metrics();
        println!(
            "{}: hidden={hidden} epochs={epochs} l2={l2} lr={lr} batch={batch}",
            p.as_str()
        );
        println!(
            "  reference: precision={} sensitivity={} specificity={} accuracy={}",
            m.precision, m.sensitivity, m.specificity, m.accuracy
        );
    }
    Ok(ExitCode::SUCCESS)
}
