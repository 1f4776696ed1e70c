//! `hmgrl` command-line runner.
//!
//! Every command reads optional JSON config files, lets flags override them,
//! writes its artifacts, and logs one JSON object per line on stdout. Exit
//! status is 0 on success, 1 for invalid input or configuration and 2 for
//! numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use hmgrl::data::{generate_synthetic_corpus, gzsl_split, read_bundle, read_manifest, write_bundle, Bundle, DataError, GeneratorSpec, GzslSplit, SplitConfig};
use hmgrl::engine::{run_gradcheck, run_seeds, write_features, Checkpoint, EngineError, GradcheckOptions, TrainConfig, TrainSession};

#[derive(Parser)]
#[command(name = "hmgrl", version, about = "Generalized zero-shot extraction over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding bundle.
    GenData(GenDataArgs),
    /// Partition a bundle into train/validation/test.
    Split(SplitArgs),
    /// Train a model, or several seeds with `--seeds`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Decode synthetic features for the unseen categories.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, env = "HMGRL_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bundle: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Train this many consecutive seeds and report mean and std.
    #[arg(long)]
    seeds: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "seeds")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fixed calibration constant; skips the validation-selected value.
    #[arg(long)]
    gamma: Option<f64>,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Also export test-sample features here.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Draws per unseen category; defaults to the trained `k`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, env = "HMGRL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "HMGRL_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

enum Failure {
    Invalid(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn log(event: &str, fields: Value) {
    let mut line = json!({ "event": event });
    if let (Value::Object(dst), Value::Object(src)) = (&mut line, fields) {
        dst.extend(src);
    }
    println!("{line}");
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn load_bundle(path: &Path) -> Result<Bundle, Failure> {
    let bundle = if path.extension().is_some_and(|e| e == "json") {
        read_manifest(path)?
    } else {
        read_bundle(path)?
    };
    Ok(bundle)
}

fn ensure_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> Outcome {
    let mut spec: GeneratorSpec = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        spec.seed = seed;
    }
    let bundle = generate_synthetic_corpus(&spec)?;
    write_bundle(&bundle, &args.common.out)?;
    log(
        "gen-data",
        json!({ "out": args.common.out, "samples": bundle.samples.len(), "categories": bundle.num_categories(), "d": bundle.d }),
    );
    Ok(())
}

fn split(args: SplitArgs) -> Outcome {
    let mut config: SplitConfig = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    let bundle = load_bundle(&args.bundle)?;
    let split = gzsl_split(&bundle, &config)?;
    write_json(&split, &args.common.out)?;
    log(
        "split",
        json!({ "out": args.common.out, "train": split.train.len(), "val": split.val.len(), "test": split.test.len() }),
    );
    Ok(())
}

fn epoch_line(session: &TrainSession) {
    let record = session.history().last().expect("an epoch ran");
    log(
        "epoch",
        json!({
            "seed": session.config().seed,
            "epoch": record.epoch,
            "steps": record.steps,
            "loss": record.mean_loss,
            "validation": record.validation,
            "monotone": record.sweep.monotone,
        }),
    );
}

fn train(args: TrainArgs) -> Outcome {
    let bundle = load_bundle(&args.bundle)?;
    let split: GzslSplit = read_json(&args.split)?;
    let out = &args.common.out;
    ensure_dir(out)?;

    if let Some(path) = &args.resume {
        let checkpoint = Checkpoint::load(path)?;
        let session = TrainSession::resume(&bundle, &split, checkpoint)?;
        return train_session(session, out);
    }

    let mut config: TrainConfig = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    config.validate()?;

    match args.seeds {
        None => train_session(TrainSession::new(&bundle, &split, &config)?, out),
        Some(0) => Err(Failure::Invalid("invalid flag `--seeds`: must be at least 1".into())),
        Some(n) => {
            let seeds: Vec<u64> = (config.seed..config.seed + n).collect();
            let summary = run_seeds(&bundle, &split, &config, &seeds)?;
            for run in &summary.runs {
                log("seed", serde_json::to_value(run).expect("serializable"));
            }
            write_json(&summary, &out.join("summary.json"))?;
            let fmt = |m: hmgrl::engine::MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
            log(
                "summary",
                json!({
                    "seeds": seeds,
                    "seen_accuracy": fmt(summary.seen_accuracy),
                    "unseen_accuracy": fmt(summary.unseen_accuracy),
                    "overall_accuracy": fmt(summary.overall_accuracy),
                    "overall_f1": fmt(summary.overall_f1),
                }),
            );
            Ok(())
        }
    }
}

fn train_session(mut session: TrainSession, out: &Path) -> Outcome {
    let path = out.join("checkpoint.json");
    while session.epoch() < session.config().epochs {
        session.run_epoch()?;
        epoch_line(&session);
        session.checkpoint().save(&path)?;
    }
    session.checkpoint().save(&path)?;
    log(
        "trained",
        json!({
            "checkpoint": path,
            "epochs": session.epoch(),
            "best_epoch": session.best().map(|b| b.epoch),
            "gamma": session.best().map(|b| b.gamma),
            "initial_loss": session.initial_loss(),
            "final_loss": session.final_loss(),
        }),
    );
    Ok(())
}

fn restore(bundle: &Path, split: &Path, checkpoint: &Path) -> Result<TrainSession, Failure> {
    let bundle = load_bundle(bundle)?;
    let split: GzslSplit = read_json(split)?;
    Ok(TrainSession::resume(&bundle, &split, Checkpoint::load(checkpoint)?)?)
}

fn eval(args: EvalArgs) -> Outcome {
    if let Some(g) = args.gamma {
        if !(g >= 0.0) {
            return Err(Failure::Invalid(format!("invalid flag `--gamma`: must be non-negative, got {g}")));
        }
    }
    let session = restore(&args.bundle, &args.split, &args.checkpoint)?;
    let outcome = session.evaluate_test(args.gamma)?;
    write_json(&outcome.report, &args.out)?;
    if let Some(path) = &args.features {
        write_features(&session.test_features()?, path)?;
    }
    log(
        "eval",
        json!({ "out": args.out, "report": outcome.report, "monotone": outcome.sweep.monotone }),
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Outcome {
    let session = restore(&args.bundle, &args.split, &args.checkpoint)?;
    let k = args.k.unwrap_or(session.config().k);
    if k == 0 {
        return Err(Failure::Invalid("invalid flag `--k`: must be at least 1".into()));
    }
    let features = session.synthesize(k, args.seed)?;
    write_features(&features, &args.out)?;
    log(
        "synth",
        json!({ "out": args.out, "rows": features.labels.len(), "cols": features.features.cols() }),
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Outcome {
    let mut opts: GradcheckOptions = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        opts.seed = seed;
    }
    if args.corrupt.is_some() {
        opts.corrupt = args.corrupt;
    }
    let report = run_gradcheck(&opts)?;
    for e in &report.entries {
        log("gradcheck", serde_json::to_value(e).expect("serializable"));
    }
    if let Some(path) = &args.out {
        write_json(&report, path)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        Err(Failure::Numerical(format!(
            "gradient check exceeded {:e} for {}",
            report.threshold,
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "event": "error", "code": f.code(), "message": f.message() }));
            ExitCode::from(f.code())
        }
    }
}
