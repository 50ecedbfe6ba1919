//! textcal: train, evaluate, and calibrate desk-scale text classifiers
//! from the command line.
//!
//! Exit codes: 0 on success, 1 on a usage error (unknown flags, missing
//! arguments), 2 on a data or configuration error. `--json` switches
//! stdout to a single machine-readable JSON document per invocation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use textcal_core::data::{
    inject_noise, load_jsonl, synth_dataset, write_jsonl, ClassPrior, Dataset, SynthSpec,
};
use textcal_core::evaluation::{
    bin_predictions_grouped, ece_classwise, ece_standard, fit_temperature, reliability_csv_string,
    BinGrouping, CalibrationReport, TemperatureFit, DEFAULT_BINS,
};
use textcal_core::losses::{cross_entropy, ProbBatch};
use textcal_core::model::{checkpoint_from_str, checkpoint_to_string, Model};
use textcal_core::sphere::{frame_to_csv, gram_penalty, optimize_frame, FrameOptConfig};
use textcal_core::trainer::{evaluate, model_logits, train, HeadKind, RunRecord, TrainConfig};
use textcal_core::{Error, Result};

/// Supplies the default seed when a command's `--seed` flag is absent.
/// Explicit flags and config-file values take precedence; this is the
/// only environment variable the tool reads.
const SEED_ENV: &str = "TEXTCAL_SEED";

#[derive(Parser)]
#[command(
    name = "textcal",
    version,
    about = "Calibration-aware text classification toolkit"
)]
struct Cli {
    /// Emit a machine-readable JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize K unit label directions on the (H-1)-sphere, emit CSV.
    SphereGen(SphereGenArgs),
    /// Train a classifier from a JSON run configuration.
    Train(TrainArgs),
    /// Score a labeled JSONL corpus with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Fit a softmax temperature on a held-out corpus.
    Calibrate(CalibrateArgs),
    /// Corrupt a fraction of JSONL labels deterministically.
    Noise(NoiseArgs),
    /// Emit reliability-diagram cells as CSV.
    Report(ReportArgs),
    /// Generate a synthetic keyword corpus as JSONL.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SphereGenArgs {
    /// Number of label directions (K >= 2).
    #[arg(long)]
    k: usize,
    /// Ambient dimension (H >= 1).
    #[arg(long)]
    h: usize,
    /// Restart seed; defaults to TEXTCAL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Projected-gradient iterations per restart.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Initial step size of the decaying schedule.
    #[arg(long)]
    step_size: Option<f64>,
    /// Destination CSV; omitted means report only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum HeadChoice {
    Hyperspherical,
    Linear,
}

impl From<HeadChoice> for HeadKind {
    fn from(h: HeadChoice) -> HeadKind {
        match h {
            HeadChoice::Hyperspherical => HeadKind::Hyperspherical,
            HeadChoice::Linear => HeadKind::Linear,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override: training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override: mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override: fixed step size.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override: decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Override: epochs feeding the uncertainty-threshold running mean.
    #[arg(long)]
    warm_epochs: Option<usize>,
    /// Override: run seed. Beats the config file and TEXTCAL_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: output head.
    #[arg(long, value_enum)]
    head: Option<HeadChoice>,
    /// Override: rebalanced accuracy-uncertainty loss weight.
    #[arg(long)]
    rau_weight: Option<f64>,
    /// Override: accuracy-versus-uncertainty loss weight.
    #[arg(long)]
    avuc_weight: Option<f64>,
    /// Override: empirical-posterior KL weight.
    #[arg(long)]
    kl_weight: Option<f64>,
    /// Override: reliability bins used for dev/test metrics.
    #[arg(long)]
    bins: Option<usize>,
    /// Checkpoint destination.
    #[arg(long, default_value = "model.json")]
    out_model: PathBuf,
    /// Run-record destination.
    #[arg(long, default_value = "record.json")]
    out_record: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Labeled JSONL corpus to score.
    #[arg(long)]
    data: PathBuf,
    /// Reliability bins.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Temperature fit produced by `calibrate`.
    #[arg(long, conflicts_with = "temperature")]
    temperature_file: Option<PathBuf>,
    /// Fixed temperature to divide the logits by.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Held-out labeled JSONL corpus the fit is made on.
    #[arg(long)]
    data: PathBuf,
    /// Reliability bins for the before/after calibration error.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Fit destination.
    #[arg(long, default_value = "temperature.json")]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    /// Fraction of labels to change; exactly round(fraction * N) lines.
    #[arg(long)]
    fraction: f64,
    /// Corruption seed; defaults to TEXTCAL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Source JSONL corpus.
    input: PathBuf,
    /// Destination JSONL corpus.
    output: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GroupingChoice {
    Predicted,
    Gold,
}

impl From<GroupingChoice> for BinGrouping {
    fn from(g: GroupingChoice) -> BinGrouping {
        match g {
            GroupingChoice::Predicted => BinGrouping::Predicted,
            GroupingChoice::Gold => BinGrouping::Gold,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Labeled JSONL corpus to score.
    #[arg(long)]
    data: PathBuf,
    /// Reliability bins.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Label each cell by the predicted or the gold class.
    #[arg(long, value_enum, default_value_t = GroupingChoice::Predicted)]
    grouping: GroupingChoice,
    /// CSV destination.
    #[arg(long, default_value = "reliability.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of classes (K >= 2).
    #[arg(long)]
    k: usize,
    /// Corpus size (N >= K).
    #[arg(long)]
    n: usize,
    /// Per-word cross-class contamination rate.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Geometric class-prior decay; omitted means uniform classes.
    #[arg(long)]
    ratio: Option<f64>,
    /// Generator seed; defaults to TEXTCAL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Destination JSONL corpus.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else a
            // clap error catches is a usage problem.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SphereGen(a) => cmd_sphere_gen(a, cli.json),
        Command::Train(a) => cmd_train(a, cli.json),
        Command::Evaluate(a) => cmd_evaluate(a, cli.json),
        Command::Calibrate(a) => cmd_calibrate(a, cli.json),
        Command::Noise(a) => cmd_noise(a, cli.json),
        Command::Report(a) => cmd_report(a, cli.json),
        Command::Synth(a) => cmd_synth(a, cli.json),
    }
}

// --- shared helpers ----------------------------------------------------------

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::config(format!("{SEED_ENV} is not valid unicode")))
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint_from_str(&read_file(path)?)
}

fn print_report(report: &CalibrationReport) {
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        report.accuracy, report.precision, report.recall, report.f1
    );
    println!(
        "ece_classwise {:.4}  ece_standard {:.4}",
        report.ece_classwise, report.ece_standard
    );
    if let Some(t) = report.temperature {
        println!(
            "temperature {:.4} (nll {:.4} -> {:.4})",
            t.t, t.dev_nll_before, t.dev_nll_after
        );
    }
    for pl in &report.per_label {
        println!("label {}: f1 {:.4}  ece {:.4}", pl.label, pl.f1, pl.ece);
    }
}

// --- subcommands --------------------------------------------------------------

fn cmd_sphere_gen(a: &SphereGenArgs, as_json: bool) -> Result<()> {
    if a.k < 2 {
        return Err(Error::config(format!("--k must be at least 2, got {}", a.k)));
    }
    if a.h < 1 {
        return Err(Error::config(format!("--h must be at least 1, got {}", a.h)));
    }
    let mut cfg = FrameOptConfig {
        seed: resolve_seed(a.seed)?,
        ..FrameOptConfig::default()
    };
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    let frame = optimize_frame::<f64>(a.k, a.h, &cfg);
    let max_cos = frame.max_pairwise_cosine();
    let penalty = gram_penalty(&frame);
    let bound = -1.0 / (a.k as f64 - 1.0);
    if let Some(out) = &a.out {
        write_file(out, &frame_to_csv(&frame))?;
    }
    if as_json {
        println!(
            "{}",
            json!({
                "k": a.k,
                "h": a.h,
                "seed": cfg.seed,
                "max_pairwise_cosine": max_cos,
                "gram_penalty": penalty,
                "simplex_bound": bound,
                "out": a.out.as_ref().map(|p| p.display().to_string()),
            })
        );
    } else {
        println!(
            "frame k={} h={}: max pairwise cosine {:.6e}, simplex bound {:.6e}",
            a.k, a.h, max_cos, bound
        );
        if let Some(out) = &a.out {
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, as_json: bool) -> Result<()> {
    let text = read_file(&a.config)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::config("config root must be a JSON object".to_string()))?;
    // Seed precedence: --seed flag, then the config file, then TEXTCAL_SEED.
    if a.seed.is_none() && !obj.contains_key("seed") {
        if let Some(seed) = env_seed()? {
            obj.insert("seed".to_string(), json!(seed));
        }
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.warm_epochs {
        cfg.u_theta_warm_epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.head {
        cfg.model.head = v.into();
    }
    if let Some(v) = a.rau_weight {
        cfg.loss.rau_weight = v;
    }
    if let Some(v) = a.avuc_weight {
        cfg.loss.avuc_weight = v;
    }
    if let Some(v) = a.kl_weight {
        cfg.loss.kl_weight = v;
    }
    if let Some(v) = a.bins {
        cfg.eval_bins = v;
    }
    let (model, record) = train(&cfg)?;
    write_file(&a.out_model, &checkpoint_to_string(&model)?)?;
    write_file(&a.out_record, &serde_json::to_string(&record)?)?;
    if as_json {
        println!("{}", serde_json::to_string(&record)?);
    } else {
        print_train_summary(&record);
        println!("wrote {} and {}", a.out_model.display(), a.out_record.display());
    }
    Ok(())
}

fn print_train_summary(record: &RunRecord) {
    let epochs = record.epochs.len();
    if let Some(last) = record.epochs.last() {
        println!(
            "trained {epochs} epochs: total loss {:.4}, u_theta {:.4} (aux {})",
            last.total_loss,
            last.u_theta,
            if last.aux_active { "active" } else { "off" }
        );
    }
    match &record.test {
        Some(report) => {
            println!("test split:");
            print_report(report);
        }
        None => println!("no test split configured"),
    }
    if let Some(secs) = record.wall_clock_secs {
        println!("wall clock {secs:.1}s");
    }
}

fn cmd_evaluate(a: &EvaluateArgs, as_json: bool) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_jsonl(&a.data)?;
    let fit = match (&a.temperature_file, a.temperature) {
        (Some(path), None) => Some(serde_json::from_str::<TemperatureFit>(&read_file(path)?)?),
        (None, Some(t)) => Some(manual_fit(&model, &ds, t)?),
        (None, None) => None,
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let report = evaluate(&model, &ds, a.bins, fit)?;
    if as_json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print_report(&report);
    }
    Ok(())
}

/// Temperature fit at a fixed T: the before/after likelihoods are computed
/// on the corpus being evaluated, since no separate fitting set exists.
fn manual_fit(model: &Model, ds: &Dataset, t: f64) -> Result<TemperatureFit> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("--temperature must be positive and finite, got {t}")));
    }
    let (logits, gold) = model_logits(model, ds)?;
    let before = cross_entropy(&logits, &gold).value;
    let scaled = logits.map(|v| v / t);
    let after = cross_entropy(&scaled, &gold).value;
    Ok(TemperatureFit { t, dev_nll_before: before, dev_nll_after: after })
}

fn cmd_calibrate(a: &CalibrateArgs, as_json: bool) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_jsonl(&a.data)?;
    let (logits, gold) = model_logits(&model, &ds)?;
    let fit = fit_temperature(&logits, &gold)?;
    let before = ProbBatch::from_logits(&logits, gold.clone())?;
    let scaled = logits.map(|v| v / fit.t);
    let after = ProbBatch::from_logits(&scaled, gold)?;
    let ece_before = ece_standard(&before, a.bins);
    let ece_after = ece_standard(&after, a.bins);
    write_file(&a.out, &serde_json::to_string(&fit)?)?;
    if as_json {
        println!(
            "{}",
            json!({
                "t": fit.t,
                "dev_nll_before": fit.dev_nll_before,
                "dev_nll_after": fit.dev_nll_after,
                "ece_standard_before": ece_before,
                "ece_standard_after": ece_after,
                "out": a.out.display().to_string(),
            })
        );
    } else {
        println!(
            "fitted temperature {:.4}: nll {:.4} -> {:.4}, ece_standard {:.4} -> {:.4}",
            fit.t, fit.dev_nll_before, fit.dev_nll_after, ece_before, ece_after
        );
        println!("wrote {}", a.out.display());
    }
    Ok(())
}

fn cmd_noise(a: &NoiseArgs, as_json: bool) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let ds = load_jsonl(&a.input)?;
    let corrupted = inject_noise(&ds, a.fraction, seed)?;
    let changed = ds
        .labels()
        .iter()
        .zip(corrupted.labels())
        .filter(|(a, b)| *a != b)
        .count();
    write_jsonl(&corrupted, &a.output)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", a.output.display())))?;
    if as_json {
        println!(
            "{}",
            json!({
                "input": a.input.display().to_string(),
                "output": a.output.display().to_string(),
                "total": ds.len(),
                "changed": changed,
                "fraction": a.fraction,
                "seed": seed,
            })
        );
    } else {
        println!(
            "wrote {}: changed {changed} of {} labels (fraction {}, seed {seed})",
            a.output.display(),
            ds.len(),
            a.fraction
        );
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs, as_json: bool) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_jsonl(&a.data)?;
    let (logits, gold) = model_logits(&model, &ds)?;
    let batch = ProbBatch::from_logits(&logits, gold)?;
    let bins = bin_predictions_grouped(&batch, a.bins, a.grouping.into());
    let csv = reliability_csv_string(&bins);
    write_file(&a.out, &csv)?;
    // Rows beyond the header, one per populated (label, bin) cell.
    let rows = csv.lines().count() - 1;
    let std_ece = ece_standard(&batch, a.bins);
    let cls_ece = ece_classwise(
        &bin_predictions_grouped(&batch, a.bins, BinGrouping::Predicted),
        batch.len(),
        batch.k(),
    );
    if as_json {
        println!(
            "{}",
            json!({
                "out": a.out.display().to_string(),
                "rows": rows,
                "bins": a.bins,
                "k": batch.k(),
                "n": batch.len(),
                "grouping": match a.grouping {
                    GroupingChoice::Predicted => "predicted",
                    GroupingChoice::Gold => "gold",
                },
                "ece_classwise": cls_ece,
                "ece_standard": std_ece,
            })
        );
    } else {
        println!(
            "wrote {} ({rows} rows, {} bins, k={}, n={})",
            a.out.display(),
            a.bins,
            batch.k(),
            batch.len()
        );
        println!("ece_classwise {cls_ece:.4}  ece_standard {std_ece:.4}");
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, as_json: bool) -> Result<()> {
    let prior = match a.ratio {
        Some(ratio) => ClassPrior::Geometric { ratio },
        None => ClassPrior::Uniform,
    };
    let spec = SynthSpec {
        k: a.k,
        n: a.n,
        noise: a.noise,
        seed: resolve_seed(a.seed)?,
        prior,
    };
    let ds = synth_dataset(&spec)?;
    write_jsonl(&ds, &a.out)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", a.out.display())))?;
    if as_json {
        println!(
            "{}",
            json!({
                "out": a.out.display().to_string(),
                "k": ds.k(),
                "n": ds.len(),
                "noise": a.noise,
                "seed": spec.seed,
                "label_counts": ds.label_counts(),
            })
        );
    } else {
        println!(
            "wrote {}: {} samples, k={}, noise {}, label counts {:?}",
            a.out.display(),
            ds.len(),
            ds.k(),
            a.noise,
            ds.label_counts()
        );
    }
    Ok(())
}
