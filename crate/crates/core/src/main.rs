use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use capstext::ablate::{render_table, render_tsv, run_ablation, AblationGrid, Toggle};
use capstext::config::{RunConfig, SEED_ENV};
use capstext::diff::{Precision, Real, SquashKind};
use capstext::experiment::{evaluate_auto, fit_run, resolve_for_data};
use capstext::io::write_atomic;
use capstext::model::{predict, Architecture, LossKind, Model, PredictMode};
use capstext::strength::{export_strengths, strength_records, top_ngrams};
use capstext::synth::{KeywordCorpus, SynthSpec};
use capstext::text::{encode_tokens, load_dataset, load_split, tokenize, DatasetSplits, LabeledExample, Vocabulary};
use capstext::train::{
    checkpoint_precision, evaluate_multi, evaluate_single, load_checkpoint, prepare_samples, save_checkpoint,
    MetricsReport,
};

#[derive(Parser, Debug)]
#[command(name = "capstext", version, about = "Capsule networks with dynamic routing for text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Label raw sentences, one per input line.
    Predict(PredictArgs),
    /// Dump routing coefficients per n-gram as JSON Lines.
    ExportStrengths(ExportArgs),
    /// Train and score a grid of routing and layer options.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.tsv, dev.tsv and test.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate a seeded keyword corpus with this many classes instead of reading --data.
    #[arg(long, value_name = "CLASSES")]
    synthetic: Option<usize>,
    /// word2vec text-format vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    #[arg(long)]
    routing_iters: Option<usize>,
    #[arg(long)]
    no_leaky: bool,
    #[arg(long)]
    no_orphan: bool,
    #[arg(long)]
    no_amendment: bool,
    #[arg(long)]
    shared_weights: bool,
    /// Plain softmax routing without coefficient amendment.
    #[arg(long)]
    baseline_routing: bool,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long, value_parser = parse_squash)]
    squash: Option<SquashKind>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Drop multi-label documents from train and dev.
    #[arg(long)]
    transfer: bool,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint path, default <out>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Auto,
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Args, Debug)]
struct SourceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; --split picks the file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// A single labeled TSV file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    mode: Mode,
    /// Multi-label threshold; defaults to the checkpoint's.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also report macro-averaged P/R/F1.
    #[arg(long = "macro")]
    with_macro: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Plain text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Single)]
    mode: Mode,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Print the K strongest n-grams per category.
    #[arg(long, value_name = "K")]
    top: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Toggles to vary: iterations, leaky, orphan, amend, shared.
    #[arg(long, value_delimiter = ',', value_parser = parse_toggle)]
    vary: Option<Vec<Toggle>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
    losses: Option<Vec<LossKind>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_squash)]
    squashes: Option<Vec<SquashKind>>,
    /// Configurations trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e: capstext::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: capstext::Error| e.to_string())
}

fn parse_squash(s: &str) -> Result<SquashKind, String> {
    s.parse().map_err(|e: capstext::Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: capstext::Error| e.to_string())
}

fn parse_toggle(s: &str) -> Result<Toggle, String> {
    s.parse().map_err(|e: capstext::Error| e.to_string())
}

fn resolve_run(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut run = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| run.set(k, &v);
    if let Some(v) = &args.data {
        set("data", v.display().to_string())?;
    }
    if let Some(v) = &args.embeddings {
        set("embeddings", v.display().to_string())?;
    }
    if let Some(v) = &args.out {
        set("out", v.display().to_string())?;
    }
    if let Some(v) = args.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = args.arch {
        set("arch", v.to_string())?;
    }
    if let Some(v) = args.routing_iters {
        set("routing_iters", v.to_string())?;
    }
    if args.no_leaky {
        set("leaky", "false".into())?;
    }
    if args.no_orphan {
        set("orphan", "false".into())?;
    }
    if args.no_amendment {
        set("amend", "false".into())?;
    }
    if args.shared_weights {
        set("shared_weights", "true".into())?;
    }
    if args.baseline_routing {
        set("baseline_routing", "true".into())?;
    }
    if let Some(v) = args.loss {
        set("loss", v.to_string())?;
    }
    if let Some(v) = args.squash {
        set("squash", v.to_string())?;
    }
    if let Some(v) = args.threshold {
        set("threshold", v.to_string())?;
    }
    if let Some(v) = args.max_len {
        set("max_len", v.to_string())?;
    }
    if let Some(v) = args.epochs {
        set("epochs", v.to_string())?;
    }
    if let Some(v) = args.batch_size {
        set("batch_size", v.to_string())?;
    }
    if let Some(v) = args.learning_rate {
        set("learning_rate", v.to_string())?;
    }
    if let Some(v) = args.precision {
        set("precision", if v == Precision::F64 { "f64".into() } else { "f32".into() })?;
    }
    if args.transfer {
        set("transfer", "true".into())?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        run.set(k.trim(), v)?;
    }
    let env = std::env::var(SEED_ENV).ok();
    run.seed_fallback(env.as_deref())?;
    Ok(run)
}

fn load_splits(args: &RunArgs, run: &RunConfig) -> anyhow::Result<DatasetSplits> {
    let mut splits = match (args.synthetic, &run.data) {
        (Some(classes), _) => {
            let spec = SynthSpec { classes, seed: run.model.seed, ..SynthSpec::default() };
            let mut corpus = KeywordCorpus::new(spec)?;
            if run.transfer {
                corpus.transfer_splits(200, 50, 100)?
            } else {
                corpus.splits(200, 50, 100)
            }
        }
        (None, Some(dir)) => load_dataset(dir)?,
        (None, None) => bail!("no training data: pass --data DIR, --synthetic CLASSES or set `data` in the config"),
    };
    if run.transfer {
        let dropped = splits.restrict_to_single_label_training();
        if dropped > 0 {
            eprintln!("transfer: dropped {dropped} multi-label documents from train/dev");
        }
    }
    Ok(splits)
}

fn echo_config(run: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", run.render());
    println!();
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = resolve_run(&args.run)?;
    if let Some(p) = &args.checkpoint {
        run.checkpoint = Some(p.clone());
    }
    let splits = load_splits(&args.run, &run)?;
    resolve_for_data(&mut run, &splits);
    run.model.validate()?;
    run.train.validate()?;
    echo_config(&run);
    ensure_dir(&run.out)?;
    write_atomic(&run.out.join("run.cfg"), run.render().as_bytes())?;
    match run.train.precision {
        Precision::F32 => train_with::<f32>(&run, &splits),
        Precision::F64 => train_with::<f64>(&run, &splits),
    }
}

fn train_with<F: Real>(run: &RunConfig, splits: &DatasetSplits) -> anyhow::Result<()> {
    let trained = fit_run::<F>(run, splits)?;
    let ckpt = run.checkpoint.clone().unwrap_or_else(|| run.out.join("model.ckpt"));
    save_checkpoint(&trained.model, &trained.vocab, &ckpt)?;
    let history = run.out.join("history.csv");
    trained.history.write_csv(&history)?;
    let losses = trained.history.epoch_losses();
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {:>3}  mean loss {l:.6}", e + 1);
    }
    if let Some(best) = trained.history.best_epoch {
        println!("kept parameters from epoch {}", best + 1);
    }
    let mut reports = serde_json::Map::new();
    for (name, split) in [("dev", &splits.dev), ("test", &splits.test)] {
        if split.is_empty() {
            continue;
        }
        let samples = prepare_samples(&trained.model, &trained.vocab, split)?;
        let report = evaluate_auto(&trained.model, &samples, run.model.threshold, false)?;
        println!("\n{name}:");
        print!("{}", report.table());
        reports.insert(name.into(), serde_json::to_value(&report)?);
    }
    write_json(&run.out.join("metrics.json"), &reports)?;
    println!("\ncheckpoint: {}", ckpt.display());
    println!("history:    {}", history.display());
    Ok(())
}

fn checkpoint_run<F: Real>(model: &Model<F>, path: &Path, out: &Path) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = model.config.clone();
    run.max_len = Some(model.config.max_len);
    run.train.seed = model.config.seed;
    run.train.precision = if F::DTYPE == f32::DTYPE { Precision::F32 } else { Precision::F64 };
    run.checkpoint = Some(path.to_path_buf());
    run.out = out.to_path_buf();
    run
}

fn source_examples(src: &SourceArgs) -> anyhow::Result<Vec<LabeledExample>> {
    match (&src.input, &src.data) {
        (Some(file), _) => Ok(load_split(file)?),
        (None, Some(dir)) => {
            let name = match src.split {
                Split::Train => "train.tsv",
                Split::Dev => "dev.tsv",
                Split::Test => "test.tsv",
            };
            Ok(load_split(&dir.join(name))?)
        }
        (None, None) => bail!("pass --input FILE or --data DIR"),
    }
}

macro_rules! with_precision {
    ($path:expr, $f:ident ( $($arg:expr),* )) => {
        match checkpoint_precision($path)? {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    with_precision!(&args.source.checkpoint, eval_with(args))
}

fn eval_with<F: Real>(args: &EvalArgs) -> anyhow::Result<()> {
    let (model, vocab) = load_checkpoint::<F>(&args.source.checkpoint)?;
    let mut run = checkpoint_run(&model, &args.source.checkpoint, &args.source.out);
    if let Some(t) = args.threshold {
        run.set("threshold", &t.to_string())?;
    }
    echo_config(&run);
    let examples = source_examples(&args.source)?;
    let samples = prepare_samples(&model, &vocab, &examples)?;
    let threshold = run.model.threshold;
    let report: MetricsReport = match args.mode {
        Mode::Single => evaluate_single(&model, &samples)?,
        Mode::Multi => evaluate_multi(&model, &samples, threshold, args.with_macro)?,
        Mode::Auto => evaluate_auto(&model, &samples, threshold, args.with_macro)?,
    };
    print!("{}", report.table());
    ensure_dir(&args.source.out)?;
    write_json(&args.source.out.join("metrics.json"), &report)?;
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    with_precision!(&args.checkpoint, predict_with(args))
}

fn predict_with<F: Real>(args: &PredictArgs) -> anyhow::Result<()> {
    let (model, vocab): (Model<F>, Vocabulary) = load_checkpoint(&args.checkpoint)?;
    let mut run = checkpoint_run(&model, &args.checkpoint, &args.out);
    if let Some(t) = args.threshold {
        run.set("threshold", &t.to_string())?;
    }
    echo_config(&run);
    let cfg = &model.config;
    let mode = match args.mode {
        Mode::Multi => PredictMode::Multi { threshold: run.model.threshold },
        _ => PredictMode::Single,
    };
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let sentences = lines
        .iter()
        .map(|l| encode_tokens(&tokenize(l), &vocab, cfg.max_len, cfg.largest_ngram()))
        .collect::<capstext::Result<Vec<_>>>()?;
    let scores = model.scores(&sentences)?;
    let labels = cfg.output_labels();
    let mut out = String::new();
    for probs in &scores {
        let picked: BTreeSet<usize> = predict(probs, cfg.categories.len(), mode);
        let names: Vec<&str> = picked.iter().map(|&k| cfg.categories[k].as_str()).collect();
        let probs: Vec<String> = labels.iter().zip(probs).map(|(l, p)| format!("{l}={p:.4}")).collect();
        let _ = writeln!(out, "{}\t{}", names.join(","), probs.join(" "));
    }
    print!("{out}");
    ensure_dir(&args.out)?;
    write_atomic(&args.out.join("predictions.tsv"), out.as_bytes())?;
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> anyhow::Result<()> {
    with_precision!(&args.source.checkpoint, export_with(args))
}

fn export_with<F: Real>(args: &ExportArgs) -> anyhow::Result<()> {
    let (model, vocab) = load_checkpoint::<F>(&args.source.checkpoint)?;
    let run = checkpoint_run(&model, &args.source.checkpoint, &args.source.out);
    echo_config(&run);
    let examples = source_examples(&args.source)?;
    ensure_dir(&args.source.out)?;
    let path = args.source.out.join("strengths.jsonl");
    let n = export_strengths(&model, &vocab, &examples, &path)?;
    println!("{n} records written to {}", path.display());
    if let Some(k) = args.top {
        let records = strength_records(&model, &vocab, &examples)?;
        for cat in &model.config.categories {
            println!("\n{cat}:");
            for (ngram, c) in top_ngrams(&records, cat, k)? {
                println!("  {c:.4}  {ngram}");
            }
        }
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let mut run = resolve_run(&args.run)?;
    let splits = load_splits(&args.run, &run)?;
    resolve_for_data(&mut run, &splits);
    run.model.validate()?;
    run.train.validate()?;
    let toggles = args.vary.clone().unwrap_or_else(|| Toggle::ALL.to_vec());
    let mut grid = AblationGrid::varying(&run.model, &toggles);
    if let Some(l) = &args.losses {
        grid.losses = l.clone();
    }
    if let Some(s) = &args.squashes {
        grid.squashes = s.clone();
    }
    echo_config(&run);
    println!("# ablation: {} configurations, {} worker(s)\n", grid.len(), args.jobs.max(1));
    let rows = match run.train.precision {
        Precision::F32 => run_ablation::<f32>(&run, &splits, &grid, args.jobs)?,
        Precision::F64 => run_ablation::<f64>(&run, &splits, &grid, args.jobs)?,
    };
    print!("{}", render_table(&rows));
    ensure_dir(&run.out)?;
    write_atomic(&run.out.join("ablation.tsv"), render_tsv(&rows).as_bytes())?;
    write_json(&run.out.join("ablation.json"), &rows)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ExportStrengths(a) => cmd_export(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
