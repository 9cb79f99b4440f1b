//! Commands behind the `pimi` binary.
//!
//! Results go to the writer handed to [`run`] (stdout in the binary);
//! progress and diagnostics go to stderr. Failures map to the exit codes
//! in [`exit_code`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pimi_core::dataset::{generate_synthetic, ingest_with_vocab, SynthConfig, Vocabulary};
use pimi_core::model::load_checkpoint;
use pimi_core::retrieval::{evaluate, user_dump};
use pimi_core::run::{prepare, RunConfig};
use pimi_core::training::{train, TrainConfig};
use pimi_core::{Ablation, Error, MetricsReport, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TEST_SPLIT_FILE: &str = "test.csv";
pub const ABLATION_FILE: &str = "ablation.txt";

#[derive(Debug, Parser)]
#[command(
    name = "pimi",
    version,
    about = "Train and evaluate a periodic multi-interest recommender"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset and evaluate the best checkpoint on held-out users.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write a planted-interest dataset and its cluster labels.
    Synth(SynthArgs),
    /// Train the full model and each ablated variant on the same split.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `out`, the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `topn`, e.g. `20,50`.
    #[arg(long, value_delimiter = ',')]
    pub topn: Option<Vec<usize>>,
    /// Also write per-user retrieval records for the test users.
    #[arg(long)]
    pub dump_users: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`; `vocab.tsv` is read from its directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Interaction CSV of the users to evaluate.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,50")]
    pub topn: Vec<usize>,
    /// Metrics file; defaults to `eval_metrics.txt` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dump_users: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV; labels go to `<stem>.labels.tsv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Input { .. } => 5,
        Error::Io { .. } => 6,
        Error::Shape { .. } | Error::Contract(_) => 70,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Synth(args) => cmd_synth(&args, out),
        Command::Ablate(args) => cmd_ablate(&args, out),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

/// Reads the run configuration and applies command-line overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = &args.topn {
        cfg.train.topn = t.clone();
        if !t.contains(&cfg.train.early_stop_topn) {
            if let Some(&max) = t.iter().max() {
                cfg.train.early_stop_topn = max;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// What one training run leaves behind.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub test: MetricsReport,
}

/// Trains `cfg` into its run directory:
///
/// * `config.txt`: resolved configuration, written first
/// * `vocab.tsv`, `test.csv`: item ids and the held-out test users
/// * `checkpoint.bin`: parameters at the best validation
/// * `train_log.txt`, `summary.txt`: validation history and its best record
/// * `metrics.txt`: test metrics of the best checkpoint
pub fn train_run(cfg: &RunConfig, dump_users: Option<&Path>) -> Result<RunSummary> {
    let dir = cfg.out.clone();
    create_dir(&dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_kv())?;
    let data = prepare(cfg)?;
    eprintln!(
        "{}: {} users, {} items; split {}/{}/{}",
        cfg.model.ablation.label(),
        data.log.num_users(),
        data.log.num_items(),
        data.train.num_users(),
        data.valid.num_users(),
        data.test.num_users()
    );
    data.log.vocab.write(&dir.join(VOCAB_FILE))?;
    data.test.write_csv(&dir.join(TEST_SPLIT_FILE))?;

    let ckpt = dir.join(CHECKPOINT_FILE);
    let outcome = train(
        &data.train,
        &data.valid,
        &cfg.model,
        &cfg.train,
        Some(&ckpt),
    )?;
    write_file(&dir.join(TRAIN_LOG_FILE), &outcome.report.to_log())?;
    write_file(&dir.join(SUMMARY_FILE), &outcome.report.summary())?;

    let eval = evaluate(
        &outcome.best,
        &cfg.model,
        &data.test,
        &cfg.train.topn,
        cfg.train.prefix_ratio,
    )?;
    write_file(&dir.join(METRICS_FILE), &eval.report.to_kv())?;
    if let Some(path) = dump_users {
        write_file(path, &user_dump(&eval.users, &data.log.vocab))?;
    }
    let best = outcome
        .report
        .best_iteration
        .map_or_else(|| "none".to_owned(), |i| i.to_string());
    eprintln!(
        "{}: {} iterations, best at {best}",
        cfg.model.ablation.label(),
        outcome.report.iterations
    );
    Ok(RunSummary {
        dir,
        test: eval.report,
    })
}

pub fn cmd_train(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let summary = train_run(&cfg, args.dump_users.as_deref())?;
    emit(out, &summary.test.to_table())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    if args.topn.is_empty() || args.topn.contains(&0) {
        return Err(Error::Config("field `topn` needs positive entries".into()));
    }
    let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let (model, params) = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
    if vocab.num_items() != params.num_items() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} items but {} lists {}",
            params.num_items(),
            VOCAB_FILE,
            vocab.num_items()
        )));
    }
    let prefix_ratio = match RunConfig::load(&dir.join(CONFIG_FILE)) {
        Ok(cfg) => cfg.train.prefix_ratio,
        Err(_) => TrainConfig::default().prefix_ratio,
    };
    let log = ingest_with_vocab(&args.data, &vocab)?;
    if log.unknown_item_rows > 0 {
        eprintln!(
            "skipped {} rows with items outside the vocabulary",
            log.unknown_item_rows
        );
    }
    let eval = evaluate(&params, &model, &log, &args.topn, prefix_ratio)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| dir.join("eval_metrics.txt"));
    write_file(&path, &eval.report.to_kv())?;
    if let Some(p) = &args.dump_users {
        write_file(p, &user_dump(&eval.users, &vocab))?;
    }
    emit(out, &eval.report.to_table())
}

/// Sidecar path for the cluster labels of a synthetic CSV.
pub fn labels_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map_or_else(|| "synth".into(), |s| s.to_string_lossy().into_owned());
    csv.with_file_name(format!("{stem}.labels.tsv"))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            SynthConfig::from_kv_text(&text)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = generate_synthetic(&cfg)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let log = data.to_log();
    log.write_csv(&args.out)?;
    let labels = labels_path(&args.out);
    write_file(&labels, &data.labels_tsv())?;
    emit(
        out,
        &format!(
            "wrote {} interactions for {} users to {}\nlabels: {}\n",
            log.num_interactions(),
            log.num_users(),
            args.out.display(),
            labels.display()
        ),
    )
}

/// Full model first, then each component removed in turn.
pub fn ablation_variants() -> [Ablation; 4] {
    [
        Ablation::default(),
        Ablation {
            disable_periodicity: true,
            ..Ablation::default()
        },
        Ablation {
            disable_interactivity: true,
            ..Ablation::default()
        },
        Ablation {
            disable_central_node: true,
            ..Ablation::default()
        },
    ]
}

/// One row per variant, one column per metric and N.
pub fn ablation_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    let ns: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.at.keys().copied().collect())
        .unwrap_or_default();
    let _ = write!(out, "{:<20}", "Variant");
    for n in &ns {
        for m in ["Recall", "NDCG", "HitRate"] {
            let _ = write!(out, "  {:>10}", format!("{m}@{n}"));
        }
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<20}");
        for n in &ns {
            let m = report.get(*n).copied().unwrap_or_default();
            let _ = write!(
                out,
                "  {:>10.4}  {:>10.4}  {:>10.4}",
                m.recall, m.ndcg, m.hit_rate
            );
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let base = resolve_config(args)?;
    create_dir(&base.out)?;
    let mut rows = Vec::new();
    let mut kv = String::new();
    for ablation in ablation_variants() {
        let label = ablation.label();
        let mut cfg = base.clone();
        cfg.model.ablation = ablation;
        cfg.out = base.out.join(&label);
        let summary = train_run(&cfg, None)?;
        for (n, m) in &summary.test.at {
            let _ = writeln!(kv, "{label}.recall@{n} = {}", m.recall);
            let _ = writeln!(kv, "{label}.ndcg@{n} = {}", m.ndcg);
            let _ = writeln!(kv, "{label}.hit_rate@{n} = {}", m.hit_rate);
        }
        rows.push((label, summary.test));
    }
    write_file(&base.out.join(ABLATION_FILE), &kv)?;
    emit(out, &ablation_table(&rows))
}
