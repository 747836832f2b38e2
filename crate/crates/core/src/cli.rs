//! The `zeroshot` command line.
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 data, 4 numeric,
//! 5 checkpoint version.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, load_tsv, write_tsv, CueVariant, DataError, Dataset};
use crate::error::ModelError;
use crate::eval::{aggregate_seeds, compare_methods, evaluate, render_table, AggregateReport, Metric, MetricsReport, TTest};
use crate::headscore::HeadId;
use crate::heatmap::{render_ansi, render_html};
use crate::pipeline::{sweep, sweep_summary, train_checkpoint, Scorer, SweepRow};
use crate::scores::{ImportanceScores, Method, ScoresParseError};
use crate::train::write_log;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ZEROSHOT_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Version(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Version(_) => 5,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let m = e.to_string();
        match e {
            ModelError::Config(_)
            | ModelError::Contract(_)
            | ModelError::MissingParam(_)
            | ModelError::Index(_)
            | ModelError::Length { .. } => CliError::Config(m),
            ModelError::Alignment(_) | ModelError::Validation(_) => CliError::Data(m),
            ModelError::Data(d) => d.into(),
            ModelError::Tensor(_)
            | ModelError::Conditioning(_)
            | ModelError::Undefined(_)
            | ModelError::Divergence { .. } => CliError::Numeric(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Version { .. } => CliError::Version(e.to_string()),
            CheckpointError::Json(_) => CliError::Data(e.to_string()),
            CheckpointError::Data(d) => d.into(),
            CheckpointError::Model(m) => m.into(),
        }
    }
}

impl From<ScoresParseError> for CliError {
    fn from(e: ScoresParseError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Html,
}

#[derive(Debug, Parser)]
#[command(name = "zeroshot", version, about = "Zero-shot token labeling from sentence classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// YAML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; defaults to a location under $ZEROSHOT_OUT_DIR (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic cue corpus as train/dev/test TSV files.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Train a sentence classifier and write checkpoint, config snapshot and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Write word importance scores for a dataset.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Token-labelled dev set for head selection and threshold tuning.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Fixed attention head as LAYER:HEAD.
        #[arg(long)]
        head: Option<HeadId>,
        /// LIME perturbation samples per sentence.
        #[arg(long)]
        samples: Option<usize>,
        /// Row name used by eval and heatmap.
        #[arg(long)]
        label: Option<String>,
    },
    /// Compute metrics for one or more scores files.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Paired t-test between two rows, as NAME,NAME.
        #[arg(long)]
        compare: Option<String>,
        #[arg(long, value_enum, default_value = "map")]
        metric: MetricArg,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render scores files as stacked word heatmaps.
    Heatmap {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per beta and seed; report dev MAP and sentence F1.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Single,
    Paired,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Map,
    TokenF1,
    SentenceF1,
}

impl MetricArg {
    fn metric(self) -> Metric {
        match self {
            MetricArg::Map => |r| r.map,
            MetricArg::TokenF1 => |r| r.token.f1,
            MetricArg::SentenceF1 => |r| r.sentence.map_or(f64::NAN, |s| s.f1),
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Ok(ExperimentConfig::from_yaml(&text)?)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

/// Train and dev sets: files first, else the synthetic generator; dev falls
/// back to a seeded holdout of train.
fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Option<Dataset>), CliError> {
    let (train, dev, test) = match &cfg.data.train {
        Some(p) => {
            let dev = cfg.data.dev.as_deref().map(load_tsv).transpose()?;
            let test = cfg.data.test.as_deref().map(load_tsv).transpose()?;
            (load_tsv(p)?, dev, test)
        }
        None => {
            let syn = cfg.data.synthetic.clone().unwrap_or_default();
            let s = generate_synthetic(&syn)?;
            (s.train, Some(s.dev), Some(s.test))
        }
    };
    let (train, dev) = match dev {
        Some(d) => (train, d),
        None => train.holdout(cfg.data.dev_fraction, cfg.seed),
    };
    Ok((train, dev, test))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { common, variant } => {
            let cfg = load_config(common.config.as_deref())?;
            let mut syn = cfg.data.synthetic.unwrap_or_default();
            if let Some(s) = common.seed {
                syn.seed = s;
            }
            if let Some(v) = variant {
                syn.variant = match v {
                    VariantArg::Single => CueVariant::Single,
                    VariantArg::Paired => CueVariant::Paired,
                };
            }
            let splits = generate_synthetic(&syn)?;
            let dir = common.out.unwrap_or_else(|| default_out_dir().join("synthetic"));
            write_file(&dir.join("train.tsv"), &write_tsv(&splits.train))?;
            write_file(&dir.join("dev.tsv"), &write_tsv(&splits.dev))?;
            write_file(&dir.join("test.tsv"), &write_tsv(&splits.test))?;
            write_file(&dir.join("cues.txt"), &(splits.cues.join("\n") + "\n"))?;
            eprintln!("wrote {}", dir.display());
            Ok(())
        }
        Command::Train {
            common,
            beta,
            gamma,
            epochs,
            train,
            dev,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(g) = gamma {
                cfg.gamma = g;
            }
            if let Some(e) = epochs {
                cfg.num_train_epochs = e;
            }
            if train.is_some() {
                cfg.data.train = train;
            }
            if dev.is_some() {
                cfg.data.dev = dev;
            }
            cfg.validate()?;
            let (train, dev, test) = load_splits(&cfg)?;
            let run = train_checkpoint(&train, &dev, cfg.data.split, &cfg.model_config(), &cfg.train_config())?;
            let dir = common.out.unwrap_or_else(|| default_out_dir().join(format!("seed{}", cfg.seed)));
            let ck_path = dir.join("checkpoint.json");
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            run.checkpoint.save(&ck_path)?;
            write_file(&dir.join("config.yaml"), &cfg.to_yaml())?;
            let mut log = Vec::new();
            write_log(&run.log, &mut log).expect("in-memory write");
            write_file(&dir.join("train_log.jsonl"), &String::from_utf8_lossy(&log))?;
            if cfg.data.train.is_none() {
                write_file(&dir.join("train.tsv"), &write_tsv(&train))?;
                write_file(&dir.join("dev.tsv"), &write_tsv(&dev))?;
                if let Some(t) = &test {
                    write_file(&dir.join("test.tsv"), &write_tsv(t))?;
                }
            }
            eprintln!(
                "best epoch {} (dev sentence F1 {:.4}); wrote {}",
                run.best_epoch,
                run.best_dev_f1,
                ck_path.display()
            );
            Ok(())
        }
        Command::Score {
            common,
            checkpoint,
            data,
            dev,
            method,
            beta,
            threshold,
            head,
            samples,
            label,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let scorer = Scorer::new(Checkpoint::load(&checkpoint)?)?;
            let ds = load_tsv(&data)?;
            let dev = dev.as_deref().map(load_tsv).transpose()?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let mut scores = match method {
                Method::Soft | Method::WeightedSoft => {
                    scorer.soft(&ds, method, beta, cfg.head_scoring.aggregation)?
                }
                Method::Head => {
                    let mut opts = cfg.head_scoring.clone();
                    if head.is_some() {
                        opts.head = head;
                    }
                    scorer.head(&ds, dev.as_ref(), &opts, threshold)?
                }
                Method::Lime => {
                    let mut lime = cfg.lime.clone();
                    lime.seed = seed;
                    if let Some(n) = samples {
                        lime.n_samples = n;
                    }
                    scorer.lime(&ds, dev.as_ref(), &lime, threshold)?
                }
                Method::Random => scorer.random(&ds, seed)?,
            };
            if let (Some(t), Method::Soft | Method::WeightedSoft | Method::Random) = (threshold, method) {
                scores.threshold = t;
            }
            if let Some(l) = label {
                scores.meta.insert("label".into(), l);
            }
            let path = common
                .out
                .unwrap_or_else(|| default_out_dir().join(format!("{method}.scores")));
            write_file(&path, &scores.to_text())?;
            for key in ["head", "dev_map", "gold_token_labels_used", "warning"] {
                if let Some(v) = scores.meta.get(key) {
                    eprintln!("{key}: {v}");
                }
            }
            eprintln!("threshold: {}; wrote {}", scores.threshold, path.display());
            Ok(())
        }
        Command::Eval {
            gold,
            scores,
            compare,
            metric,
            format,
            out,
        } => {
            let gold = load_tsv(&gold)?;
            let report = eval_files(&gold, &scores, compare.as_deref(), metric.metric())?;
            let text = match format {
                Format::Json => to_json(&report),
                Format::Table => {
                    let mut t = render_table(&report.aggregates);
                    if let Some(c) = &report.comparison {
                        t.push_str(&format!(
                            "\n{} vs {}: t = {:.4}, df = {}, p = {:.4}\n",
                            c.a, c.b, c.test.t, c.test.df, c.test.p_value
                        ));
                    }
                    t
                }
                Format::Html => return Err(CliError::Config("eval supports json and table".into())),
            };
            emit(out.as_deref(), &text)
        }
        Command::Heatmap { scores, format, out } => {
            let stack = scores
                .iter()
                .map(|p| read_scores(p))
                .collect::<Result<Vec<_>, _>>()?;
            let text = match format {
                Format::Table => render_ansi(&stack)?,
                Format::Html => render_html(&stack)?,
                Format::Json => return Err(CliError::Config("heatmap supports table and html".into())),
            };
            emit(out.as_deref(), &text)
        }
        Command::Sweep {
            common,
            betas,
            seeds,
            gamma,
            epochs,
            format,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(g) = gamma {
                cfg.gamma = g;
            }
            if let Some(e) = epochs {
                cfg.num_train_epochs = e;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let (train, dev, _) = load_splits(&cfg)?;
            let rows = sweep(&train, &dev, cfg.data.split, &cfg.model_config(), &cfg.train_config(), &betas, &seeds)?;
            let text = match format {
                Format::Json => to_json(&SweepReport::new(rows)),
                Format::Table => render_sweep(&rows),
                Format::Html => return Err(CliError::Config("sweep supports json and table".into())),
            };
            emit(common.out.as_deref(), &text)
        }
    }
}

fn read_scores(path: &Path) -> Result<ImportanceScores, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    ImportanceScores::from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn row_name(s: &ImportanceScores) -> String {
    s.meta.get("label").cloned().unwrap_or_else(|| s.method.to_string())
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub test: TTest,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub reports: Vec<NamedReport>,
    pub aggregates: Vec<AggregateReport>,
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Serialize)]
pub struct NamedReport {
    pub name: String,
    pub file: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Per-file reports, per-name seed aggregates (in first-seen order) and an
/// optional paired comparison.
fn eval_files(gold: &Dataset, files: &[PathBuf], compare: Option<&str>, metric: Metric) -> Result<EvalReport, CliError> {
    let mut groups: Vec<(String, Vec<MetricsReport>)> = Vec::new();
    let mut reports = Vec::new();
    for p in files {
        let s = read_scores(p)?;
        let name = row_name(&s);
        let r = evaluate(&s, gold).map_err(|e| CliError::from(e).with_prefix(p))?;
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, g)) => g.push(r.clone()),
            None => groups.push((name.clone(), vec![r.clone()])),
        }
        reports.push(NamedReport {
            name,
            file: p.display().to_string(),
            report: r,
        });
    }
    let mut aggregates = Vec::new();
    for (name, g) in &groups {
        let mut a = aggregate_seeds(g)?;
        if *name != a.method.to_string() {
            a.label = Some(name.clone());
        }
        aggregates.push(a);
    }
    let comparison = match compare {
        None => None,
        Some(spec) => {
            let (a, b) = spec
                .split_once(',')
                .ok_or_else(|| CliError::Config(format!("--compare expects NAME,NAME, got {spec:?}")))?;
            let find = |n: &str| {
                groups
                    .iter()
                    .find(|(g, _)| g == n)
                    .map(|(_, r)| r.as_slice())
                    .ok_or_else(|| CliError::Config(format!("no scores named {n:?}")))
            };
            let test = compare_methods(find(a)?, find(b)?, metric)?;
            Some(Comparison {
                a: a.into(),
                b: b.into(),
                test,
            })
        }
    };
    Ok(EvalReport {
        reports,
        aggregates,
        comparison,
    })
}

impl CliError {
    fn with_prefix(self, path: &Path) -> Self {
        let p = |m: String| format!("{}: {m}", path.display());
        match self {
            CliError::Config(m) => CliError::Config(p(m)),
            CliError::Data(m) => CliError::Data(p(m)),
            CliError::Numeric(m) => CliError::Numeric(p(m)),
            CliError::Version(m) => CliError::Version(p(m)),
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepReport {
    rows: Vec<SweepRow>,
    summary: Vec<BTreeMap<&'static str, f64>>,
}

impl SweepReport {
    fn new(rows: Vec<SweepRow>) -> Self {
        let summary = sweep_summary(&rows)
            .into_iter()
            .map(|(b, map, f1)| BTreeMap::from([("beta", b), ("dev_map", map), ("dev_sentence_f1", f1)]))
            .collect();
        Self { rows, summary }
    }
}

fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>6}  {:>6}  {:>11}  {:>7}\n", "beta", "seeds", "Dev Sent F1", "Dev MAP");
    for (b, map, f1) in sweep_summary(rows) {
        let n = rows.iter().filter(|r| r.beta == b).count();
        out.push_str(&format!(
            "{:>6}  {:>6}  {:>11.2}  {:>7.2}\n",
            b,
            n,
            100.0 * f1,
            100.0 * map
        ));
    }
    out
}
