//! The `knowpos` command line: gen-data, train, evaluate, compare.
//!
//! Every flag can also be set through a `KNOWPOS_`-prefixed environment
//! variable (for example `KNOWPOS_SEED=3`). Exit codes: 0 success,
//! 1 invalid configuration or input, 2 runtime failure. Failures print one
//! JSON object on stderr.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::assembly::{SchemeKind, SpecialTokens};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{load_jsonl, save_jsonl};
use crate::harness::{compare, emit_report, format_comparison, read_report, OutputFormat, ReportFile};
use crate::harness::{shuffle_eval, ModelResponder, RunLabels};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::synth::{generate_corpus, generate_test_corpus};
use crate::trainer::{write_log_record, LossMode, Trainer};

#[derive(Parser, Debug)]
#[command(name = "knowpos", version, about = "Knowledge-order effects in grounded dialogue models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train and test corpora.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a step log.
    Train(TrainArgs),
    /// Shuffle-evaluate a checkpoint and write reports.
    Evaluate(EvaluateArgs),
    /// Compare two evaluation reports.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Experiment config (JSON); missing fields take their defaults.
    #[arg(long, env = "KNOWPOS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long, env = "KNOWPOS_OUT")]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long, env = "KNOWPOS_SEED")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Sequential,
    RestartShared,
    RestartPerSlot,
}

impl From<SchemeArg> for SchemeKind {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Sequential => SchemeKind::Sequential,
            SchemeArg::RestartShared => SchemeKind::RestartShared,
            SchemeArg::RestartPerSlot => SchemeKind::RestartPerSlot,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Transfertransfo,
    LmOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Svg,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training corpus (JSONL).
    #[arg(long, env = "KNOWPOS_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, env = "KNOWPOS_SCHEME")]
    pub scheme: Option<SchemeArg>,
    #[arg(long, value_enum, env = "KNOWPOS_LOSS")]
    pub loss: Option<LossArg>,
    /// Knowledge tokens attend only within their own statement (extension).
    #[arg(long, env = "KNOWPOS_ISOLATE_KNOWLEDGE")]
    pub isolate_knowledge: bool,
    /// Continue from this checkpoint's weights and step count.
    #[arg(long, env = "KNOWPOS_RESUME")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, env = "KNOWPOS_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Evaluation corpus (JSONL).
    #[arg(long, env = "KNOWPOS_DATA")]
    pub data: PathBuf,
    /// Expected scheme; must match the checkpoint.
    #[arg(long, value_enum, env = "KNOWPOS_SCHEME")]
    pub scheme: Option<SchemeArg>,
    #[arg(long, env = "KNOWPOS_ISOLATE_KNOWLEDGE")]
    pub isolate_knowledge: bool,
    /// Extra report formats; json and csv are always written.
    #[arg(long, value_enum, env = "KNOWPOS_FORMAT", value_delimiter = ',')]
    pub format: Vec<FormatArg>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Baseline report (JSON).
    pub report_a: PathBuf,
    /// Candidate report (JSON).
    pub report_b: PathBuf,
    #[arg(long, env = "KNOWPOS_OUT")]
    pub out: Option<PathBuf>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "validation",
            message: message.into(),
            field: None,
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "runtime",
            message: message.into(),
            field: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = json!({"error": self.kind, "code": self.code, "message": self.message});
        if let Some(f) = &self.field {
            v["field"] = json!(f);
        }
        v.to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Io { .. }) { 2 } else { 1 };
        Self {
            code,
            kind: if code == 1 { "validation" } else { "runtime" },
            field: e.field().map(str::to_owned),
            message: e.to_string(),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::runtime(e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    match &common.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(common_out: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = common_out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Echoes the resolved config into the output directory.
fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_file(&dir.join("config.json"), &(cfg.to_json_pretty() + "\n"))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("{what} not found: {}", path.display())))
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<String, CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    let dir = out_dir(&args.common.out, &cfg)?;
    let train = generate_corpus(&cfg.corpus).map_err(|e| CliError::validation(e.to_string()))?;
    let test = generate_test_corpus(&cfg.corpus).map_err(|e| CliError::validation(e.to_string()))?;
    save_jsonl(&train, &dir.join("train.jsonl")).map_err(runtime)?;
    save_jsonl(&test, &dir.join("test.jsonl")).map_err(runtime)?;
    let vocab = cfg.corpus.vocab();
    let words: Vec<&str> = (0..vocab.len() as u32).filter_map(|i| vocab.word(i)).collect();
    write_file(&dir.join("vocab.txt"), &(words.join("\n") + "\n"))?;
    echo_config(&dir, &cfg)?;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &train {
        *hist.entry(s.k()).or_default() += 1;
    }
    Ok(json!({
        "n": train.len(),
        "n_test": test.len(),
        "k_histogram": hist,
        "vocab": cfg.corpus.vocab_size(),
        "out": dir.display().to_string(),
    })
    .to_string())
}

pub fn train(args: &TrainArgs) -> Result<String, CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(s) = args.scheme {
        cfg.model.scheme.kind = s.into();
    }
    if args.isolate_knowledge {
        cfg.model.scheme.isolate_knowledge = true;
    }
    if let Some(l) = args.loss {
        cfg.train.loss_mode = match l {
            LossArg::Transfertransfo => LossMode::TransferTransfo,
            LossArg::LmOnly => LossMode::LmOnly,
        };
    }
    let (mut model, start_step) = match &args.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let ck = load_checkpoint(p).map_err(runtime)?;
            if ck.model.config.scheme != cfg.model.scheme {
                return Err(CliError::validation(format!(
                    "checkpoint uses scheme {} but the run asks for {}",
                    ck.model.config.scheme.label(),
                    cfg.model.scheme.label()
                )));
            }
            cfg.model = ck.model.config.clone();
            let step = ck.meta.get("next_step").and_then(|v| v.as_u64()).unwrap_or(0);
            (ck.model, step)
        }
        None => {
            cfg.validate()?;
            (Model::init(cfg.model.clone()).map_err(|e| CliError::validation(e.to_string()))?, 0)
        }
    };
    cfg.validate()?;
    require_file(&args.data, "data file")?;
    let corpus = load_jsonl(&args.data).map_err(|e| CliError::validation(e.to_string()))?;
    let dir = out_dir(&args.common.out, &cfg)?;
    echo_config(&dir, &cfg)?;

    let log_path = dir.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| CliError::runtime(format!("{}: {e}", log_path.display())))?;
    let mut w = BufWriter::new(file);
    let mut io_err = None;
    let trainer = Trainer {
        model_config: &cfg.model,
        train_config: &cfg.train,
        specials: SpecialTokens::default(),
        start_step,
    };
    let result = trainer.train(&mut model, &corpus, |rec| {
        if io_err.is_none() {
            if let Err(e) = write_log_record(&mut w, rec) {
                io_err = Some(e);
            }
        }
    });
    w.flush().map_err(runtime)?;
    if let Some(e) = io_err {
        return Err(CliError::runtime(format!("{}: {e}", log_path.display())));
    }
    let log = result.map_err(runtime)?;
    let next_step = log.records.last().map_or(start_step, |r| r.step + 1);
    let ck_path = dir.join("checkpoint.bin");
    let meta = json!({
        "next_step": next_step,
        "loss_mode": cfg.train.loss_mode.as_str(),
        "train": cfg.train,
        "corpus_seed": cfg.corpus.seed,
    });
    save_checkpoint(&ck_path, &model, &meta).map_err(runtime)?;
    Ok(json!({
        "steps": log.records.len(),
        "next_step": next_step,
        "examples": log.n_examples,
        "skipped_overflow": log.skipped_overflow,
        "nsp_evaluations": log.nsp_evaluations,
        "final_total_loss": log.records.last().map(|r| r.total_loss),
        "checkpoint": ck_path.display().to_string(),
    })
    .to_string())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<String, CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.protocol.seed = s;
    }
    cfg.protocol.validate().map_err(|e| CliError::validation(e.to_string()))?;
    require_file(&args.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(&args.checkpoint).map_err(runtime)?;
    let trained = ck.model.config.scheme;
    let mut wanted = trained;
    if let Some(s) = args.scheme {
        wanted.kind = s.into();
    }
    if args.isolate_knowledge {
        wanted.isolate_knowledge = true;
    }
    if wanted != trained {
        return Err(CliError::validation(format!(
            "checkpoint was trained with scheme {} but evaluation asks for {}",
            trained.label(),
            wanted.label()
        )));
    }
    cfg.model = ck.model.config.clone();
    require_file(&args.data, "data file")?;
    let data = load_jsonl(&args.data).map_err(|e| CliError::validation(e.to_string()))?;
    let dir = out_dir(&args.common.out, &cfg)?;
    echo_config(&dir, &cfg)?;

    let loss_mode = ck.meta.get("loss_mode").and_then(|v| v.as_str()).unwrap_or("unknown").to_string();
    let responder = ModelResponder {
        model: &ck.model,
        specials: SpecialTokens::default(),
        decode: cfg.protocol.decode,
        max_new_tokens: cfg.protocol.max_new_tokens,
    };
    let labels = RunLabels {
        scheme: trained.label(),
        loss_mode,
    };
    let reports = shuffle_eval(&responder, &data, &cfg.protocol, &labels).map_err(|e| match e {
        crate::harness::HarnessError::Incompatible(_) | crate::harness::HarnessError::MissingFacts(_) => {
            CliError::validation(e.to_string())
        }
        other => runtime(other),
    })?;
    let file = ReportFile::new(reports);
    let mut formats = vec![OutputFormat::Json, OutputFormat::Csv];
    if args.format.contains(&FormatArg::Svg) {
        formats.push(OutputFormat::Svg);
    }
    let mut written = Vec::new();
    for f in formats {
        let path = dir.join(format!("report.{}", f.extension()));
        emit_report(&file, f, &path).map_err(runtime)?;
        written.push(path.display().to_string());
    }
    let summary: Vec<_> = file
        .reports
        .iter()
        .map(|r| {
            json!({
                "k": r.k,
                "max_min_gap": r.max_min_gap,
                "grounding_accuracy": r.grounding_accuracy,
                "ppl_mean": r.ppl_mean,
                "self_bleu_mean": r.self_bleu_mean,
            })
        })
        .collect();
    Ok(json!({"reports": summary, "written": written}).to_string())
}

pub fn compare_cmd(args: &CompareArgs) -> Result<String, CliError> {
    for p in [&args.report_a, &args.report_b] {
        require_file(p, "report")?;
    }
    let a = read_report(&args.report_a).map_err(|e| CliError::validation(e.to_string()))?;
    let b = read_report(&args.report_b).map_err(|e| CliError::validation(e.to_string()))?;
    let c = compare(&a, &b).map_err(|e| CliError::validation(e.to_string()))?;
    let table = format_comparison(&c);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join("comparison.txt"), &table)?;
        let js = serde_json::to_string_pretty(&c).map_err(runtime)?;
        write_file(&dir.join("comparison.json"), &(js + "\n"))?;
    }
    Ok(table.trim_end().to_string())
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

/// Parses `args`, runs the command, prints the outcome and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", CliError::validation(first).to_json());
            return 1;
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}
