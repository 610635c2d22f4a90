//! The `pathlm` command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{self, compute_stats, make_split, preprocess, DiagnosisElement, InputFormat, DIAGNOSIS};
use crate::coverage::{class_coverage, word_coverage, CoverageReport};
use crate::encoder::checkpoint::{self, CheckpointHeader};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{dump_inferences, eval_classification, eval_mlm, inferences_markdown};
use crate::io::{read_jsonl, read_to_string, write_atomic, write_json_pretty, write_jsonl};
use crate::synthcorpus::{generate, TemplateSpec};
use crate::training::{finetune, log_csv, predict_labels, pretrain, pretrain_from, FinetuneConfig, PretrainConfig};
use crate::wordpiece::{train_vocab, TrainerConfig, Vocabulary};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "pathlm", version, about = "Pathology report language modeling pipeline")]
pub struct Cli {
    /// Worker threads for parallel stages [default: available cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Random seed [default: config file seed, else 42]
    #[arg(long, global = true, env = "PATHLM_SEED")]
    pub seed: Option<u64>,

    /// Write a JSON run manifest (effective configuration, inputs, outputs, wall time)
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Only log warnings and errors
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract, split, normalize and de-identify diagnosis elements
    Preprocess(PreprocessArgs),
    /// Train a WordPiece vocabulary
    TrainVocab(TrainVocabArgs),
    /// Full-word vocabulary coverage per frequency threshold and per class
    Coverage(CoverageArgs),
    /// Masked-LM pretraining
    Pretrain(PretrainArgs),
    /// Multi-label fine-tuning with early stopping
    Finetune(FinetuneArgs),
    /// Masked prediction accuracy across mask rates
    EvalMlm(EvalMlmArgs),
    /// Classification metrics with bootstrap confidence intervals
    EvalCls(EvalClsArgs),
    /// Top predictions for sentences containing one [MASK] marker
    Dump(DumpArgs),
    /// Generate a synthetic report corpus
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Jsonl,
    Plain,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Report JSONL file, or a directory of plain-text reports with --format plain
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: Format,
    /// Diagnosis elements JSONL
    #[arg(long)]
    pub output: PathBuf,
    /// Section to extract [default: DIAGNOSIS]
    #[arg(long)]
    pub section: Option<String>,
    /// Corpus statistics JSON
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Also write train.jsonl, validation.jsonl and test.jsonl here
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
    /// Train/validation/test ratios [default: 0.7,0.1,0.2]
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainVocabArgs {
    /// Diagnosis elements JSONL
    #[arg(long)]
    pub input: PathBuf,
    /// Vocabulary file, one token per line
    #[arg(long)]
    pub output: PathBuf,
    /// Vocabulary budget including special tokens [default: 13000]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Minimum pair frequency for a merge [default: 2]
    #[arg(long)]
    pub min_frequency: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Diagnosis elements JSONL
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Load the vocabulary leniently (files from other toolkits)
    #[arg(long)]
    pub foreign: bool,
    /// Frequency thresholds
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    pub thresholds: Vec<u64>,
    /// Writes coverage.json, coverage_thresholds.csv and coverage_classes.csv
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Encoder layers [default: 2]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden size [default: 64]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Attention heads [default: 2]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward size [default: 256]
    #[arg(long)]
    pub ff: Option<usize>,
    /// Maximum sequence length including [CLS] and [SEP] [default: 64]
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Dropout rate during pretraining [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Training elements JSONL
    #[arg(long)]
    pub train: PathBuf,
    /// Validation elements JSONL
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    pub output: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training log CSV (step,train_loss,val_metric)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Optimizer steps [default: 300000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate [default: 2e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.15]
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// Validation interval in steps [default: 1000]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Checkpoint interval in steps, written to --checkpoint-dir [default: 0, off]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Labeled training elements JSONL
    #[arg(long)]
    pub train: PathBuf,
    /// Development elements JSONL [default: 10% of --train]
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Per-epoch development metrics JSON
    #[arg(long)]
    pub epoch_log: Option<PathBuf>,
    /// Label names in head order [default: the six severity categories]
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// [default: 6]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 2e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Probability at or above which a label is asserted [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalMlmArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Elements JSONL (labels, when present, give per-class rows)
    #[arg(long)]
    pub input: PathBuf,
    /// [default: 0.15,0.30,0.45,0.60,0.75]
    #[arg(long, value_delimiter = ',')]
    pub mask_rates: Option<Vec<f64>>,
    /// Top-k cutoff [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Writes mlm_report.json, mlm_report.csv and mlm_classes.csv
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalClsArgs {
    /// Fine-tuned checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Labeled elements JSONL
    #[arg(long)]
    pub input: PathBuf,
    /// [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// [default: 1000]
    #[arg(long)]
    pub n_bootstrap: Option<usize>,
    /// Confidence level [default: 0.95]
    #[arg(long)]
    pub ci: Option<f64>,
    /// Writes cls_report.json, cls_report.csv and predictions.jsonl
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Text file, one sentence per line, each with one [MASK]
    #[arg(long)]
    pub input: PathBuf,
    /// [default: 3]
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Markdown table
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the predictions as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Template spec JSON [default: the bundled spec]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the spec's report count
    #[arg(long)]
    pub n_reports: Option<usize>,
    /// Pin every slot to one fill per template
    #[arg(long)]
    pub deterministic: bool,
    /// Reports JSONL
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        ModelSection {
            n_layers: d.n_layers,
            hidden_dim: d.hidden_dim,
            n_heads: d.n_heads,
            ff_dim: d.ff_dim,
            max_seq_len: d.max_seq_len,
            dropout_rate: d.dropout_rate,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout_rate: self.dropout_rate,
            n_labels: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mask_rates: Vec<f64>,
    pub k: usize,
    pub n_bootstrap: usize,
    pub ci: f64,
    pub top_n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mask_rates: vec![0.15, 0.30, 0.45, 0.60, 0.75],
            k: 5,
            n_bootstrap: 1000,
            ci: 0.95,
            top_n: 3,
        }
    }
}

/// Everything a run can be configured with. Built from defaults, then the
/// `--config` file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub section: String,
    pub split_ratios: (f64, f64, f64),
    pub trainer: TrainerConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            section: DIAGNOSIS.to_string(),
            split_ratios: corpus::DEFAULT_RATIOS,
            trainer: TrainerConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets `value` at a dotted path in `target` when present.
fn set<T: Serialize>(target: &mut Value, path: &str, value: Option<T>) {
    if let Some(v) = value {
        let mut patch = serde_json::to_value(v).expect("flag values serialize");
        for key in path.rsplit('.') {
            patch = json!({ key: patch });
        }
        merge(target, patch);
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

/// Effective configuration: defaults, then the config file, then `flags`
/// (a JSON object of only the flags that were given).
fn resolve(cli: &Cli, flags: Value) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &cli.config {
        let file: Value = serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file);
    }
    merge(&mut value, flags);
    if let Some(seed) = cli.seed {
        value["seed"] = json!(seed);
    }
    let mut config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.pretrain.seed = config.seed;
    config.finetune.seed = config.seed;
    Ok(config)
}

fn sha256_file(path: &Path) -> Result<String> {
    if path.is_dir() {
        return Ok("directory".into());
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run<'a> {
    cli: &'a Cli,
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    extra: serde_json::Map<String, Value>,
}

impl Run<'_> {
    fn input(&mut self, path: &Path) -> Result<()> {
        require(path)?;
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    fn wrote(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn finish(self, config: &RunConfig) -> Result<()> {
        let Some(path) = &self.cli.manifest else {
            return Ok(());
        };
        let hashes = |paths: &[PathBuf]| -> Result<Value> {
            paths
                .iter()
                .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? })))
                .collect::<Result<Vec<_>>>()
                .map(Value::from)
        };
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "threads": rayon::current_num_threads(),
            "inputs": hashes(&self.inputs)?,
            "outputs": hashes(&self.outputs)?,
            "details": self.extra,
            "timing": {
                "wall_seconds": self.started.elapsed().as_secs_f64(),
                "finished_unix": SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            },
        });
        write_json_pretty(path, &manifest)
    }
}

fn load_elements(path: &Path) -> Result<Vec<DiagnosisElement>> {
    read_jsonl(path)
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path, Some(vocab))
}

/// Runs a parsed command line and returns its one-line summary.
pub fn run(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // Fails only when a pool already exists, e.g. when called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut run = Run {
        cli,
        command: "",
        started: Instant::now(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        extra: serde_json::Map::new(),
    };
    let mut flags = json!({});
    let summary;
    let config;
    match &cli.command {
        Command::Preprocess(a) => {
            run.command = "preprocess";
            set(&mut flags, "section", a.section.clone());
            set(
                &mut flags,
                "split_ratios",
                a.ratios.as_ref().map(|r| (r[0], r[1], r[2])),
            );
            config = resolve(cli, flags)?;
            run.input(&a.input)?;
            let format = match a.format {
                Format::Jsonl => InputFormat::Jsonl,
                Format::Plain => InputFormat::PlainDir,
            };
            let ingested = corpus::ingest(&a.input, format)?;
            let elements = preprocess(&ingested.reports, &config.section);
            write_jsonl(&a.output, &elements)?;
            run.wrote(&a.output);
            if let Some(p) = &a.stats {
                write_json_pretty(p, &compute_stats(&elements))?;
                run.wrote(p);
            }
            if let Some(dir) = &a.split_dir {
                let split = make_split(&elements, config.split_ratios, config.seed)?;
                for (name, part) in [
                    ("train", &split.train),
                    ("validation", &split.validation),
                    ("test", &split.test),
                ] {
                    let p = dir.join(format!("{name}.jsonl"));
                    write_jsonl(&p, part)?;
                    run.wrote(&p);
                }
            }
            run.extra.insert("skipped_reports".into(), json!(ingested.skipped));
            summary = format!(
                "{} elements from {} reports ({} skipped) -> {}",
                elements.len(),
                ingested.reports.len(),
                ingested.skipped,
                a.output.display()
            );
        }
        Command::TrainVocab(a) => {
            run.command = "train-vocab";
            set(&mut flags, "trainer.vocab_size", a.vocab_size);
            set(&mut flags, "trainer.min_frequency", a.min_frequency);
            config = resolve(cli, flags)?;
            run.input(&a.input)?;
            let elements = load_elements(&a.input)?;
            let vocab = train_vocab(elements.iter().map(|e| e.text.as_str()), &config.trainer)?;
            vocab.save(&a.output)?;
            run.wrote(&a.output);
            run.extra.insert("vocab_hash".into(), json!(vocab.content_hash()));
            summary = format!("{} tokens -> {}", vocab.len(), a.output.display());
        }
        Command::Coverage(a) => {
            run.command = "coverage";
            config = resolve(cli, flags)?;
            run.input(&a.input)?;
            run.input(&a.vocab)?;
            let elements = load_elements(&a.input)?;
            let vocab = if a.foreign {
                Vocabulary::load_foreign(&a.vocab)?
            } else {
                Vocabulary::load(&a.vocab)?
            };
            let report = CoverageReport {
                per_threshold: word_coverage(elements.iter().map(|e| e.text.as_str()), &vocab, &a.thresholds),
                per_class: class_coverage(&elements, &vocab),
            };
            let json_path = a.output_dir.join("coverage.json");
            let t_path = a.output_dir.join("coverage_thresholds.csv");
            let c_path = a.output_dir.join("coverage_classes.csv");
            write_json_pretty(&json_path, &report)?;
            write_atomic(&t_path, &report.threshold_csv()?)?;
            write_atomic(&c_path, &report.class_csv()?)?;
            for p in [&json_path, &t_path, &c_path] {
                run.wrote(p);
            }
            summary = report
                .per_threshold
                .iter()
                .map(|(t, c)| format!("freq>={t}: {:.4}", c.fraction))
                .collect::<Vec<_>>()
                .join(", ");
        }
        Command::Pretrain(a) => {
            run.command = "pretrain";
            set(&mut flags, "model.n_layers", a.model.layers);
            set(&mut flags, "model.hidden_dim", a.model.hidden);
            set(&mut flags, "model.n_heads", a.model.heads);
            set(&mut flags, "model.ff_dim", a.model.ff);
            set(&mut flags, "model.max_seq_len", a.model.max_seq_len);
            set(&mut flags, "model.dropout_rate", a.model.dropout);
            set(&mut flags, "pretrain.total_steps", a.steps);
            set(&mut flags, "pretrain.batch_size", a.batch_size);
            set(&mut flags, "pretrain.lr", a.lr);
            set(&mut flags, "pretrain.mask_rate", a.mask_rate);
            set(&mut flags, "pretrain.eval_every", a.eval_every);
            set(&mut flags, "pretrain.checkpoint_every", a.checkpoint_every);
            config = resolve(cli, flags)?;
            run.input(&a.train)?;
            run.input(&a.vocab)?;
            if let Some(p) = &a.validation {
                run.input(p)?;
            }
            if let Some(p) = &a.init {
                run.input(p)?;
            }
            config.pretrain.validate()?;
            if config.pretrain.checkpoint_every > 0 && a.checkpoint_dir.is_none() {
                return Err(Error::Config("--checkpoint-every needs --checkpoint-dir".into()));
            }
            let vocab = Vocabulary::load(&a.vocab)?;
            let split = corpus::CorpusSplit {
                train: load_elements(&a.train)?,
                validation: a
                    .validation
                    .as_deref()
                    .map(load_elements)
                    .transpose()?
                    .unwrap_or_default(),
                test: Vec::new(),
                seed: config.seed,
            };
            let ckpt_dir = a.checkpoint_dir.as_deref();
            let outcome = match &a.init {
                Some(p) => pretrain_from(
                    load_checkpoint(p, &vocab)?.weights,
                    &split,
                    &vocab,
                    &config.pretrain,
                    ckpt_dir,
                )?,
                None => pretrain(
                    &split,
                    &vocab,
                    config.model.encoder(vocab.len()),
                    &config.pretrain,
                    ckpt_dir,
                )?,
            };
            let header = CheckpointHeader {
                config: outcome.weights.config,
                vocab_hash: vocab.content_hash(),
                step: config.pretrain.total_steps as u64,
                labels: Vec::new(),
            };
            checkpoint::save(&a.output, &outcome.weights, &header)?;
            run.wrote(&a.output);
            if let Some(p) = &a.log {
                write_atomic(p, &log_csv(&outcome.log)?)?;
                run.wrote(p);
            }
            run.extra.insert("vocab_hash".into(), json!(header.vocab_hash));
            run.extra.insert("n_params".into(), json!(outcome.weights.n_params()));
            let last = outcome.log.iter().rev().find_map(|r| r.val_metric);
            summary = format!(
                "{} steps, final train loss {}, validation masked accuracy {} -> {}",
                outcome.log.len(),
                outcome
                    .log
                    .last()
                    .map_or("n/a".into(), |r| format!("{:.4}", r.train_loss)),
                last.map_or("n/a".into(), |v| format!("{v:.4}")),
                a.output.display()
            );
        }
        Command::Finetune(a) => {
            run.command = "finetune";
            set(&mut flags, "finetune.labels", a.labels.clone());
            set(&mut flags, "finetune.epochs", a.epochs);
            set(&mut flags, "finetune.batch_size", a.batch_size);
            set(&mut flags, "finetune.lr", a.lr);
            set(&mut flags, "finetune.dropout", a.dropout);
            set(&mut flags, "finetune.patience", a.patience);
            set(&mut flags, "finetune.decision_threshold", a.threshold);
            config = resolve(cli, flags)?;
            run.input(&a.checkpoint)?;
            run.input(&a.vocab)?;
            run.input(&a.train)?;
            if let Some(p) = &a.dev {
                run.input(p)?;
            }
            config.finetune.validate()?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let pretrained = load_checkpoint(&a.checkpoint, &vocab)?;
            let train = load_elements(&a.train)?;
            let dev = a.dev.as_deref().map(load_elements).transpose()?;
            let outcome = finetune(&pretrained.weights, &train, dev.as_deref(), &vocab, &config.finetune)?;
            let header = CheckpointHeader {
                config: outcome.weights.config,
                vocab_hash: vocab.content_hash(),
                step: pretrained.header.step + outcome.log.len() as u64,
                labels: config.finetune.labels.clone(),
            };
            checkpoint::save(&a.output, &outcome.weights, &header)?;
            run.wrote(&a.output);
            if let Some(p) = &a.log {
                write_atomic(p, &log_csv(&outcome.log)?)?;
                run.wrote(p);
            }
            if let Some(p) = &a.epoch_log {
                write_json_pretty(p, &outcome.epochs)?;
                run.wrote(p);
            }
            run.extra.insert("vocab_hash".into(), json!(header.vocab_hash));
            run.extra.insert("best_epoch".into(), json!(outcome.best_epoch));
            let best = outcome.epochs[outcome.best_epoch - 1].dev_micro_f1;
            summary = format!(
                "best epoch {} of {}, development micro-F1 {best:.4} -> {}",
                outcome.best_epoch,
                outcome.epochs.len(),
                a.output.display()
            );
        }
        Command::EvalMlm(a) => {
            run.command = "eval-mlm";
            set(&mut flags, "eval.mask_rates", a.mask_rates.clone());
            set(&mut flags, "eval.k", a.k);
            config = resolve(cli, flags)?;
            run.input(&a.checkpoint)?;
            run.input(&a.vocab)?;
            run.input(&a.input)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let ck = load_checkpoint(&a.checkpoint, &vocab)?;
            let elements = load_elements(&a.input)?;
            let report = eval_mlm(
                &ck.weights,
                &elements,
                &vocab,
                &config.eval.mask_rates,
                config.eval.k,
                config.seed,
            )?;
            let paths = [
                a.output_dir.join("mlm_report.json"),
                a.output_dir.join("mlm_report.csv"),
                a.output_dir.join("mlm_classes.csv"),
            ];
            write_json_pretty(&paths[0], &report)?;
            write_atomic(&paths[1], &report.to_csv()?)?;
            write_atomic(&paths[2], &report.class_csv()?)?;
            for p in &paths {
                run.wrote(p);
            }
            summary = report
                .rows
                .iter()
                .map(|r| format!("{:.2}: {:.4}/{:.4}", r.mask_rate, r.accuracy, r.top_k_accuracy))
                .collect::<Vec<_>>()
                .join(", ");
        }
        Command::EvalCls(a) => {
            run.command = "eval-cls";
            set(&mut flags, "finetune.decision_threshold", a.threshold);
            set(&mut flags, "eval.n_bootstrap", a.n_bootstrap);
            set(&mut flags, "eval.ci", a.ci);
            config = resolve(cli, flags)?;
            run.input(&a.checkpoint)?;
            run.input(&a.vocab)?;
            run.input(&a.input)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let ck = load_checkpoint(&a.checkpoint, &vocab)?;
            if ck.header.labels.is_empty() {
                return Err(Error::MissingHead);
            }
            let labels = &ck.header.labels;
            let elements = load_elements(&a.input)?;
            let texts: Vec<&str> = elements.iter().map(|e| e.text.as_str()).collect();
            let predictions = predict_labels(&ck.weights, labels, &texts, &vocab, config.finetune.decision_threshold)?;
            let predicted: Vec<BTreeSet<String>> = predictions.iter().map(|p| p.labels.clone()).collect();
            let truth: Vec<BTreeSet<String>> = elements.iter().map(|e| e.labels.clone().unwrap_or_default()).collect();
            let report = eval_classification(
                &predicted,
                &truth,
                labels,
                config.eval.n_bootstrap,
                config.eval.ci,
                config.seed,
            )?;
            let paths = [
                a.output_dir.join("cls_report.json"),
                a.output_dir.join("cls_report.csv"),
                a.output_dir.join("predictions.jsonl"),
            ];
            write_json_pretty(&paths[0], &report)?;
            write_atomic(&paths[1], &report.to_csv()?)?;
            let rows: Vec<Value> = elements
                .iter()
                .zip(&predictions)
                .map(|(e, p)| json!({ "report_id": e.source_report_id, "labels": p.labels, "probabilities": p.probabilities }))
                .collect();
            write_jsonl(&paths[2], &rows)?;
            for p in &paths {
                run.wrote(p);
            }
            summary = format!(
                "micro-F1 {:.4} [{:.4}, {:.4}], exact-match accuracy {:.4} over {} samples",
                report.micro_f1.value,
                report.micro_f1.low,
                report.micro_f1.high,
                report.accuracy.value,
                report.n_samples
            );
        }
        Command::Dump(a) => {
            run.command = "dump";
            set(&mut flags, "eval.top_n", a.top_n);
            config = resolve(cli, flags)?;
            run.input(&a.checkpoint)?;
            run.input(&a.vocab)?;
            run.input(&a.input)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let ck = load_checkpoint(&a.checkpoint, &vocab)?;
            let text = read_to_string(&a.input)?;
            let sentences: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            let rows = dump_inferences(&ck.weights, &sentences, &vocab, config.eval.top_n)?;
            write_atomic(&a.output, inferences_markdown(&rows).as_bytes())?;
            run.wrote(&a.output);
            if let Some(p) = &a.json {
                write_json_pretty(p, &rows)?;
                run.wrote(p);
            }
            let errors = rows.iter().filter(|r| r.error.is_some()).count();
            summary = format!("{} sentences ({errors} rejected) -> {}", rows.len(), a.output.display());
        }
        Command::Synth(a) => {
            run.command = "synth";
            config = resolve(cli, flags)?;
            let mut spec = match &a.spec {
                Some(p) => {
                    run.input(p)?;
                    TemplateSpec::from_json(&read_to_string(p)?)?
                }
                None => TemplateSpec::bundled(),
            };
            if let Some(n) = a.n_reports {
                spec.n_reports = n;
            }
            if cli.seed.is_some() || cli.config.is_some() {
                spec.seed = config.seed;
            }
            if a.deterministic {
                spec = spec.deterministic();
            }
            let reports = generate(&spec)?;
            write_jsonl(&a.output, &reports)?;
            run.wrote(&a.output);
            run.extra.insert("spec_seed".into(), json!(spec.seed));
            summary = format!("{} reports -> {}", reports.len(), a.output.display());
        }
    }
    run.finish(&config)?;
    Ok(summary)
}

/// Process exit code for an error: 3 when training diverged, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}
