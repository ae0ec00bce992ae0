//! The `codesum` command line: mine, stats, prepare, train, summarize and
//! evaluate.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize};

use crate::corpus::{self, Corpus, DedupMode, Field, SplitSpec};
use crate::git_miner::{self, MinerDedup, MiningConfig, DEFAULT_EXTENSIONS};
use crate::metrics::{self, BleuAggregate};
use crate::model::{self, Checkpoint, Hyperparams};
use crate::tokenizer::{self, TokenMode, Vocabulary, DEFAULT_FILTERS, DEFAULT_MAX_SIZE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

/// Flat settings document. Every key has a default; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub max_commits: Option<usize>,
    pub include_extensions: Vec<String>,
    pub skip_merge_commits: bool,
    pub dedup_mode: MinerDedup,
    /// Seed for interleaving several mined repositories.
    pub interleave_seed: u64,

    pub max_source_tokens: Option<usize>,
    pub max_target_tokens: Option<usize>,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,

    pub token_mode: TokenMode,
    pub vocab_max_size: usize,
    pub filter_set: String,

    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub max_source_len: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// `true`/`false` or `"on"`/`"off"`.
    #[serde(deserialize_with = "on_off")]
    pub attention: bool,

    pub bleu_aggregate: BleuAggregate,
}

fn on_off<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Toggle {
        Bool(bool),
        Word(String),
    }
    match Toggle::deserialize(d)? {
        Toggle::Bool(b) => Ok(b),
        Toggle::Word(w) if w == "on" => Ok(true),
        Toggle::Word(w) if w == "off" => Ok(false),
        Toggle::Word(w) => Err(serde::de::Error::custom(format!("expected on or off, got {w:?}"))),
    }
}

impl Default for CliConfig {
    fn default() -> Self {
        let hyper = Hyperparams::default();
        let split = SplitSpec::default();
        Self {
            max_commits: None,
            include_extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            skip_merge_commits: true,
            dedup_mode: MinerDedup::None,
            interleave_seed: 0,
            max_source_tokens: None,
            max_target_tokens: None,
            train_frac: split.train_frac,
            val_frac: split.val_frac,
            test_frac: split.test_frac,
            split_seed: split.seed,
            token_mode: TokenMode::Word,
            vocab_max_size: DEFAULT_MAX_SIZE,
            filter_set: DEFAULT_FILTERS.to_string(),
            embedding_dim: hyper.embedding_dim,
            hidden_dim: hyper.hidden_dim,
            attention_dim: hyper.attention_dim,
            layers: hyper.layers,
            learning_rate: hyper.learning_rate,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            max_len: hyper.max_len,
            max_source_len: hyper.max_source_len,
            seed: hyper.seed,
            grad_clip_norm: hyper.grad_clip_norm,
            attention: hyper.attention,
            bleu_aggregate: BleuAggregate::SentenceMean,
        }
    }
}

impl CliConfig {
    /// Reads an optional config file, then applies `key=value` overrides.
    /// Override values are parsed as JSON when possible, else taken as strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<serde_json::Value>(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| CliError::Usage("config must be a JSON object".into()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(key.to_string(), value);
        }
        let config: CliConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        config.hyperparams().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        config.split_spec().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            layers: self.layers,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_len: self.max_len,
            max_source_len: self.max_source_len,
            seed: self.seed,
            grad_clip_norm: self.grad_clip_norm,
            attention: self.attention,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            test_frac: self.test_frac,
            seed: self.split_seed,
        }
    }

    pub fn mining_config(&self, repo: &Path) -> MiningConfig {
        MiningConfig {
            repo_path: repo.to_path_buf(),
            max_commits: self.max_commits,
            include_extensions: self.include_extensions.clone(),
            skip_merge_commits: self.skip_merge_commits,
            dedup_mode: self.dedup_mode,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "codesum", version, about = "Mine, train and score code summarization models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat JSON settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mine (diff, commit message) pairs from local repositories.
    Mine {
        /// Repository to mine. Repeat to interleave several.
        #[arg(long, required = true)]
        repo: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Length histogram of one corpus field as CSV.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        field: Field,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        bin_width: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Deduplicate, length-filter and split corpora into train/val/test.
    Prepare {
        /// Input corpus. Repeat to concatenate several, in order.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        /// Receives train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build vocabularies from the training split and train a model.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch CSV; defaults to `<checkpoint>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy summaries for one file or a whole corpus.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
        input: Option<PathBuf>,
        #[arg(long, requires = "out")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against reference targets.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        comparison: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Mine { repo, out, cfg } => cmd_mine(&repo, &out, &load(&cfg)?),
        Command::Stats {
            corpus,
            field,
            bin_width,
            out,
            cfg,
        } => {
            load(&cfg)?;
            cmd_stats(&corpus, field, bin_width as usize, out.as_deref())
        }
        Command::Prepare { corpus, out_dir, cfg } => cmd_prepare(&corpus, &out_dir, &load(&cfg)?),
        Command::Train {
            train,
            val,
            checkpoint,
            history,
            cfg,
        } => {
            let history = history.unwrap_or_else(|| default_history_path(&checkpoint));
            cmd_train(&train, val.as_deref(), &checkpoint, &history, &load(&cfg)?)
        }
        Command::Summarize {
            checkpoint,
            input,
            corpus,
            out,
            cfg,
        } => {
            load(&cfg)?;
            match (input, corpus, out) {
                (Some(input), None, _) => cmd_summarize_file(&checkpoint, &input),
                (None, Some(corpus), Some(out)) => cmd_summarize_corpus(&checkpoint, &corpus, &out),
                _ => Err(CliError::Usage("give --input, or --corpus with --out".into())),
            }
        }
        Command::Evaluate {
            predictions,
            references,
            report,
            comparison,
            cfg,
        } => cmd_evaluate(&predictions, &references, &report, &comparison, &load(&cfg)?),
    }
}

fn load(cfg: &ConfigArgs) -> Result<CliConfig> {
    CliConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

pub fn default_history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".history.csv");
    PathBuf::from(name)
}

pub fn cmd_mine(repos: &[PathBuf], out: &Path, config: &CliConfig) -> Result<()> {
    let mut corpora = Vec::with_capacity(repos.len());
    for repo in repos {
        let mined = git_miner::mine_repository(&config.mining_config(repo)).map_err(runtime)?;
        eprintln!("{}: {} samples", repo.display(), mined.len());
        corpora.push(mined);
    }
    let corpus = if corpora.len() == 1 {
        corpora.pop().expect("one corpus")
    } else {
        git_miner::interleave(&corpora, config.interleave_seed).map_err(runtime)?
    };
    corpus::write_jsonl(&corpus, out).map_err(runtime)?;
    println!("{}", corpus.len());
    Ok(())
}

pub fn cmd_stats(path: &Path, field: Field, bin_width: usize, out: Option<&Path>) -> Result<()> {
    let corpus = corpus::load_jsonl(path).map_err(runtime)?;
    let csv = corpus::length_histogram(&corpus, field, bin_width).to_csv();
    match out {
        Some(p) => fs::write(p, csv).map_err(io_at(p)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn cmd_prepare(inputs: &[PathBuf], out_dir: &Path, config: &CliConfig) -> Result<()> {
    let mut samples = Vec::new();
    let mut provenance = Vec::new();
    for p in inputs {
        let c = corpus::load_jsonl(p).map_err(runtime)?;
        provenance.push(c.provenance.clone());
        samples.extend(c.samples);
    }
    let mut corpus = Corpus::new(samples, provenance.join("+"));
    corpus.check_unique_ids().map_err(runtime)?;
    match config.dedup_mode {
        MinerDedup::ExactPair => corpus = corpus::deduplicate(&corpus, DedupMode::ExactPair),
        MinerDedup::TargetOnly => corpus = corpus::deduplicate(&corpus, DedupMode::TargetOnly),
        MinerDedup::None => {}
    }
    corpus = corpus::filter_by_length(
        &corpus,
        config.max_source_tokens.unwrap_or(usize::MAX),
        config.max_target_tokens.unwrap_or(usize::MAX),
    );
    let parts = corpus::split(&corpus, &config.split_spec()).map_err(runtime)?;
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        corpus::write_jsonl(part, out_dir.join(format!("{name}.jsonl"))).map_err(runtime)?;
        println!("{name} {}", part.len());
    }
    Ok(())
}

pub fn build_vocabularies(train: &Corpus, config: &CliConfig) -> Result<(Vocabulary, Vocabulary)> {
    let sources: Vec<&str> = train.iter().map(|s| s.source.as_str()).collect();
    let targets: Vec<&str> = train.iter().map(|s| s.target.as_str()).collect();
    let build = |texts: &[&str]| {
        Vocabulary::build(texts, config.token_mode, config.vocab_max_size, &config.filter_set)
            .map_err(|e| CliError::Usage(e.to_string()))
    };
    Ok((build(&sources)?, build(&targets)?))
}

pub fn cmd_train(train: &Path, val: Option<&Path>, checkpoint: &Path, history: &Path, config: &CliConfig) -> Result<()> {
    let train_corpus = corpus::load_jsonl(train).map_err(runtime)?;
    let val_corpus = match val {
        Some(p) => corpus::load_jsonl(p).map_err(runtime)?,
        None => Corpus::new(Vec::new(), ""),
    };
    let (vocab_src, vocab_tgt) = build_vocabularies(&train_corpus, config)?;
    let hyper = config.hyperparams();
    let mut report = |epoch: usize, h: &model::TrainingHistory| {
        let mut line = format!("epoch {epoch} loss {:.4} accuracy {:.4}", h.loss[epoch - 1], h.accuracy[epoch - 1]);
        if let (Some(l), Some(a)) = (h.val_loss.last(), h.val_accuracy.last()) {
            line.push_str(&format!(" val_loss {l:.4} val_accuracy {a:.4}"));
        }
        eprintln!("{line}");
    };
    let (params, hist) =
        model::train_with_callback(&train_corpus, &val_corpus, &vocab_src, &vocab_tgt, &hyper, &mut report)
            .map_err(runtime)?;
    let ck = Checkpoint::new(params, vocab_src, vocab_tgt, hyper).map_err(runtime)?;
    model::save_checkpoint(&ck, checkpoint).map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    fs::write(history, hist.to_csv()).map_err(io_at(history))?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    model::load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_summarize_file(checkpoint: &Path, input: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let source = fs::read_to_string(input).map_err(io_at(input))?;
    println!("{}", ck.summarize(&source).map_err(runtime)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub predicted: String,
}

pub fn predictions_to_jsonl(rows: &[Prediction]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("prediction serializes") + "\n")
        .collect()
}

pub fn parse_predictions(text: &str) -> std::result::Result<Vec<Prediction>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

pub fn cmd_summarize_corpus(checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let corpus = corpus::load_jsonl(corpus_path).map_err(runtime)?;
    let mut rows = Vec::with_capacity(corpus.len());
    for s in &corpus {
        rows.push(Prediction {
            id: s.id.clone(),
            predicted: ck.summarize(&s.source).map_err(runtime)?,
        });
    }
    let mut file = fs::File::create(out).map_err(io_at(out))?;
    file.write_all(predictions_to_jsonl(&rows).as_bytes()).map_err(io_at(out))?;
    println!("{}", rows.len());
    Ok(())
}

pub fn cmd_evaluate(
    predictions: &Path,
    references: &Path,
    report_path: &Path,
    comparison_path: &Path,
    config: &CliConfig,
) -> Result<()> {
    let text = fs::read_to_string(predictions).map_err(io_at(predictions))?;
    let preds = parse_predictions(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", predictions.display())))?;
    let refs = corpus::load_jsonl(references).map_err(runtime)?;

    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for p in &preds {
        if by_id.insert(&p.id, &p.predicted).is_some() {
            return Err(CliError::Runtime(format!("duplicate prediction id {}", p.id)));
        }
    }
    let ref_ids: BTreeMap<&str, ()> = refs.ids().map(|id| (id, ())).collect();
    if let Some(p) = preds.iter().find(|p| !ref_ids.contains_key(p.id.as_str())) {
        return Err(CliError::Runtime(format!("prediction id {} has no reference", p.id)));
    }
    if let Some(id) = refs.ids().find(|id| !by_id.contains_key(id)) {
        return Err(CliError::Runtime(format!("reference id {id} has no prediction")));
    }
    if refs.is_empty() {
        return Err(CliError::Runtime("nothing to evaluate: no matching ids".into()));
    }

    let normalize = |t: &str| tokenizer::normalize_words(t, &config.filter_set).join(" ");
    let mut pairs = Vec::with_capacity(refs.len());
    let mut rows = Vec::with_capacity(refs.len());
    for s in &refs {
        let predicted = by_id[s.id.as_str()];
        pairs.push((normalize(predicted), normalize(&s.target)));
        rows.push((s.id.as_str(), s.target.as_str(), predicted));
    }
    let eval = metrics::evaluate_corpus_with(&pairs, config.bleu_aggregate).map_err(runtime)?;
    fs::write(report_path, eval.report.to_json() + "\n").map_err(io_at(report_path))?;
    fs::write(comparison_path, metrics::comparison_csv(&rows)).map_err(io_at(comparison_path))?;
    print!("{}", eval.report.to_table());
    Ok(())
}
