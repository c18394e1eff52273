//! Command-line front end: run configuration, data preparation shared by the
//! subcommands, and the subcommands themselves.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bm25::{read_bank_cache, write_bank_cache, BankEntry, Bm25Index, QuestionBank};
use crate::checkpoint::{load_model, save_model};
use crate::data::{
    build_example, load_corpus, load_corpus_lines, load_raw_questions, question_corpus, Example,
    QaRecord,
};
use crate::embedding::{load_embeddings, save_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::model::{encode_tokens, extract_spans, EncodedExample, SanConfig, SanModel, Variant};
use crate::skipgram::{train_skipgram, SgnsConfig};
use crate::split::split;
use crate::stats::nonempty_stats;
use crate::tensor::Tensor;
use crate::tokenize::question_tokens;
use crate::train::{compare_methods, evaluate, train, ComparisonReport, ReportRow, TrainConfig};
use crate::vocab::{build_vocab, Vocabulary};

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "SAN_SEED";

/// Everything `train` and `compare` need. Read from a `key = value` or JSON
/// file, then overridden from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub max_len: usize,
    pub bank_size: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub share_bank_encoder: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: Option<u64>,
    pub min_freq: usize,
    /// Labeled corpus (JSON-Lines).
    pub corpus: Option<PathBuf>,
    /// Unlabeled questions to retrieve banks from; defaults to the unlabeled
    /// records of `corpus`.
    pub pool: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Bank cache; built with BM25 when absent.
    pub bank: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Epoch log destination (JSON-Lines); standard output when absent.
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = SanConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            embed_dim: m.embed_dim,
            hidden: m.hidden,
            attention_dim: m.attention_dim,
            max_len: m.max_len,
            bank_size: m.bank_size,
            dropout: m.dropout,
            variant: m.variant,
            share_bank_encoder: m.share_bank_encoder,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: None,
            min_freq: 1,
            corpus: None,
            pool: None,
            embeddings: None,
            bank: None,
            out: None,
            report: None,
            log: None,
        }
    }
}

/// `key = value` lines; `#` starts a comment. Values that parse as JSON
/// (numbers, booleans, quoted strings) keep that type, the rest are strings.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(path, i + 1, format!("expected key = value, got {line:?}"))
        })?;
        map.insert(k.trim().to_string(), scalar(v.trim()));
    }
    Ok(map)
}

fn scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

pub fn read_config_map(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    } else {
        parse_key_values(&text, path)
    }
}

impl RunConfig {
    /// Later maps win. Unknown keys and ill-typed values are config errors.
    pub fn from_layers(layers: &[Map<String, Value>]) -> Result<Self> {
        let mut merged = Map::new();
        for l in layers {
            for (k, v) in l {
                merged.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Flag, then file, then `SAN_SEED`, then the built-in default.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    pub fn san_config(&self) -> Result<SanConfig> {
        let cfg = SanConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            attention_dim: self.attention_dim,
            max_len: self.max_len,
            bank_size: self.bank_size,
            dropout: self.dropout,
            variant: self.variant,
            share_bank_encoder: self.share_bank_encoder,
            seed: self.resolved_seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.resolved_seed()?,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Labeled records with their banks, plus the vocabulary over both.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

/// Retrieves (or reads from a cache) the bank of every labeled record and
/// builds the vocabulary over labeled and pool questions.
pub fn prepare(
    labeled: &[(usize, QaRecord)],
    pool: &[(usize, QaRecord)],
    bank_cache: Option<&[BankEntry]>,
    bank_size: usize,
    max_len: usize,
    min_freq: usize,
    vocab: Option<Vocabulary>,
) -> Result<Prepared> {
    let pool_records: Vec<QaRecord> = pool.iter().map(|(_, r)| r.clone()).collect();
    let banks: Vec<Vec<QaRecord>> = match bank_cache {
        Some(entries) => {
            let by_line: BTreeMap<usize, &QaRecord> = pool.iter().map(|(l, r)| (*l, r)).collect();
            let by_query: BTreeMap<usize, &BankEntry> =
                entries.iter().map(|e| (e.query_line, e)).collect();
            labeled
                .iter()
                .map(|(line, _)| {
                    let Some(e) = by_query.get(line) else {
                        return Err(Error::Data(format!(
                            "bank cache has no entry for line {line}"
                        )));
                    };
                    e.bank_lines
                        .iter()
                        .map(|b| {
                            by_line.get(b).map(|r| (*r).clone()).ok_or_else(|| {
                                Error::Data(format!("bank cache refers to missing pool line {b}"))
                            })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?
        }
        None => {
            let index = QuestionBank::new(&pool_records);
            labeled
                .iter()
                .map(|(_, r)| {
                    index
                        .build_bank(r, bank_size)
                        .into_iter()
                        .map(|i| pool_records[i].clone())
                        .collect()
                })
                .collect()
        }
    };
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(
            &question_corpus(labeled.iter().map(|(_, r)| r).chain(&pool_records)),
            min_freq,
        )?,
    };
    let examples = labeled
        .iter()
        .zip(banks)
        .map(|((_, r), b)| build_example(r.clone(), b, &vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { vocab, examples })
}

/// Embedding table aligned to `vocab`: rows found in the pretrained file are
/// copied, the rest drawn uniformly from `[-0.1, 0.1]`.
pub fn init_embedding<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    dim: usize,
    pretrained: Option<&Path>,
    rng: &mut R,
) -> Result<Option<EmbeddingMatrix>> {
    let Some(path) = pretrained else {
        warn!("no pretrained embeddings given; initialising them at random");
        return Ok(None);
    };
    let loaded = load_embeddings(path)?;
    if loaded.table.dim() != dim {
        return Err(Error::Config(format!(
            "{} has dimension {}, configuration asks for {dim}",
            path.display(),
            loaded.table.dim()
        )));
    }
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut found = 0;
    for tok in vocab.tokens() {
        match loaded.vocab.get(tok) {
            Some(id) => {
                found += 1;
                data.extend_from_slice(loaded.table.row(id));
            }
            None => data.extend((0..dim).map(|_| rng.gen_range(-0.1..=0.1))),
        }
    }
    info!(
        "{found} of {} vocabulary rows taken from {}",
        vocab.len(),
        path.display()
    );
    Ok(Some(EmbeddingMatrix::new(Tensor::matrix(
        vocab.len(),
        dim,
        data,
    )?)?))
}

fn labeled_and_pool(cfg: &RunConfig) -> Result<(Vec<(usize, QaRecord)>, Vec<(usize, QaRecord)>)> {
    let corpus = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus given".into()))?;
    let records = load_corpus_lines(corpus)?;
    let (labeled, unlabeled): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|(_, r)| r.is_labeled());
    if labeled.is_empty() {
        return Err(Error::Data(format!(
            "{} has no labeled questions",
            corpus.display()
        )));
    }
    let pool = match &cfg.pool {
        Some(p) => load_corpus_lines(p)?
            .into_iter()
            .filter(|(_, r)| !r.is_labeled())
            .collect(),
        None => unlabeled,
    };
    Ok((labeled, pool))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Parser)]
#[command(
    name = "san",
    version,
    about = "Tag function expressions in product questions"
)]
pub struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train skip-gram word vectors on raw questions.
    PretrainEmbeddings(PretrainArgs),
    /// Retrieve the most similar unlabeled questions for every labeled one.
    BuildBank(BuildBankArgs),
    /// Train a tagger.
    Train(TrainArgs),
    /// Score one or more checkpoints on labeled data.
    Evaluate(EvaluateArgs),
    /// Tag a single question and print its function expressions.
    Extract(ExtractArgs),
    /// Per-product corpus statistics.
    Stats(StatsArgs),
    /// Train several variants on one split and tabulate their test scores.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` or JSON settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any configuration key, e.g. `--set hidden=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    fn layers(&self, extra: Map<String, Value>) -> Result<RunConfig> {
        let mut layers = Vec::new();
        if let Some(p) = &self.config {
            layers.push(read_config_map(p)?);
        }
        let mut flags = Map::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            flags.insert(k.trim().to_string(), scalar(v.trim()));
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        for (k, v) in [
            ("corpus", path(&self.corpus)),
            ("pool", path(&self.pool)),
            ("embeddings", path(&self.embeddings)),
            ("bank", path(&self.bank)),
            ("seed", self.seed.map(Value::from)),
        ] {
            if let Some(v) = v {
                flags.insert(k.into(), v);
            }
        }
        flags.extend(extra);
        layers.push(flags);
        RunConfig::from_layers(&layers)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// SAN, sblstm or san-noblstm2.
    #[arg(long)]
    pub variant: Option<String>,
    /// Checkpoint destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epoch log destination.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint; repeat to compare several.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub question: String,
    /// Unlabeled questions to retrieve the bank from (JSON-Lines or one
    /// question per line).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Write the attention weights as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated variants.
    #[arg(long, default_value = "SAN,sblstm,san-noblstm2")]
    pub variants: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Process exit status for an error: 2 for I/O, 4 for numeric failures and
/// 3 for everything else (bad configuration or input).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        Error::Tensor(_) | Error::Diverged { .. } => 4,
        Error::Parse { .. } | Error::Data(_) | Error::Config(_) | Error::Incompatible(_) => 3,
    }
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::PretrainEmbeddings(a) => cmd_pretrain(a, out),
        Command::BuildBank(a) => cmd_build_bank(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Extract(a) => cmd_extract(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::Compare(a) => cmd_compare(a, out),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn cmd_pretrain(a: PretrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let seed = RunConfig {
        seed: a.seed,
        ..RunConfig::default()
    }
    .resolved_seed()?;
    let corpus = load_raw_questions(&a.corpus)?;
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no questions",
            a.corpus.display()
        )));
    }
    let cfg = SgnsConfig {
        window: a.window,
        negatives: a.negatives,
        epochs: a.epochs,
        dim: a.dim,
        min_freq: a.min_freq,
        ..SgnsConfig::default()
    };
    let result = train_skipgram(&corpus, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    save_embeddings(&a.out, &result.vocab, &result.table)?;
    writeln!(out, "vocabulary: {}", result.vocab.len()).map_err(io_out)?;
    writeln!(
        out,
        "final objective: {:.6}",
        result.epoch_objective.last().copied().unwrap_or(f64::NAN)
    )
    .map_err(io_out)?;
    Ok(())
}

fn cmd_build_bank(a: BuildBankArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let labeled: Vec<(usize, QaRecord)> = load_corpus_lines(&a.labeled)?
        .into_iter()
        .filter(|(_, r)| r.is_labeled())
        .collect();
    let pool: Vec<(usize, QaRecord)> = load_corpus_lines(&a.pool)?
        .into_iter()
        .filter(|(_, r)| !r.is_labeled())
        .collect();
    if pool.is_empty() {
        warn!(
            "{} has no unlabeled questions; every bank is empty",
            a.pool.display()
        );
    }
    let records: Vec<QaRecord> = pool.iter().map(|(_, r)| r.clone()).collect();
    let index = QuestionBank::new(&records);
    let entries: Vec<BankEntry> = labeled
        .iter()
        .map(|(line, r)| BankEntry {
            query_line: *line,
            bank_lines: index
                .build_bank(r, a.top_k)
                .into_iter()
                .map(|i| pool[i].0)
                .collect(),
        })
        .collect();
    write_bank_cache(&a.out, &entries)?;
    let mean = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.bank_lines.len()).sum::<usize>() as f64 / entries.len() as f64
    };
    writeln!(out, "questions: {}", entries.len()).map_err(io_out)?;
    writeln!(out, "mean bank size: {mean:.2}").map_err(io_out)?;
    Ok(())
}

/// Data preparation and training shared by `train` and the tests.
pub fn train_from_config(
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&crate::train::EpochLog),
) -> Result<(
    SanModel,
    crate::train::TrainOutcome,
    crate::split::CorpusSplit<Example>,
)> {
    let model_cfg = cfg.san_config()?;
    let tcfg = cfg.train_config()?;
    let (labeled, pool) = labeled_and_pool(cfg)?;
    let cache = cfg.bank.as_ref().map(|p| read_bank_cache(p)).transpose()?;
    let prepared = prepare(
        &labeled,
        &pool,
        cache.as_deref(),
        model_cfg.bank_size,
        model_cfg.max_len,
        cfg.min_freq,
        None,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
    let embedding = init_embedding(
        &prepared.vocab,
        model_cfg.embed_dim,
        cfg.embeddings.as_deref(),
        &mut rng,
    )?;
    let model = SanModel::new(model_cfg, prepared.vocab, embedding, &mut rng)?;
    let parts = split(prepared.examples, tcfg.seed);
    let outcome = train(
        model.clone(),
        &parts.train,
        &parts.validation,
        &tcfg,
        &mut on_epoch,
    )?;
    Ok((model, outcome, parts))
}

fn cmd_train(a: TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut extra = Map::new();
    if let Some(v) = &a.variant {
        let v: Variant = v.parse().map_err(Error::Config)?;
        extra.insert("variant".into(), Value::String(v.key().into()));
    }
    if let Some(p) = &a.out {
        extra.insert("out".into(), Value::String(p.display().to_string()));
    }
    if let Some(p) = &a.log {
        extra.insert("log".into(), Value::String(p.display().to_string()));
    }
    let cfg = a.run.layers(extra)?;
    let ckpt = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no checkpoint destination (--out)".into()))?;
    let mut log_lines = String::new();
    let mut write_err = None;
    let (_, outcome, parts) = train_from_config(&cfg, |l| {
        let line = serde_json::to_string(l).expect("plain data");
        if cfg.log.is_some() {
            log_lines.push_str(&line);
            log_lines.push('\n');
        } else if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_out(e));
    }
    if let Some(p) = &cfg.log {
        write_text(p, &log_lines)?;
    }
    save_model(&ckpt, &outcome.model)?;
    let test = if parts.test.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.model, &parts.test)?)
    };
    if let (Some(p), Some(m)) = (&cfg.report, &test) {
        let report = ComparisonReport {
            rows: vec![ReportRow {
                method: outcome.model.config.variant.display_name().into(),
                metrics: *m,
            }],
            reference: Vec::new(),
        };
        write_text(p, &report.to_json())?;
    }
    if let Some(m) = test {
        eprintln!("best epoch {}; test {m}", outcome.best_epoch);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let records = load_corpus_lines(&a.data)?;
    let (labeled, unlabeled): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|(_, r)| r.is_labeled());
    if labeled.is_empty() {
        return Err(Error::Data(format!(
            "{} has no labeled questions",
            a.data.display()
        )));
    }
    let pool = match &a.pool {
        Some(p) => load_corpus_lines(p)?
            .into_iter()
            .filter(|(_, r)| !r.is_labeled())
            .collect(),
        None => unlabeled,
    };
    let cache = a.bank.as_ref().map(|p| read_bank_cache(p)).transpose()?;
    let mut rows = Vec::with_capacity(a.models.len());
    for path in &a.models {
        let model = load_model(path)?;
        let prepared = prepare(
            &labeled,
            &pool,
            cache.as_deref(),
            model.config.bank_size,
            model.config.max_len,
            1,
            Some(model.vocab.clone()),
        )?;
        let metrics = evaluate(&model, &prepared.examples)?;
        let mut method = model.config.variant.display_name().to_string();
        if a.models.len() > 1 {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy())
                .unwrap_or_default();
            method = format!("{method} ({stem})");
        }
        rows.push(ReportRow { method, metrics });
    }
    let report = ComparisonReport {
        rows,
        reference: Vec::new(),
    };
    if report.rows.len() == 1 {
        let m = &report.rows[0].metrics;
        writeln!(
            out,
            "span  precision {:.4} recall {:.4} f1 {:.4}",
            m.span_precision, m.span_recall, m.span_f1
        )
        .map_err(io_out)?;
        writeln!(
            out,
            "token precision {:.4} recall {:.4} f1 {:.4}",
            m.token_precision, m.token_recall, m.token_f1
        )
        .map_err(io_out)?;
    } else {
        write!(out, "{}", report.to_table()).map_err(io_out)?;
    }
    if let Some(p) = &a.report {
        write_text(p, &report.to_json())?;
    }
    Ok(())
}

fn cmd_extract(a: ExtractArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let tokens = question_tokens(&a.question);
    if tokens.is_empty() {
        return Err(Error::Data("empty question".into()));
    }
    let bank_questions = match &a.bank {
        Some(p) if model.config.variant.uses_bank() => {
            let pool = load_raw_questions(p)?;
            let index = Bm25Index::new(&pool);
            index
                .top_k(&tokens, model.config.bank_size)
                .into_iter()
                .map(|(d, _)| pool[d].clone())
                .collect()
        }
        _ => Vec::new(),
    };
    let t = model.config.max_len;
    let input = EncodedExample {
        question: encode_tokens(&model.vocab, &tokens, t),
        bank: bank_questions
            .iter()
            .filter(|q| !q.is_empty())
            .map(|q| encode_tokens(&model.vocab, q, t))
            .collect(),
        gold: None,
    };
    let pred = model.predict(&input)?;
    for span in extract_spans(&pred.tags, &tokens) {
        writeln!(out, "{}", span.text).map_err(io_out)?;
    }
    if let Some(p) = &a.trace {
        #[derive(Serialize)]
        struct TraceFile<'a> {
            tokens: &'a [String],
            bank: &'a [Vec<String>],
            tags: Vec<String>,
            attention: Option<&'a crate::attention::AttentionTrace>,
        }
        let n = input.question.valid_len();
        let file = TraceFile {
            tokens: &tokens[..n],
            bank: &bank_questions,
            tags: pred.tags.iter().map(|t| t.to_string()).collect(),
            attention: pred.trace.as_ref(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Data(e.to_string()))?;
        write_text(p, &json)?;
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let records = load_corpus(&a.corpus)?;
    let stats = nonempty_stats(&records)?;
    write!(out, "{}", stats.to_table()).map_err(io_out)
}

fn cmd_compare(a: CompareArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let variants = a
        .variants
        .split(',')
        .map(|v| v.trim().parse::<Variant>().map_err(Error::Config))
        .collect::<Result<Vec<_>>>()?;
    let mut extra = Map::new();
    if let Some(p) = &a.report {
        extra.insert("report".into(), Value::String(p.display().to_string()));
    }
    let cfg = a.run.layers(extra)?;
    let base = cfg.san_config()?;
    let tcfg = cfg.train_config()?;
    let (labeled, pool) = labeled_and_pool(&cfg)?;
    let cache = cfg.bank.as_ref().map(|p| read_bank_cache(p)).transpose()?;
    let prepared = prepare(
        &labeled,
        &pool,
        cache.as_deref(),
        base.bank_size,
        base.max_len,
        cfg.min_freq,
        None,
    )?;
    let embedding = init_embedding(
        &prepared.vocab,
        base.embed_dim,
        cfg.embeddings.as_deref(),
        &mut ChaCha8Rng::seed_from_u64(base.seed),
    )?;
    let parts = split(prepared.examples, tcfg.seed);
    let report = compare_methods(
        &base,
        &prepared.vocab,
        embedding.as_ref(),
        &parts,
        &tcfg,
        &variants,
    )?;
    write!(out, "{}", report.to_table()).map_err(io_out)?;
    if let Some(p) = &cfg.report {
        write_text(p, &report.to_json())?;
    }
    Ok(())
}
