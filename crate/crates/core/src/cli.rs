//! Command-line entry point: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AnnotatedCorpus, AugmentError, AugmentationPolicy, CandidatePlan, DocumentScope, PairSampler, SamplerConfig, SentenceScope};
use crate::classifier::{classify_batch, finetune, report_ids, weak_labels, ClassifierError, FinetuneConfig};
use crate::contrastive::{pretrain, ContrastiveError, LossForm, PretrainConfig};
use crate::corpus::{self, Corpus, CorpusError, CorpusRecord};
use crate::encoder::{checkpoint, EncoderConfig, EncoderError, Model, ProjNorm, Vocabulary};
use crate::evaluation::{self, EvalError};
use crate::info::{InfoError, InfoPreservation};
use crate::labels::{LabelVector, Observation};
use crate::synthetic::{self, GeneratorError, GeneratorSpec};
use crate::{kv, rng};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        data(e)
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::NonFiniteLoss { .. } => Self::Numeric(e.to_string()),
            EncoderError::InvalidConfig(_) | EncoderError::BatchTooSmall(_) => Self::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidPolicy(_) => Self::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<ContrastiveError> for CliError {
    fn from(e: ContrastiveError) -> Self {
        match e {
            ContrastiveError::Encoder(e) => e.into(),
            ContrastiveError::Augment(e) => e.into(),
            ContrastiveError::NonFinite => Self::Numeric(e.to_string()),
            ContrastiveError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Encoder(e) => e.into(),
            ClassifierError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        data(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        data(e)
    }
}

impl From<InfoError> for CliError {
    fn from(e: InfoError) -> Self {
        data(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "radcl", version, about = "Fact-preserving contrastive pre-training for radiology report classification")]
struct Cli {
    /// Worker threads; 1 forces the sequential path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run manifest path (default: `<primary output>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Root seed; falls back to the config file, then RADCL_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus.
    Gen(GenArgs),
    /// Split reports into sections and sentences.
    Ingest(IoArgs),
    /// Tag concepts and factuality per sentence.
    Annotate(AnnotateArgs),
    /// Emit sampled contrastive batches for inspection.
    Augment(AugmentArgs),
    /// Contrastive pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Train the classification heads (and optionally the encoder).
    Finetune(FinetuneArgs),
    /// Predict labels for a corpus.
    Classify(ClassifyArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Cosine similarity of sentence pairs under an encoder.
    ProbeSimilarity(ProbeArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also split by patient and write the held-out part here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    n_patients: Option<usize>,
}

#[derive(Debug, Args)]
struct IoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LexiconArgs {
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(long)]
    factuality: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    lex: LexiconArgs,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hard_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    lex: LexiconArgs,
    /// Number of batches to emit.
    #[arg(long)]
    batches: Option<usize>,
}

#[derive(Debug, Args)]
struct EncoderArgs {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    lex: LexiconArgs,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Per-step loss CSV.
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Pretrained checkpoint; a fresh encoder is built when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    lex: LexiconArgs,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use only the first N reports.
    #[arg(long)]
    n_labels: Option<usize>,
    /// `gold` (the corpus labels) or `weak` (rule-derived).
    #[arg(long)]
    label_source: Option<String>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Output format: csv or table.
    #[arg(long, default_value = "csv")]
    out: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `sentA<TAB>sentB` rows.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolved settings of one run: flag over config file over default.
#[derive(Debug, Default)]
struct RunConfig {
    values: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => kv::parse(&fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            None => BTreeMap::new(),
        };
        Ok(Self { values: BTreeMap::new(), file })
    }

    /// Resolves `key` and records the winning value.
    fn get<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = match (flag, self.file.get(key)) {
            (Some(f), _) => f,
            (None, Some(s)) => s.parse().map_err(|e| CliError::Usage(format!("config key {key}: {e}")))?,
            (None, None) => default,
        };
        self.values.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn get_opt<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = match (flag, self.file.get(key)) {
            (Some(f), _) => Some(f),
            (None, Some(s)) => Some(s.parse().map_err(|e| CliError::Usage(format!("config key {key}: {e}")))?),
            (None, None) => None,
        };
        if let Some(v) = &v {
            self.values.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    /// Enum values spelled as their serde names.
    fn get_enum<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<String>, default: T) -> Result<T, CliError> {
        let raw = flag.or_else(|| self.file.get(key).cloned());
        let v = match raw {
            Some(s) => serde_json::from_value(serde_json::Value::String(s.trim().to_lowercase().replace('-', "_")))
                .map_err(|_| CliError::Usage(format!("invalid value {s:?} for {key}")))?,
            None => default,
        };
        let shown = serde_json::to_value(&v).ok().and_then(|x| x.as_str().map(String::from)).unwrap_or_default();
        self.values.insert(key.to_string(), shown);
        Ok(v)
    }

    fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let env = std::env::var(rng::SEED_ENV).ok();
        let seed = match (flag, self.file.get("seed"), env) {
            (Some(s), _, _) => s,
            (None, Some(s), _) => s.parse().map_err(|e| CliError::Usage(format!("config key seed: {e}")))?,
            (None, None, Some(s)) => s.parse().map_err(|e| CliError::Usage(format!("{}: {e}", rng::SEED_ENV)))?,
            (None, None, None) => 0,
        };
        self.values.insert("seed".into(), seed.to_string());
        Ok(seed)
    }
}

/// Record of one run: resolved config plus hashes of everything read and written.
#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    config: BTreeMap<String, String>,
    seed: u64,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashes(paths: &[&Path]) -> Result<BTreeMap<String, String>, CliError> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

fn read_records(path: &Path) -> Result<Vec<CorpusRecord>, CliError> {
    let f = fs::File::open(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    corpus::read_jsonl(BufReader::new(f)).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    corpus::write_jsonl(&mut buf, items)?;
    fs::write(path, buf).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn info(lex: &LexiconArgs) -> Result<InfoPreservation, CliError> {
    if lex.concepts.is_none() && lex.factuality.is_none() && lex.rules.is_none() {
        return Ok(InfoPreservation::bundled());
    }
    Ok(InfoPreservation::load(lex.concepts.as_deref(), lex.factuality.as_deref(), lex.rules.as_deref())?)
}

fn lexicon_inputs(lex: &LexiconArgs) -> Vec<&Path> {
    [&lex.concepts, &lex.factuality, &lex.rules].into_iter().flatten().map(PathBuf::as_path).collect()
}

/// What a subcommand did, for the manifest.
struct Outcome {
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Outcome {
    fn new(inputs: &[&Path], artifacts: &[&Path]) -> Self {
        Self {
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            artifacts: artifacts.iter().map(|p| p.to_path_buf()).collect(),
        }
    }
}

fn sampler_config(rc: &mut RunConfig, a: &SamplerArgs) -> Result<(PairSampler, SamplerConfig), CliError> {
    let d = PretrainConfig::default();
    let algorithm = rc.get_enum("algorithm", a.algorithm.clone(), d.algorithm)?;
    let cfg = SamplerConfig {
        batch_size: rc.get("batch_size", a.batch_size, d.batch_size)?,
        k: rc.get("k", a.k, d.k)?,
        sentence_scope: rc.get_enum("sentence_scope", None, SentenceScope::default())?,
        document_scope: rc.get_enum("document_scope", None, DocumentScope::default())?,
        hard_fraction: rc.get("hard_fraction", a.hard_fraction, d.hard_fraction)?,
    };
    Ok((algorithm, cfg))
}

fn policy(rc: &mut RunConfig, seed: u64) -> Result<AugmentationPolicy, CliError> {
    let d = AugmentationPolicy::default();
    let p = AugmentationPolicy {
        p_word_delete: rc.get("p_word_delete", None, d.p_word_delete)?,
        p_span_delete: rc.get("p_span_delete", None, d.p_span_delete)?,
        p_reorder: rc.get("p_reorder", None, d.p_reorder)?,
        p_synonym: rc.get("p_synonym", None, d.p_synonym)?,
        max_span_len: rc.get("max_span_len", None, d.max_span_len)?,
        seed,
        ..d
    };
    p.validate()?;
    Ok(p)
}

fn encoder_config(rc: &mut RunConfig, a: &EncoderArgs, vocab_size: usize) -> Result<EncoderConfig, CliError> {
    let d = EncoderConfig::default();
    let cfg = EncoderConfig {
        vocab_size,
        max_seq_len: rc.get("max_seq_len", a.max_seq_len, d.max_seq_len)?,
        d_model: rc.get("d_model", a.d_model, d.d_model)?,
        n_layers: rc.get("n_layers", a.n_layers, d.n_layers)?,
        n_heads: rc.get("n_heads", a.n_heads, d.n_heads)?,
        d_ff: rc.get("d_ff", None, d.d_ff)?,
        proj_dim: rc.get("proj_dim", None, d.proj_dim)?,
        dropout_p: rc.get("dropout_p", None, d.dropout_p)?,
        proj_norm: rc.get_enum("proj_norm", None, ProjNorm::default())?,
        emb_std: rc.get("emb_std", None, d.emb_std)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn build_vocab(rc: &mut RunConfig, corpus: &Corpus) -> Result<Vocabulary, CliError> {
    let min_count = rc.get("vocab_min_count", None, 1usize)?;
    let max_size = rc.get_opt::<usize>("vocab_max_size", None)?;
    Ok(Vocabulary::build(
        corpus.reports.iter().flat_map(|r| r.sentences.iter().flat_map(|s| s.lemmas())),
        min_count,
        max_size,
    ))
}

fn save_model(model: &Model<f32>, vocab: &Vocabulary, out: &Path) -> Result<PathBuf, CliError> {
    checkpoint::save(model, out)?;
    let vp = checkpoint::vocab_path(out);
    vocab.save(&vp)?;
    Ok(vp)
}

fn load_model(path: &Path) -> Result<(Model<f32>, Vocabulary, PathBuf), CliError> {
    let model = checkpoint::load(path).map_err(|e| match e {
        EncoderError::Io(_) => data(format!("{}: {e}", path.display())),
        e => e.into(),
    })?;
    let vp = checkpoint::vocab_path(path);
    let vocab = Vocabulary::load(&vp).map_err(|e| data(format!("{}: {e}", vp.display())))?;
    if vocab.len() != model.config.vocab_size {
        return Err(data(format!("vocabulary has {} entries, checkpoint expects {}", vocab.len(), model.config.vocab_size)));
    }
    Ok((model, vocab, vp))
}

fn run_gen(rc: &mut RunConfig, seed: u64, a: &GenArgs) -> Result<Outcome, CliError> {
    let mut spec = GeneratorSpec { seed, ..Default::default() };
    let file: Vec<(String, String)> = rc.file.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for (k, v) in &file {
        if k != "seed" && k != "test_fraction" {
            spec.set(k, v)?;
            rc.values.insert(k.clone(), v.clone());
        }
    }
    if let Some(n) = a.n_patients {
        spec.n_patients = n;
    }
    rc.values.insert("n_patients".into(), spec.n_patients.to_string());
    let reports = synthetic::generate(&spec)?;
    let records: Vec<CorpusRecord> = reports.into_iter().map(|r| r.record).collect();
    match &a.test_out {
        Some(test_out) => {
            let frac = rc.get("test_fraction", a.test_fraction, 0.2)?;
            if !(0.0..1.0).contains(&frac) {
                return Err(CliError::Usage("test_fraction must lie in [0, 1)".into()));
            }
            let (train, test) = synthetic::split_by_patient(&records, |r| &r.patient_id, frac, seed);
            write_jsonl(&a.out, &train)?;
            write_jsonl(test_out, &test)?;
            Ok(Outcome::new(&[], &[&a.out, test_out]))
        }
        None => {
            write_jsonl(&a.out, &records)?;
            Ok(Outcome::new(&[], &[&a.out]))
        }
    }
}

fn run_ingest(a: &IoArgs) -> Result<Outcome, CliError> {
    let records = read_records(&a.input)?;
    write_jsonl(&a.out, &corpus::ingest(&records)?)?;
    Ok(Outcome::new(&[&a.input], &[&a.out]))
}

#[derive(Serialize)]
struct AnnotationRow<'a> {
    report_id: &'a str,
    sentences: &'a [crate::info::SentenceAnnotation],
    weak_labels: Vec<String>,
}

fn run_annotate(a: &AnnotateArgs) -> Result<Outcome, CliError> {
    let corpus = Corpus::from_records(&read_records(&a.io.input)?)?;
    let info = info(&a.lex)?;
    let anns: Vec<_> = corpus.reports.iter().map(|r| info.annotate_report(r)).collect();
    let rows: Vec<AnnotationRow> = corpus
        .reports
        .iter()
        .zip(&anns)
        .map(|(r, s)| AnnotationRow { report_id: &r.report_id, sentences: s, weak_labels: weak_labels(r, s).to_strings() })
        .collect();
    write_jsonl(&a.io.out, &rows)?;
    let mut inputs = vec![a.io.input.as_path()];
    inputs.extend(lexicon_inputs(&a.lex));
    Ok(Outcome::new(&inputs, &[&a.io.out]))
}

fn run_augment(rc: &mut RunConfig, seed: u64, a: &AugmentArgs) -> Result<Outcome, CliError> {
    let corpus = Corpus::from_records(&read_records(&a.io.input)?)?;
    let annotated = AnnotatedCorpus::new(corpus.reports, &info(&a.lex)?);
    let (algorithm, cfg) = sampler_config(rc, &a.sampler)?;
    let policy = policy(rc, seed)?;
    let n = rc.get("batches", a.batches, 1usize)?;
    let plan = CandidatePlan::build(algorithm, &annotated, &cfg)?;
    let mut r = rng::stream(seed, 1);
    let mut rows = Vec::new();
    for _ in 0..n {
        rows.extend(plan.sample(&annotated, &cfg, &policy, &mut r).jsonl_rows());
    }
    write_jsonl(&a.io.out, &rows)?;
    let mut inputs = vec![a.io.input.as_path()];
    inputs.extend(lexicon_inputs(&a.lex));
    Ok(Outcome::new(&inputs, &[&a.io.out]))
}

fn run_pretrain(rc: &mut RunConfig, seed: u64, a: &PretrainArgs) -> Result<Outcome, CliError> {
    let corpus = Corpus::from_records(&read_records(&a.io.input)?)?;
    let vocab = build_vocab(rc, &corpus)?;
    let ecfg = encoder_config(rc, &a.encoder, vocab.len())?;
    let (algorithm, scfg) = sampler_config(rc, &a.sampler)?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        algorithm,
        tau: rc.get("tau", a.tau, d.tau)?,
        k: scfg.k,
        batch_size: scfg.batch_size,
        epochs: rc.get("epochs", a.epochs, d.epochs)?,
        optimizer: rc.get_enum("optimizer", a.optimizer.clone(), d.optimizer)?,
        lr: rc.get("lr", a.lr, d.lr)?,
        momentum: rc.get("momentum", None, d.momentum)?,
        loss_form: rc.get_enum("loss_form", None, LossForm::default())?,
        steps_per_epoch: rc.get_opt("steps_per_epoch", a.steps_per_epoch)?,
        sentence_scope: scfg.sentence_scope,
        document_scope: scfg.document_scope,
        hard_fraction: scfg.hard_fraction,
        seed,
    };
    let policy = policy(rc, seed)?;
    let annotated = AnnotatedCorpus::new(corpus.reports, &info(&a.lex)?);
    let mut model = Model::<f32>::new(ecfg, seed)?;
    let mut telemetry = match &a.telemetry {
        Some(p) => Some(fs::File::create(p).map_err(|e| data(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let stats = pretrain(&mut model, &annotated, &vocab, &cfg, &policy, telemetry.as_mut().map(|f| f as &mut dyn Write))?;
    for s in &stats {
        eprintln!("epoch {} mean loss {:.6}", s.epoch, s.mean_loss);
    }
    let vp = save_model(&model, &vocab, &a.io.out)?;
    let mut inputs = vec![a.io.input.as_path()];
    inputs.extend(lexicon_inputs(&a.lex));
    let mut artifacts = vec![a.io.out.as_path(), vp.as_path()];
    if let Some(t) = &a.telemetry {
        artifacts.push(t);
    }
    Ok(Outcome::new(&inputs, &artifacts))
}

fn run_finetune(rc: &mut RunConfig, seed: u64, a: &FinetuneArgs) -> Result<Outcome, CliError> {
    let records = read_records(&a.io.input)?;
    let corpus = Corpus::from_records(&records)?;
    let mut inputs = vec![a.io.input.clone()];
    let (mut model, vocab) = match &a.checkpoint {
        Some(p) => {
            let (m, v, vp) = load_model(p)?;
            inputs.push(p.clone());
            inputs.push(vp);
            (m, v)
        }
        None => {
            let vocab = build_vocab(rc, &corpus)?;
            let cfg = encoder_config(rc, &a.encoder, vocab.len())?;
            (Model::new(cfg, seed)?, vocab)
        }
    };
    let d = FinetuneConfig::default();
    let cfg = FinetuneConfig {
        mode: rc.get_enum("mode", a.mode.clone(), d.mode)?,
        lr: rc.get("lr", a.lr, d.lr)?,
        encoder_lr: rc.get_opt("encoder_lr", a.encoder_lr)?,
        epochs: rc.get("epochs", a.epochs, d.epochs)?,
        batch_size: rc.get("batch_size", a.batch_size, d.batch_size)?,
        seed,
    };
    let source = rc.get("label_source", a.label_source.clone(), "gold".to_string())?;
    let n = rc.get("n_labels", a.n_labels, corpus.reports.len())?.min(corpus.reports.len());
    let reports = &corpus.reports[..n];
    let golds: Vec<LabelVector> = match source.as_str() {
        "gold" => reports
            .iter()
            .map(|r| {
                let raw = corpus.labels.get(&r.report_id).ok_or_else(|| data(format!("report {} has no labels", r.report_id)))?;
                LabelVector::from_strings(raw).map_err(|e| data(format!("report {}: {e}", r.report_id)))
            })
            .collect::<Result<_, _>>()?,
        "weak" => {
            let info = info(&a.lex)?;
            inputs.extend(lexicon_inputs(&a.lex).into_iter().map(Path::to_path_buf));
            reports.iter().map(|r| weak_labels(r, &info.annotate_report(r))).collect()
        }
        other => return Err(CliError::Usage(format!("label_source must be gold or weak, got {other:?}"))),
    };
    let seqs: Vec<Vec<u32>> = reports.iter().map(|r| report_ids(r, &vocab, model.config.max_seq_len)).collect();
    let history = finetune(&mut model, &seqs, &golds, &cfg)?;
    for (i, l) in history.iter().enumerate() {
        eprintln!("epoch {} mean loss {l:.6}", i + 1);
    }
    let vp = save_model(&model, &vocab, &a.io.out)?;
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Ok(Outcome::new(&inputs, &[&a.io.out, &vp]))
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    report_id: &'a str,
    patient_id: &'a str,
    labels: Vec<String>,
    /// Observation name to class probabilities (blank, positive, negative, uncertain order, No Finding without uncertain).
    probs: BTreeMap<&'static str, Vec<f64>>,
}

fn run_classify(a: &ClassifyArgs) -> Result<Outcome, CliError> {
    let corpus = Corpus::from_records(&read_records(&a.io.input)?)?;
    let (model, vocab, vp) = load_model(&a.checkpoint)?;
    let seqs: Vec<Vec<u32>> = corpus.reports.iter().map(|r| report_ids(r, &vocab, model.config.max_seq_len)).collect();
    let preds = classify_batch(&model, &seqs);
    let rows: Vec<PredictionRow> = corpus
        .reports
        .iter()
        .zip(&preds)
        .map(|(r, p)| PredictionRow {
            report_id: &r.report_id,
            patient_id: &r.patient_id,
            labels: p.labels.to_strings(),
            probs: Observation::ALL.iter().zip(&p.probs).map(|(o, pr)| (o.name(), pr.clone())).collect(),
        })
        .collect();
    write_jsonl(&a.io.out, &rows)?;
    Ok(Outcome::new(&[&a.io.input, &a.checkpoint, &vp], &[&a.io.out]))
}

fn run_evaluate(a: &EvaluateArgs) -> Result<Outcome, CliError> {
    let report = evaluation::evaluate(&a.pred, &a.gold)?;
    let text = match a.out.as_str() {
        "csv" => report.to_csv(),
        "table" => report.to_table(),
        other => return Err(CliError::Usage(format!("--out must be csv or table, got {other:?}"))),
    };
    match &a.report {
        Some(p) => {
            fs::write(p, &text).map_err(|e| data(format!("{}: {e}", p.display())))?;
            Ok(Outcome::new(&[&a.pred, &a.gold], &[p]))
        }
        None => {
            print!("{text}");
            Ok(Outcome::new(&[&a.pred, &a.gold], &[]))
        }
    }
}

fn run_probe(a: &ProbeArgs) -> Result<Outcome, CliError> {
    let (model, vocab, vp) = load_model(&a.checkpoint)?;
    let text = fs::read_to_string(&a.pairs).map_err(|e| data(format!("{}: {e}", a.pairs.display())))?;
    let pairs = evaluation::parse_pairs(&text)?;
    let csv = evaluation::probe_csv(&evaluation::similarity_probe(&model, &vocab, &pairs));
    let inputs: [&Path; 3] = [&a.checkpoint, &vp, &a.pairs];
    match &a.out {
        Some(p) => {
            fs::write(p, &csv).map_err(|e| data(format!("{}: {e}", p.display())))?;
            Ok(Outcome::new(&inputs, &[p]))
        }
        None => {
            print!("{csv}");
            Ok(Outcome::new(&inputs, &[]))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Ingest(_) => "ingest",
        Command::Annotate(_) => "annotate",
        Command::Augment(_) => "augment",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Classify(_) => "classify",
        Command::Evaluate(_) => "evaluate",
        Command::ProbeSimilarity(_) => "probe-similarity",
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only when a pool already exists (repeated calls in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut rc = RunConfig::load(cli.config.as_deref())?;
    let seed = rc.seed(cli.seed)?;
    let outcome = match &cli.command {
        Command::Gen(a) => run_gen(&mut rc, seed, a)?,
        Command::Ingest(a) => run_ingest(a)?,
        Command::Annotate(a) => run_annotate(a)?,
        Command::Augment(a) => run_augment(&mut rc, seed, a)?,
        Command::Pretrain(a) => run_pretrain(&mut rc, seed, a)?,
        Command::Finetune(a) => run_finetune(&mut rc, seed, a)?,
        Command::Classify(a) => run_classify(a)?,
        Command::Evaluate(a) => run_evaluate(a)?,
        Command::ProbeSimilarity(a) => run_probe(a)?,
    };
    let mut inputs: Vec<&Path> = outcome.inputs.iter().map(PathBuf::as_path).collect();
    if let Some(c) = &cli.config {
        inputs.push(c);
    }
    let manifest = Manifest {
        command: command_name(&cli.command).to_string(),
        config: rc.values,
        seed,
        inputs: hashes(&inputs)?,
        artifacts: hashes(&outcome.artifacts.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
    };
    let path = match (&cli.manifest, outcome.artifacts.first()) {
        (Some(p), _) => p.clone(),
        (None, Some(a)) => {
            let mut s = a.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        (None, None) => PathBuf::from(format!("{}.manifest.json", manifest.command)),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(data)?;
    fs::write(&path, json + "\n").map_err(|e| data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
