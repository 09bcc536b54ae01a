//! `ewun`: prepare corpora, train encoders, and evaluate entity normalization.
//!
//! Exit status is 0 on success, 2 for usage errors, 3 for malformed or
//! inconsistent input data, 4 for integrity failures such as missing or
//! corrupted checkpoints, and 1 for anything else.
//!
//! Relative checkpoint and run paths resolve under `$EWUN_CHECKPOINT_ROOT`
//! when it is set. Dictionary embeddings are cached under `$EWUN_CACHE_DIR`
//! when it is set.

mod ingest;
mod manifest;

use std::fmt;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ewun::checkpoint::{self, parameter_checksum, Restored};
use ewun::corpus::{
    self, filter_unlinkable, generate_synthetic_corpus, synthetic_pairs, ConceptDictionary,
    CorpusStats, EntityRecord, PairRecord, Split, SurfaceNormalization,
};
use ewun::encoder::toy::{ToyConfig, DEFAULT_BUCKETS};
use ewun::encoder::{make_toy_encoder_with, EncoderHandle, Pooling};
use ewun::eval::{
    edit_similarity, snapshot_recommendations, EditDistanceBaseline, EvalReport, Scores,
};
use ewun::inference::{
    calibrate_threshold_with, classify_pairs, decisions_to_tsv, normalizations_to_tsv,
    DictionaryIndex, PairDecision, PairScorer,
};
use ewun::trainer::{train, CheckpointPolicy, TrainConfig, TrainData};

use manifest::{ManifestBuilder, MANIFEST_FILE};

const CHECKPOINT_ROOT_VAR: &str = "EWUN_CHECKPOINT_ROOT";
const CACHE_DIR_VAR: &str = "EWUN_CACHE_DIR";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Integrity(String),
    Core(ewun::Error),
    Io(PathBuf, io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Integrity(_) => 4,
            CliError::Core(ewun::Error::Argument(_)) => 2,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(e) if e.is_integrity_error() => 4,
            CliError::Core(_) | CliError::Io(..) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Integrity(m) => write!(f, "integrity error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(path, e) => write!(f, "{}: {e}", path.display()),
        }
    }
}

impl From<ewun::Error> for CliError {
    fn from(e: ewun::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

trait IoContext<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Io(path.to_path_buf(), e))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "ewun",
    version,
    about = "Entity normalization by edge-weight distribution matching"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic organization-name corpus with held-out identity groups.
    Synth(SynthArgs),
    /// Convert a raw corpus into canonical TSV and print its statistics.
    Prepare(PrepareArgs),
    /// Fine-tune an encoder and write checkpoints, a metric log and a manifest.
    Train(TrainArgs),
    /// Top-1 accuracy and wrong retrievals of a checkpoint on a concept corpus.
    Evaluate(EvaluateArgs),
    /// Ranked dictionary entries for each query.
    Normalize(NormalizeArgs),
    /// Classify entity pairs as matching or not.
    Pairs(PairsArgs),
    /// Qualitative reports: per-checkpoint recommendations or pair error lists.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Recompute the fingerprints recorded in a run manifest.
    Verify(VerifyArgs),
}

fn parse_normalization(s: &str) -> Result<SurfaceNormalization, String> {
    s.parse().map_err(|e: ewun::Error| e.to_string())
}

fn parse_scorer(s: &str) -> Result<PairScorer, String> {
    s.parse().map_err(|e: ewun::Error| e.to_string())
}

fn parse_pooling(s: &str) -> Result<Pooling, String> {
    s.parse().map_err(|e: ewun::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: ewun::Error| e.to_string())
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    concepts: usize,
    #[arg(long, default_value_t = 4)]
    variants: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving dictionary.tsv, train.tsv, test.tsv, pairs_train.tsv and pairs_test.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Tsv,
    Pubtator,
    Biosyn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CorpusKind {
    Concept,
    Dictionary,
    Pairs,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long, value_enum, default_value_t = CorpusKind::Concept)]
    kind: CorpusKind,
    #[arg(long, value_enum, default_value_t = InputFormat::Tsv)]
    format: InputFormat,
    /// Input file, or a directory of `.concept` files for the biosyn format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Split tag used for the printed statistics.
    #[arg(long, value_parser = parse_split, default_value = "train")]
    split: Split,
    #[arg(long, value_parser = parse_normalization, default_value = "minimal")]
    normalization: SurfaceNormalization,
    /// Keep only mentions of this annotation type (PubTator and biosyn inputs).
    #[arg(long)]
    entity_type: Option<String>,
    /// Drop mentions with no concept present in --dictionary.
    #[arg(long)]
    filter: bool,
    /// Canonical dictionary TSV used by --filter.
    #[arg(long)]
    dictionary: Option<PathBuf>,
}

/// Every training configuration field; unset flags fall back to --config, then to defaults.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Candidates per query.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// per-epoch
    #[arg(long)]
    candidate_refresh: Option<String>,
    /// test-best or dev-best
    #[arg(long)]
    selection_split: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    skip_all_zero_rows: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    keep_all_checkpoints: Option<bool>,
}

impl TrainFlags {
    fn resolve(&self) -> CliResult<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::from_kv_text(&fs::read_to_string(path).at(path)?)?,
            None => TrainConfig::default(),
        };
        let overrides: [(&str, Option<String>); 10] = [
            ("k", self.k.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            (
                "learning_rate",
                self.learning_rate.map(|v| format!("{v:e}")),
            ),
            ("weight_decay", self.weight_decay.map(|v| format!("{v:e}"))),
            ("seed", self.seed.map(|v| v.to_string())),
            ("candidate_refresh", self.candidate_refresh.clone()),
            ("selection_split", self.selection_split.clone()),
            (
                "skip_all_zero_rows",
                self.skip_all_zero_rows.map(|v| v.to_string()),
            ),
            (
                "keep_all_checkpoints",
                self.keep_all_checkpoints.map(|v| v.to_string()),
            ),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                config.set(key, &value)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EncoderChoice {
    Toy,
    Contextual,
}

#[derive(Args, Debug)]
struct EncoderFlags {
    #[arg(long, value_enum, default_value_t = EncoderChoice::Toy)]
    encoder: EncoderChoice,
    /// Toy encoder embedding width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Toy encoder hash buckets.
    #[arg(long, default_value_t = DEFAULT_BUCKETS)]
    buckets: usize,
    /// Toy encoder initialization seed; defaults to the training seed.
    #[arg(long)]
    encoder_seed: Option<u64>,
    /// Directory holding config.json, tokenizer files and safetensors weights.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_pooling, default_value = "first-token")]
    pooling: Pooling,
    /// Keep tokenizer casing instead of lowercasing.
    #[arg(long)]
    cased: bool,
}

impl EncoderFlags {
    fn describe(&self, seed: u64) -> serde_json::Value {
        match self.encoder {
            EncoderChoice::Toy => json!({
                "kind": "toy",
                "dim": self.dim,
                "buckets": self.buckets,
                "seed": self.encoder_seed.unwrap_or(seed),
            }),
            EncoderChoice::Contextual => json!({
                "kind": "contextual",
                "model_dir": self.model_dir,
                "pooling": self.pooling.as_str(),
                "lowercase": !self.cased,
            }),
        }
    }

    fn build(&self, seed: u64) -> CliResult<EncoderHandle> {
        match self.encoder {
            EncoderChoice::Toy => Ok(make_toy_encoder_with(ToyConfig {
                dim: self.dim,
                buckets: self.buckets,
                seed: self.encoder_seed.unwrap_or(seed),
            })?),
            EncoderChoice::Contextual => self.build_contextual(),
        }
    }

    #[cfg(feature = "contextual")]
    fn build_contextual(&self) -> CliResult<EncoderHandle> {
        let dir = self
            .model_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("--encoder contextual requires --model-dir".into()))?;
        let model = ewun::encoder::contextual::ContextualEncoder::load(dir, !self.cased)?;
        Ok(EncoderHandle::from_contextual(model, self.pooling))
    }

    #[cfg(not(feature = "contextual"))]
    fn build_contextual(&self) -> CliResult<EncoderHandle> {
        Err(CliError::Usage(
            "this binary was built without the `contextual` feature".into(),
        ))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dictionary: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Run directory for checkpoints, metrics.jsonl, config.txt and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_normalization, default_value = "minimal")]
    normalization: SurfaceNormalization,
    #[command(flatten)]
    config: TrainFlags,
    #[command(flatten)]
    encoder: EncoderFlags,
}

#[derive(Args, Debug)]
struct CheckpointInput {
    /// Checkpoint directory, such as RUN/best.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    /// Surface normalization; defaults to the one recorded in the checkpoint.
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<SurfaceNormalization>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    input: CheckpointInput,
    /// Concept corpus TSV of gold-annotated queries.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "queries")]
    dataset: String,
    /// Maximum wrong retrievals listed.
    #[arg(long, default_value_t = 20)]
    limit: usize,
    /// Writes PREFIX.txt, PREFIX.jsonl and PREFIX.manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NormalizeArgs {
    #[command(flatten)]
    input: CheckpointInput,
    #[arg(long = "query")]
    queries: Vec<String>,
    /// File with one query per line; only the first tab-separated column is used.
    #[arg(long)]
    queries_file: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// TSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    EditDistance,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("model").required(true).args(["checkpoint", "baseline"]))]
#[command(group = clap::ArgGroup::new("decision").required(true).args(["threshold", "calibrate_on"]))]
struct PairsArgs {
    /// Pair corpus TSV to classify.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Labeled pair corpus on which the F1-maximizing threshold is chosen.
    #[arg(long)]
    calibrate_on: Option<PathBuf>,
    #[arg(long, value_parser = parse_scorer, default_value = "cosine")]
    scorer: PairScorer,
    /// Decision TSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Writes PREFIX.txt and PREFIX.jsonl with metrics and error lists.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "pairs")]
    dataset: String,
    #[arg(long, default_value_t = 20)]
    limit: usize,
}

#[derive(Subcommand, Debug)]
enum ReportCommand {
    /// Top-5 recommendations per query under several checkpoints of one run.
    Snapshots(SnapshotArgs),
    /// False positives and false negatives of a decision file.
    Pairs(PairReportArgs),
}

#[derive(Args, Debug)]
struct SnapshotArgs {
    /// Run directory written by `ewun train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    /// Concept corpus TSV of gold-annotated queries.
    #[arg(long)]
    queries: PathBuf,
    /// Restrict the report to these query surfaces.
    #[arg(long = "query")]
    only: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "epoch-0,epoch-1,best")]
    checkpoints: Vec<String>,
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<SurfaceNormalization>,
    #[arg(long, default_value = "queries")]
    dataset: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PairReportArgs {
    /// Decision TSV written by `ewun pairs`.
    #[arg(long)]
    decisions: PathBuf,
    /// The labeled pair corpus the decisions were made on.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "pairs")]
    dataset: String,
    #[arg(long, default_value_t = 20)]
    limit: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    manifest: PathBuf,
}

fn checkpoint_path(path: &Path) -> PathBuf {
    match std::env::var_os(CHECKPOINT_ROOT_VAR) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_file(path: &Path, content: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, content).at(path)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn restore(dir: &Path) -> CliResult<Restored> {
    if !dir.join(checkpoint::META_FILE).is_file() {
        return Err(CliError::Integrity(format!(
            "{} is not a checkpoint directory",
            dir.display()
        )));
    }
    Ok(checkpoint::restore(dir)?)
}

/// Resolves the normalization to apply, warning when it differs from the checkpoint's.
fn normalization_for(
    requested: Option<SurfaceNormalization>,
    restored: &Restored,
) -> SurfaceNormalization {
    let recorded = restored.meta.info.normalization;
    match requested {
        Some(n) if n != recorded => {
            log::warn!(
                "checkpoint was trained with {} normalization but {} was requested",
                recorded.as_str(),
                n.as_str()
            );
            n
        }
        Some(n) => n,
        None => recorded,
    }
}

fn dictionary_index(
    dict: &ConceptDictionary,
    encoder: &EncoderHandle,
) -> CliResult<DictionaryIndex> {
    let Some(root) = std::env::var_os(CACHE_DIR_VAR) else {
        return Ok(DictionaryIndex::build(dict, encoder)?);
    };
    let checksum = parameter_checksum(encoder)?;
    let dir = Path::new(&root)
        .join(&checksum[..16])
        .join(&dict.fingerprint()[..16]);
    fs::create_dir_all(&dir).at(&dir)?;
    Ok(DictionaryIndex::load_or_build(
        &dir, dict, encoder, &checksum,
    )?)
}

fn print_stats(label: &str, stats: &CorpusStats) {
    println!("{label}");
    for split in Split::ALL {
        let c = stats.split(split);
        println!(
            "  {split:<5} documents {:>6}  mentions {:>7}",
            c.documents, c.mentions
        );
    }
    if stats.total_pairs() > 0 {
        println!(
            "  pairs positive {} negative {}",
            stats.positive_pairs, stats.negative_pairs
        );
    }
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start(
        "synth",
        json!({ "concepts": args.concepts, "variants": args.variants }),
        Some(args.seed),
    );
    let corpus = generate_synthetic_corpus(args.concepts, args.variants, args.seed)?;
    let (pairs_train, pairs_test) = synthetic_pairs(&corpus, args.seed);
    fs::create_dir_all(&args.out).at(&args.out)?;
    let files = [
        ("dictionary.tsv", corpus.dictionary.to_tsv()),
        ("train.tsv", corpus::concept_corpus_to_tsv(&corpus.train)),
        ("test.tsv", corpus::concept_corpus_to_tsv(&corpus.test)),
        ("pairs_train.tsv", corpus::pair_corpus_to_tsv(&pairs_train)),
        ("pairs_test.tsv", corpus::pair_corpus_to_tsv(&pairs_test)),
    ];
    for (name, content) in &files {
        let path = args.out.join(name);
        write_file(&path, content)?;
        manifest.output(&path).at(&path)?;
    }
    let mut stats = CorpusStats::from_records(&corpus.train);
    stats.merge(&CorpusStats::from_records(&corpus.test));
    print_stats(
        &format!(
            "{} dictionary entries, {} concepts",
            corpus.dictionary.len(),
            args.concepts
        ),
        &stats,
    );
    let path = args.out.join(MANIFEST_FILE);
    manifest.finish(&path).at(&path)?;
    Ok(())
}

fn cmd_prepare(args: &PrepareArgs) -> CliResult<()> {
    if args.filter && args.dictionary.is_none() {
        return Err(CliError::Usage("--filter requires --dictionary".into()));
    }
    if args.filter && args.kind != CorpusKind::Concept {
        return Err(CliError::Usage(
            "--filter applies to concept corpora only".into(),
        ));
    }
    let mut manifest = ManifestBuilder::start(
        "prepare",
        json!({
            "kind": format!("{:?}", args.kind).to_lowercase(),
            "format": format!("{:?}", args.format).to_lowercase(),
            "split": args.split.as_str(),
            "normalization": args.normalization.as_str(),
            "entity_type": args.entity_type,
            "filter": args.filter,
        }),
        None,
    );
    manifest.input(&args.input).at(&args.input)?;
    let source = args.input.display().to_string();
    let read = |path: &Path| fs::read_to_string(path).at(path);
    let entity_type = args.entity_type.as_deref();

    match args.kind {
        CorpusKind::Dictionary => {
            let dict = match args.format {
                InputFormat::Tsv => {
                    corpus::parse_dictionary(&read(&args.input)?, &source, args.normalization)?
                }
                InputFormat::Biosyn => ingest::parse_biosyn_dictionary(
                    &read(&args.input)?,
                    &source,
                    args.normalization,
                )?,
                InputFormat::Pubtator => {
                    return Err(CliError::Usage("pubtator files carry no dictionary".into()));
                }
            };
            write_file(&args.output, &dict.to_tsv())?;
            let concepts = dict.concept_universe().len();
            println!("dictionary entries {}  concepts {concepts}", dict.len());
        }
        CorpusKind::Pairs => {
            if args.format != InputFormat::Tsv {
                return Err(CliError::Usage(
                    "pair corpora are read from tsv only".into(),
                ));
            }
            let pairs = corpus::parse_pair_corpus(&read(&args.input)?, &source)?;
            write_file(&args.output, &corpus::pair_corpus_to_tsv(&pairs))?;
            print_stats("pairs", &CorpusStats::from_pairs(&pairs));
        }
        CorpusKind::Concept => {
            let ingested = match args.format {
                InputFormat::Tsv => {
                    let records = corpus::parse_concept_corpus(
                        &read(&args.input)?,
                        &source,
                        args.split,
                        args.normalization,
                    )?;
                    ingest::Ingested {
                        records,
                        ..Default::default()
                    }
                }
                InputFormat::Pubtator => ingest::parse_pubtator(
                    &read(&args.input)?,
                    &source,
                    args.split,
                    args.normalization,
                    entity_type,
                )?,
                InputFormat::Biosyn => {
                    let mut all = ingest::Ingested::default();
                    for file in ingest::input_files(&args.input, "concept").at(&args.input)? {
                        let part = ingest::parse_biosyn_concepts(
                            &read(&file)?,
                            &file.display().to_string(),
                            args.split,
                            args.normalization,
                            entity_type,
                        )?;
                        all.records.extend(part.records);
                        all.documents += part.documents;
                        all.skipped_unlinked += part.skipped_unlinked;
                    }
                    all
                }
            };
            let mut stats = CorpusStats::from_records(&ingested.records);
            stats.split_mut(args.split).documents = ingested.documents;
            print_stats("as read", &stats);
            if ingested.skipped_unlinked > 0 {
                println!(
                    "  skipped {} mentions without a concept ID",
                    ingested.skipped_unlinked
                );
            }
            let mut records = ingested.records;
            if let Some(dict_path) = args.dictionary.as_deref().filter(|_| args.filter) {
                manifest.input(dict_path).at(dict_path)?;
                let dict = corpus::load_dictionary(dict_path, args.normalization)?;
                let before = records.len();
                records = filter_unlinkable(&records, &dict);
                let mut kept = CorpusStats::from_records(&records);
                kept.split_mut(args.split).documents = ingested.documents;
                print_stats(
                    &format!("after filtering ({} removed)", before - records.len()),
                    &kept,
                );
            }
            write_file(&args.output, &corpus::concept_corpus_to_tsv(&records))?;
        }
    }
    manifest.output(&args.output).at(&args.output)?;
    let path = with_suffix(&args.output, ".manifest.json");
    manifest.finish(&path).at(&path)?;
    Ok(())
}

fn load_records(
    path: &Path,
    split: Split,
    normalization: SurfaceNormalization,
) -> CliResult<Vec<EntityRecord>> {
    Ok(corpus::load_concept_corpus(path, split, normalization)?)
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let config = args.config.resolve()?;
    let out = checkpoint_path(&args.out);
    let mut manifest = ManifestBuilder::start(
        "train",
        json!({
            "train_config": config,
            "encoder": args.encoder.describe(config.seed),
            "normalization": args.normalization.as_str(),
        }),
        Some(config.seed),
    );
    for path in [
        Some(&args.dictionary),
        Some(&args.train),
        args.dev.as_ref(),
        args.test.as_ref(),
    ]
    .into_iter()
    .flatten()
    .chain(args.config.config.as_ref())
    {
        manifest.input(path).at(path)?;
    }

    let dictionary = corpus::load_dictionary(&args.dictionary, args.normalization)?;
    let train_records = load_records(&args.train, Split::Train, args.normalization)?;
    let dev_records = match &args.dev {
        Some(p) => load_records(p, Split::Dev, args.normalization)?,
        None => Vec::new(),
    };
    let test_records = match &args.test {
        Some(p) => load_records(p, Split::Test, args.normalization)?,
        None => Vec::new(),
    };

    let mut encoder = args.encoder.build(config.seed)?;
    if let (EncoderChoice::Contextual, Some(dir)) = (args.encoder.encoder, &args.encoder.model_dir)
    {
        manifest.input(dir).at(dir)?;
    }
    let policy = CheckpointPolicy {
        dir: out.clone(),
        normalization: args.normalization,
        corpus_fingerprint: dictionary.fingerprint(),
    };
    let data = TrainData {
        train: &train_records,
        dev: &dev_records,
        test: &test_records,
        dictionary: &dictionary,
    };
    let state = train(data, &mut encoder, &config, Some(&policy))?;
    write_file(&out.join("config.txt"), &config.to_kv_text())?;

    println!("epoch\tmean_loss\ttop1_accuracy");
    println!("0\t-\t{:.4}", state.initial_top1_accuracy);
    for m in &state.history {
        println!("{}\t{:.6}\t{:.4}", m.epoch, m.mean_loss, m.top1_accuracy);
    }
    if let Some(best) = &state.best {
        println!("best epoch {} top-1 {:.4}", best.epoch, best.top1_accuracy);
    }
    if encoder.truncation_count() > 0 {
        log::warn!(
            "{} surfaces were truncated by the tokenizer",
            encoder.truncation_count()
        );
    }

    manifest.output(&out).at(&out)?;
    manifest.checkpoints(&state.checkpoints);
    let path = out.join(MANIFEST_FILE);
    manifest.finish(&path).at(&path)?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let ckpt = checkpoint_path(&args.input.checkpoint);
    let restored = restore(&ckpt)?;
    let normalization = normalization_for(args.input.normalization, &restored);
    let dict = corpus::load_dictionary(&args.input.dictionary, normalization)?;
    let gold = load_records(&args.queries, Split::Test, normalization)?;
    let encoder = &restored.encoder;
    let index = dictionary_index(&dict, encoder)?;
    let surfaces: Vec<&str> = gold.iter().map(|r| r.surface.as_str()).collect();
    let predictions = index.normalize_batch(&surfaces, encoder, 1)?;
    let report = EvalReport::concept(&args.dataset, &predictions, &gold, args.limit)?;
    let text = report.to_text();
    print!("{text}");

    if let Some(prefix) = &args.out {
        let mut manifest = ManifestBuilder::start(
            "evaluate",
            json!({ "dataset": args.dataset, "limit": args.limit, "normalization": normalization.as_str() }),
            None,
        );
        for path in [&ckpt, &args.input.dictionary, &args.queries] {
            manifest.input(path).at(path)?;
        }
        for (suffix, content) in [(".txt", text), (".jsonl", report.to_jsonl()?)] {
            let path = with_suffix(prefix, suffix);
            write_file(&path, &content)?;
            manifest.output(&path).at(&path)?;
        }
        let path = with_suffix(prefix, ".manifest.json");
        manifest.finish(&path).at(&path)?;
    }
    Ok(())
}

fn cmd_normalize(args: &NormalizeArgs) -> CliResult<()> {
    let ckpt = checkpoint_path(&args.input.checkpoint);
    let restored = restore(&ckpt)?;
    let normalization = normalization_for(args.input.normalization, &restored);
    let mut raw = args.queries.clone();
    if let Some(path) = &args.queries_file {
        let text = fs::read_to_string(path).at(path)?;
        raw.extend(
            text.lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .map(|l| l.split('\t').next().unwrap_or_default().to_owned()),
        );
    }
    if raw.is_empty() {
        return Err(CliError::Usage(
            "give at least one --query or a --queries-file".into(),
        ));
    }
    let queries: Vec<String> = raw.iter().map(|q| normalization.apply(q)).collect();
    let dict = corpus::load_dictionary(&args.input.dictionary, normalization)?;
    let index = dictionary_index(&dict, &restored.encoder)?;
    let results = index.normalize_batch(&queries, &restored.encoder, args.k)?;
    let tsv = normalizations_to_tsv(&results);

    match &args.out {
        None => io::stdout()
            .write_all(tsv.as_bytes())
            .at(Path::new("<stdout>"))?,
        Some(out) => {
            let mut manifest = ManifestBuilder::start(
                "normalize",
                json!({ "k": args.k, "queries": args.queries, "normalization": normalization.as_str() }),
                None,
            );
            for path in [
                Some(&ckpt),
                Some(&args.input.dictionary),
                args.queries_file.as_ref(),
            ]
            .into_iter()
            .flatten()
            {
                manifest.input(path).at(path)?;
            }
            write_file(out, &tsv)?;
            manifest.output(out).at(out)?;
            let path = with_suffix(out, ".manifest.json");
            manifest.finish(&path).at(&path)?;
        }
    }
    Ok(())
}

fn cmd_pairs(args: &PairsArgs) -> CliResult<()> {
    let pairs = corpus::load_pair_corpus(&args.pairs)?;
    let calibration_pairs = match &args.calibrate_on {
        Some(path) => Some(corpus::load_pair_corpus(path)?),
        None => None,
    };
    let mut manifest_inputs = vec![args.pairs.clone()];
    manifest_inputs.extend(args.calibrate_on.clone());

    let (decisions, threshold, model) = match (&args.checkpoint, args.baseline) {
        (Some(path), _) => {
            let ckpt = checkpoint_path(path);
            let restored = restore(&ckpt)?;
            manifest_inputs.push(ckpt.clone());
            let threshold = match (&calibration_pairs, args.threshold) {
                (Some(train), _) => {
                    let calibration =
                        calibrate_threshold_with(train, &restored.encoder, args.scorer)?;
                    if calibration.degenerate {
                        log::warn!(
                            "all calibration scores are identical; threshold {} separates nothing",
                            calibration.threshold
                        );
                    }
                    println!(
                        "calibrated threshold {} (train F1 {:.4})",
                        calibration.threshold, calibration.f1
                    );
                    calibration.threshold
                }
                (None, Some(t)) => t,
                (None, None) => unreachable!("clap requires a decision rule"),
            };
            let decisions = classify_pairs(&pairs, &restored.encoder, threshold, args.scorer)?;
            (decisions, threshold, ckpt.display().to_string())
        }
        (None, Some(Baseline::EditDistance)) => {
            let threshold = match (&calibration_pairs, args.threshold) {
                (Some(train), _) => {
                    let fitted = EditDistanceBaseline::fit(train)?;
                    println!(
                        "calibrated threshold {} (train F1 {:.4})",
                        fitted.calibration.threshold, fitted.calibration.f1
                    );
                    fitted.calibration.threshold
                }
                (None, Some(t)) => t,
                (None, None) => unreachable!("clap requires a decision rule"),
            };
            let decisions = pairs
                .iter()
                .map(|p| {
                    let score = edit_similarity(&p.entity_a, &p.entity_b);
                    PairDecision::new(p.entity_a.clone(), p.entity_b.clone(), score, threshold)
                })
                .collect();
            (decisions, threshold, "edit-distance".to_owned())
        }
        (None, None) => unreachable!("clap requires a model"),
    };

    let report = EvalReport::pairs(&args.dataset, &decisions, &pairs, threshold, args.limit)?;
    let text = report.to_text();
    print!("{text}");

    let mut manifest = ManifestBuilder::start(
        "pairs",
        json!({
            "model": model,
            "scorer": args.scorer,
            "threshold": threshold,
            "calibrated": args.calibrate_on.is_some(),
            "dataset": args.dataset,
        }),
        None,
    );
    for path in &manifest_inputs {
        manifest.input(path).at(path)?;
    }
    write_file(&args.out, &decisions_to_tsv(&decisions))?;
    manifest.output(&args.out).at(&args.out)?;
    if let Some(prefix) = &args.report {
        for (suffix, content) in [(".txt", text), (".jsonl", report.to_jsonl()?)] {
            let path = with_suffix(prefix, suffix);
            write_file(&path, &content)?;
            manifest.output(&path).at(&path)?;
        }
    }
    let path = with_suffix(&args.out, ".manifest.json");
    manifest.finish(&path).at(&path)?;
    Ok(())
}

/// Reads `entity_a \t entity_b \t score \t matched` lines.
fn parse_decisions(text: &str, source: &str) -> ewun::Result<Vec<PairDecision>> {
    let mut decisions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| ewun::Error::Parse {
            path: source.to_owned(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!(
                "expected 4 tab-separated columns, found {}",
                fields.len()
            )));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| bad(format!("invalid score {:?}", fields[2])))?;
        let matched = match fields[3] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("matched must be 0 or 1, found {other:?}"))),
        };
        decisions.push(PairDecision {
            entity_a: fields[0].to_owned(),
            entity_b: fields[1].to_owned(),
            score,
            threshold: f64::NAN,
            matched,
        });
    }
    Ok(decisions)
}

/// The smallest matched score, provided every unmatched score lies below it.
fn implied_threshold(decisions: &[PairDecision]) -> ewun::Result<f64> {
    let threshold = decisions
        .iter()
        .filter(|d| d.matched)
        .map(|d| d.score)
        .fold(f64::INFINITY, f64::min);
    if decisions.iter().any(|d| !d.matched && d.score >= threshold) {
        return Err(ewun::Error::Validation(
            "decisions are not consistent with any single threshold".into(),
        ));
    }
    Ok(threshold)
}

/// The threshold recorded in the decision file's manifest, if any, else the implied one.
fn decision_threshold(decisions_path: &Path, decisions: &[PairDecision]) -> CliResult<f64> {
    let implied = implied_threshold(decisions)?;
    let manifest_path = with_suffix(decisions_path, ".manifest.json");
    let Ok(recorded) = manifest::read_manifest(&manifest_path) else {
        return Ok(implied);
    };
    let Some(threshold) = recorded.config.get("threshold").and_then(|t| t.as_f64()) else {
        return Ok(implied);
    };
    if decisions
        .iter()
        .any(|d| d.matched != (d.score >= threshold))
    {
        return Err(ewun::Error::Validation(format!(
            "decisions disagree with the threshold {threshold} recorded in {}",
            manifest_path.display()
        ))
        .into());
    }
    Ok(threshold)
}

fn check_alignment(decisions: &[PairDecision], gold: &[PairRecord]) -> ewun::Result<()> {
    if decisions.len() != gold.len() {
        return Err(ewun::Error::Validation(format!(
            "{} decisions for {} gold pairs",
            decisions.len(),
            gold.len()
        )));
    }
    if let Some(i) = decisions
        .iter()
        .zip(gold)
        .position(|(d, g)| d.entity_a != g.entity_a || d.entity_b != g.entity_b)
    {
        return Err(ewun::Error::Validation(format!(
            "decision {} does not match gold pair {}",
            i + 1,
            i + 1
        )));
    }
    Ok(())
}

fn write_report(
    prefix: Option<&Path>,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    report: &EvalReport,
    text: String,
) -> CliResult<()> {
    let Some(prefix) = prefix else {
        return Ok(());
    };
    let mut manifest = ManifestBuilder::start(command, config, None);
    for path in inputs {
        manifest.input(path).at(path)?;
    }
    for (suffix, content) in [(".txt", text), (".jsonl", report.to_jsonl()?)] {
        let path = with_suffix(prefix, suffix);
        write_file(&path, &content)?;
        manifest.output(&path).at(&path)?;
    }
    let path = with_suffix(prefix, ".manifest.json");
    manifest.finish(&path).at(&path)?;
    Ok(())
}

fn cmd_report_snapshots(args: &SnapshotArgs) -> CliResult<()> {
    let run = checkpoint_path(&args.run);
    let checkpoints: Vec<(String, PathBuf)> = args
        .checkpoints
        .iter()
        .map(|n| (n.clone(), run.join(n)))
        .collect();
    let first = checkpoints
        .first()
        .ok_or_else(|| CliError::Usage("--checkpoints is empty".into()))?;
    let recorded = restore(&first.1)?;
    let normalization = normalization_for(args.normalization, &recorded);
    let dict = corpus::load_dictionary(&args.dictionary, normalization)?;
    let mut queries = load_records(&args.queries, Split::Test, normalization)?;
    if !args.only.is_empty() {
        let wanted: Vec<String> = args.only.iter().map(|q| normalization.apply(q)).collect();
        queries.retain(|q| wanted.contains(&q.surface));
        if queries.is_empty() {
            return Err(CliError::Core(ewun::Error::Validation(
                "none of the requested queries occur in the query corpus".into(),
            )));
        }
    }
    let rows = snapshot_recommendations(&queries, &checkpoints, &dict)?;
    let last = &checkpoints[checkpoints.len() - 1].0;
    let last_rows: Vec<_> = rows.iter().filter(|r| &r.checkpoint == last).collect();
    let correct = last_rows
        .iter()
        .filter(|r| r.entries.first().is_some_and(|e| e.correct))
        .count();
    let report = EvalReport {
        dataset: args.dataset.clone(),
        scores: Scores::Concept {
            top1_accuracy: correct as f64 / last_rows.len().max(1) as f64,
            n_queries: last_rows.len(),
        },
        wrong_retrievals: Vec::new(),
        errors: Default::default(),
        snapshots: rows,
    };
    let text = report.to_text();
    print!("{text}");
    let inputs: Vec<&Path> = [
        run.as_path(),
        args.dictionary.as_path(),
        args.queries.as_path(),
    ]
    .to_vec();
    write_report(
        args.out.as_deref(),
        "report-snapshots",
        json!({ "checkpoints": args.checkpoints, "queries": args.only, "normalization": normalization.as_str() }),
        &inputs,
        &report,
        text,
    )
}

fn cmd_report_pairs(args: &PairReportArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.decisions).at(&args.decisions)?;
    let mut decisions = parse_decisions(&text, &args.decisions.display().to_string())?;
    let gold = corpus::load_pair_corpus(&args.gold)?;
    check_alignment(&decisions, &gold)?;
    let threshold = decision_threshold(&args.decisions, &decisions)?;
    for d in &mut decisions {
        d.threshold = threshold;
    }
    let report = EvalReport::pairs(&args.dataset, &decisions, &gold, threshold, args.limit)?;
    let text = report.to_text();
    print!("{text}");
    write_report(
        args.out.as_deref(),
        "report-pairs",
        json!({ "dataset": args.dataset, "limit": args.limit }),
        &[args.decisions.as_path(), args.gold.as_path()],
        &report,
        text,
    )
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let recorded = manifest::read_manifest(&args.manifest).at(&args.manifest)?;
    let mut mismatches = 0;
    for (role, artifact) in recorded
        .inputs
        .iter()
        .map(|a| ("input", a))
        .chain(recorded.outputs.iter().map(|a| ("output", a)))
    {
        match manifest::Artifact::of(&artifact.path) {
            Ok(now) if now.sha256 == artifact.sha256 => {}
            Ok(_) => {
                mismatches += 1;
                println!("changed {role} {}", artifact.path.display());
            }
            Err(e) => {
                mismatches += 1;
                println!("unreadable {role} {}: {e}", artifact.path.display());
            }
        }
    }
    let total = recorded.inputs.len() + recorded.outputs.len();
    if mismatches > 0 {
        return Err(CliError::Integrity(format!(
            "{mismatches} of {total} artifacts differ from the manifest"
        )));
    }
    println!("all {total} artifacts match");
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Normalize(a) => cmd_normalize(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Report(ReportCommand::Snapshots(a)) => cmd_report_snapshots(a),
        Command::Report(ReportCommand::Pairs(a)) => cmd_report_pairs(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ewun: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(score: f64, matched: bool) -> PairDecision {
        PairDecision {
            entity_a: "a".into(),
            entity_b: "b".into(),
            score,
            threshold: f64::NAN,
            matched,
        }
    }

    #[test]
    fn implied_threshold_is_smallest_matched_score() {
        let d = [
            decision(0.9, true),
            decision(0.4, false),
            decision(0.6, true),
        ];
        assert_eq!(implied_threshold(&d).unwrap(), 0.6);
        let inconsistent = [decision(0.5, true), decision(0.7, false)];
        assert!(implied_threshold(&inconsistent)
            .unwrap_err()
            .is_data_error());
    }

    #[test]
    fn decisions_round_trip_through_tsv() {
        let original = vec![
            PairDecision::new("acme corp".into(), "acme".into(), 0.8125, 0.5),
            PairDecision::new("zeta".into(), "acme".into(), -0.25, 0.5),
        ];
        let parsed = parse_decisions(&decisions_to_tsv(&original), "t").unwrap();
        for (a, b) in original.iter().zip(&parsed) {
            assert_eq!(
                (&a.entity_a, &a.entity_b, a.score, a.matched),
                (&b.entity_a, &b.entity_b, b.score, b.matched)
            );
        }
    }

    #[test]
    fn exit_codes_are_distinct_per_category() {
        let codes = [
            CliError::Usage("x".into()).exit_code(),
            CliError::Core(ewun::Error::Validation("x".into())).exit_code(),
            CliError::Integrity("x".into()).exit_code(),
            CliError::Io(PathBuf::new(), io::Error::other("x")).exit_code(),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }

    #[test]
    fn default_flags_match_default_config() {
        assert_eq!(
            TrainFlags::default().resolve().unwrap(),
            TrainConfig::default()
        );
        let flags = TrainFlags {
            k: Some(0),
            ..TrainFlags::default()
        };
        assert_eq!(flags.resolve().unwrap_err().exit_code(), 2);
    }
}
