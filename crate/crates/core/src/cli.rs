//! The `rrl` command line. Every subcommand writes its outputs and a
//! `manifest.json` into the directory given by `--out`.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, invalid resolved
//! configuration), 2 data or model error.

use std::ffi::OsString;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::corpus::{
    generate_synthetic, label_distribution, load_corpus, split_corpus, tokenize, write_corpus, Corpus, LabelId,
    LabelSet, SynthConfig,
};
use crate::datastore::{class_mean_prototypes, multi_prototypes, BaselineDist, Datastore};
use crate::error::Error;
use crate::evaluation::{
    cross_domain_eval, default_k_grid, default_lambda_grid, evaluate, grid_search_interpolation, random_baseline,
};
use crate::featurizer::token_ids;
use crate::gradcheck::DEFAULT_EPS;
use crate::trainer::{gradcheck_suite, toy_gradcheck, train, TrainConfig};

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "RR_SEED";
/// Largest relative error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "rrl", version, about = "Neighborhood-augmented rhetorical role labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic corpus.
    Gen(GenArgs),
    /// Split a corpus into train/val/test at the document level.
    Split(SplitArgs),
    /// Train a tagger (learning-rate sweep, best-epoch selection).
    Train(TrainArgs),
    /// Evaluate a checkpoint with Viterbi decoding.
    Eval(EvalArgs),
    /// Build a kNN or prototype datastore from a corpus.
    DatastoreBuild(StoreArgs),
    /// Predict labels, optionally interpolating with a datastore.
    Infer(InferArgs),
    /// Grid-search the interpolation coefficient and neighbor count.
    Grid(GridArgs),
    /// Zero-shot evaluation on another domain, with a random baseline.
    Xdomain(XdomainArgs),
    /// Dump contextualized sentence representations as TSV.
    ExportEmbeddings(ExportArgs),
    /// Finite-difference check of the training loss on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed; overrides RR_SEED and any config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    zipf: Option<f64>,
    #[arg(long)]
    private_fraction: Option<f64>,
    #[arg(long)]
    shared_offset: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    /// Label file; defaults to labels.txt next to the corpus.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    fractions: Vec<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rates to sweep, comma separated.
    #[arg(long = "lr", value_delimiter = ',')]
    learning_rates: Option<Vec<f64>>,
    #[arg(long)]
    batch_docs: Option<usize>,
    #[arg(long)]
    hash_buckets: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Sets the token LSTM, attention and sentence LSTM sizes at once.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    contrastive: bool,
    #[arg(long)]
    discourse: bool,
    #[arg(long)]
    memory_bank: bool,
    #[arg(long)]
    single_proto: bool,
    #[arg(long)]
    multi_proto: bool,
    #[arg(long)]
    prototypes_per_label: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Labels left out of the macro average, comma separated.
    #[arg(long, value_delimiter = ',')]
    exclude_labels: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Knn,
    SingleProto,
    MultiProto,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum BaselineArg {
    #[default]
    CrfMarginals,
    EmissionSoftmax,
}

impl From<BaselineArg> for BaselineDist {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::CrfMarginals => BaselineDist::CrfMarginals,
            BaselineArg::EmissionSoftmax => BaselineDist::EmissionSoftmax,
        }
    }
}

#[derive(Args, Debug)]
struct StoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus whose sentences populate the store.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "knn")]
    kind: KindArg,
    /// Centroids per label for multi-proto stores.
    #[arg(long, default_value_t = 4)]
    k_clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL documents; sentence labels are optional.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Weight of the model distribution; required with --store.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Overrides the temperature stored in the datastore.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum, default_value = "crf-marginals")]
    baseline: BaselineArg,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum, default_value = "crf-marginals")]
    baseline: BaselineArg,
    #[arg(long, value_delimiter = ',')]
    exclude_labels: Vec<String>,
}

#[derive(Args, Debug)]
struct XdomainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint trained on the source domain.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Source training corpus; its label distribution drives the random baseline.
    #[arg(long)]
    source_train: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, value_delimiter = ',')]
    exclude_labels: Vec<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

/// Everything needed to repeat a run.
#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    wall_clock_secs: f64,
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(command: &str, argv: &[String], out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                argv: argv.to_vec(),
                version: env!("CARGO_PKG_VERSION"),
                seed: None,
                config: Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
            },
            started: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.manifest.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = self.out.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(Error::from)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &argv) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Gen(a) => gen(a, argv),
        Command::Split(a) => split(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::DatastoreBuild(a) => datastore_build(a, argv),
        Command::Infer(a) => infer(a, argv),
        Command::Grid(a) => grid(a, argv),
        Command::Xdomain(a) => xdomain(a, argv),
        Command::ExportEmbeddings(a) => export_embeddings(a, argv),
        Command::Gradcheck(a) => gradcheck(a, argv),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Seed for commands without a config file: flag, then RR_SEED, then 0.
fn plain_seed(flag: Option<u64>) -> CliResult<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults (with the RR_SEED seed), overlaid by the JSON config file.
/// Unknown keys in the file are rejected.
fn layered<T: Serialize + DeserializeOwned>(mut defaults: T, set_seed: impl FnOnce(&mut T, u64), file: Option<&Path>) -> CliResult<T> {
    if let Some(seed) = env_seed()? {
        set_seed(&mut defaults, seed);
    }
    let Some(path) = file else { return Ok(defaults) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let overlay: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut value = serde_json::to_value(&defaults).map_err(Error::from)?;
    merge(&mut value, overlay);
    serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn labels_path(explicit: &Option<PathBuf>, corpus: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| corpus.parent().unwrap_or(Path::new(".")).join("labels.txt"))
}

fn load_labels(run: &mut Run, explicit: &Option<PathBuf>, corpus: &Path) -> CliResult<LabelSet> {
    let path = labels_path(explicit, corpus);
    run.input(&path)?;
    Ok(LabelSet::load(&path)?)
}

fn load(run: &mut Run, path: &Path, labels: &LabelSet) -> CliResult<Corpus> {
    run.input(path)?;
    Ok(load_corpus(path, labels)?)
}

fn load_ckpt(run: &mut Run, path: &Path) -> CliResult<(Checkpoint<f64>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = sha256_hex(&bytes);
    run.manifest.inputs.push(Artifact {
        path: path.display().to_string(),
        sha256: hash.clone(),
    });
    Ok((Checkpoint::from_bytes(&bytes, &path.display().to_string())?, hash))
}

fn load_store(run: &mut Run, path: &Path, tau: Option<f64>) -> CliResult<Datastore<f64>> {
    run.input(path)?;
    let mut store = Datastore::load(path)?;
    if let Some(t) = tau {
        if !(t > 0.0) || !t.is_finite() {
            return Err(usage(format!("--tau must be positive, got {t}")));
        }
        store.tau = t;
    }
    Ok(store)
}

fn exclude_ids(labels: &LabelSet, names: &[String]) -> CliResult<Vec<LabelId>> {
    names
        .iter()
        .filter(|n| !n.is_empty())
        .map(|n| labels.id(n).ok_or_else(|| usage(format!("--exclude-labels: unknown label {n:?}"))))
        .collect()
}

fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    v.push(b'\n');
    Ok(v)
}

fn label_file_bytes(labels: &LabelSet) -> Vec<u8> {
    let mut s = labels.names().join("\n");
    s.push('\n');
    s.into_bytes()
}

fn corpus_bytes(corpus: &Corpus, scratch: &Path) -> CliResult<Vec<u8>> {
    write_corpus(corpus, scratch)?;
    let bytes = fs::read(scratch).map_err(|e| Error::io(scratch, e))?;
    Ok(bytes)
}

fn gen(a: GenArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("gen", argv, &a.common.out)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    let mut cfg = layered(SynthConfig::default(), |c, s| c.seed = s, a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.n_docs {
        cfg.n_docs = v;
    }
    if let Some(v) = a.n_labels {
        cfg.n_labels = v;
    }
    if let Some(v) = a.zipf {
        cfg.zipf_exponent = v;
    }
    if let Some(v) = a.private_fraction {
        cfg.private_fraction = v;
    }
    if let Some(v) = a.shared_offset {
        cfg.shared_offset = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = generate_synthetic(&cfg)?;
    let path = run.out.join("corpus.jsonl");
    let bytes = corpus_bytes(&corpus, &path)?;
    run.manifest.outputs.push(Artifact {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    });
    run.write("labels.txt", &label_file_bytes(&corpus.label_set))?;
    run.manifest.seed = Some(cfg.seed);
    run.manifest.config = serde_json::to_value(&cfg).map_err(Error::from)?;
    run.finish()
}

fn split(a: SplitArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("split", argv, &a.common.out)?;
    let seed = plain_seed(a.common.seed)?;
    if a.fractions.len() != 3 {
        return Err(usage(format!("--fractions takes three values, got {}", a.fractions.len())));
    }
    let labels = load_labels(&mut run, &a.labels, &a.input)?;
    let corpus = load(&mut run, &a.input, &labels)?;
    let f = (a.fractions[0], a.fractions[1], a.fractions[2]);
    let (tr, va, te) = split_corpus(&corpus, f, seed).map_err(|e| match e {
        Error::Config(m) => usage(m),
        e => e.into(),
    })?;
    for (name, part) in [("train.jsonl", &tr), ("val.jsonl", &va), ("test.jsonl", &te)] {
        let path = run.out.join(name);
        let bytes = corpus_bytes(part, &path)?;
        run.manifest.outputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    run.write("labels.txt", &label_file_bytes(&labels))?;
    run.manifest.seed = Some(seed);
    run.manifest.config = json!({ "fractions": a.fractions });
    run.finish()
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("train", argv, &a.common.out)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    let mut cfg = layered(TrainConfig::default(), |c, s| c.seed = s, a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.learning_rates {
        cfg.learning_rates = v;
    }
    if let Some(v) = a.batch_docs {
        cfg.batch_docs = v;
    }
    if let Some(v) = a.hash_buckets {
        cfg.model.hasher.hash_buckets = v;
    }
    if let Some(v) = a.embed_dim {
        cfg.model.hasher.embed_dim = v;
    }
    if let Some(h) = a.hidden {
        let enc = &mut cfg.model.encoder;
        (enc.h_tok, enc.attn_dim, enc.h_sent) = (h, h, h);
    }
    if let Some(v) = a.dropout {
        cfg.model.encoder.dropout = v;
    }
    let m = &mut cfg.methods;
    m.contrastive |= a.contrastive;
    m.discourse |= a.discourse;
    m.memory_bank |= a.memory_bank;
    m.single_proto |= a.single_proto;
    m.multi_proto |= a.multi_proto;
    if let Some(v) = a.prototypes_per_label {
        cfg.prototypes_per_label = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let labels = load_labels(&mut run, &a.labels, &a.train)?;
    let tr = load(&mut run, &a.train, &labels)?;
    let va = load(&mut run, &a.val, &labels)?;
    let outcome = train::<f64>(&tr, &va, &cfg)?;
    run.write("model.bin", &outcome.checkpoint.to_bytes()?)?;
    run.write(
        "history.json",
        &json_bytes(&json!({ "history": outcome.history, "best": outcome.best }))?,
    )?;
    run.manifest.seed = Some(cfg.seed);
    run.manifest.config = serde_json::to_value(&cfg).map_err(Error::from)?;
    run.finish()
}

fn write_report(run: &mut Run, report: &crate::evaluation::EvalReport) -> CliResult<()> {
    run.write("report.json", &json_bytes(report)?)?;
    run.write("report.txt", report.to_table().as_bytes())?;
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("eval", argv, &a.common.out)?;
    let labels = load_labels(&mut run, &a.labels, &a.test)?;
    let (ckpt, _) = load_ckpt(&mut run, &a.ckpt)?;
    labels.ensure_same(&ckpt.model.label_set)?;
    let test = load(&mut run, &a.test, &labels)?;
    let exclude = exclude_ids(&labels, &a.exclude_labels)?;
    let report = evaluate(&ckpt.model, &test, &exclude)?;
    write_report(&mut run, &report)?;
    run.manifest.config = json!({ "exclude_labels": a.exclude_labels });
    run.finish()
}

fn datastore_build(a: StoreArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("datastore-build", argv, &a.common.out)?;
    let seed = plain_seed(a.common.seed)?;
    if !(a.tau > 0.0) || !a.tau.is_finite() {
        return Err(usage(format!("--tau must be positive, got {}", a.tau)));
    }
    if a.k_clusters == 0 {
        return Err(usage("--k-clusters must be positive"));
    }
    let labels = load_labels(&mut run, &a.labels, &a.corpus)?;
    let (ckpt, hash) = load_ckpt(&mut run, &a.ckpt)?;
    labels.ensure_same(&ckpt.model.label_set)?;
    let corpus = load(&mut run, &a.corpus, &labels)?;
    let knn = ckpt.model.build_datastore(&corpus, a.tau)?;
    let store = match a.kind {
        KindArg::Knn => knn,
        KindArg::SingleProto => class_mean_prototypes(&knn)?,
        KindArg::MultiProto => multi_prototypes(&knn, a.k_clusters, seed)?,
    }
    .with_meta(corpus.name.clone(), hash);
    run.write("store.bin", &store.to_bytes())?;
    run.manifest.seed = Some(seed);
    run.manifest.config = json!({
        "kind": store.kind,
        "k_clusters": a.k_clusters,
        "tau": a.tau,
        "entries": store.len(),
    });
    run.finish()
}

#[derive(Deserialize)]
struct InferDoc {
    doc_id: String,
    sentences: Vec<InferSentence>,
}

#[derive(Deserialize)]
struct InferSentence {
    text: String,
}

fn read_infer_docs(path: &Path) -> CliResult<Vec<InferDoc>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: InferDoc = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if doc.sentences.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("document {:?} has no sentences", doc.doc_id),
            }
            .into());
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn infer(a: InferArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("infer", argv, &a.common.out)?;
    let interp = match (&a.store, a.lambda) {
        (Some(_), None) => return Err(usage("--store requires --lambda")),
        (None, Some(_)) => return Err(usage("--lambda requires --store")),
        (_, Some(l)) if !(0.0..=1.0).contains(&l) => return Err(usage(format!("--lambda must lie in [0, 1], got {l}"))),
        (s, l) => s.as_ref().zip(l),
    };
    if a.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let (ckpt, _) = load_ckpt(&mut run, &a.ckpt)?;
    let model = &ckpt.model;
    let store = match interp {
        Some((path, _)) => Some(load_store(&mut run, path, a.tau)?),
        None => None,
    };
    run.input(&a.input)?;
    let docs = read_infer_docs(&a.input)?;
    let mut out = Vec::new();
    for doc in &docs {
        let ids: Vec<Vec<usize>> = doc
            .sentences
            .iter()
            .map(|s| token_ids(&tokenize(&s.text), &model.config.hasher))
            .collect();
        let pred = match (&store, interp) {
            (Some(store), Some((_, lambda))) => {
                model.decode_interpolated(&ids, store, lambda, a.k, a.baseline.into())?
            }
            _ => model.viterbi(&model.infer(&ids)?)?,
        };
        let labels: Vec<&str> = pred.iter().map(|&l| model.label_set.name(l)).collect();
        serde_json::to_writer(&mut out, &json!({ "doc_id": doc.doc_id, "labels": labels })).map_err(Error::from)?;
        out.push(b'\n');
    }
    run.write("predictions.jsonl", &out)?;
    run.manifest.config = json!({
        "lambda": a.lambda,
        "k": a.k,
        "tau": store.as_ref().map(|s| s.tau),
        "baseline": BaselineDist::from(a.baseline),
        "decoding": if store.is_some() { "interpolated" } else { "viterbi" },
    });
    run.finish()
}

fn grid(a: GridArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("grid", argv, &a.common.out)?;
    let labels = load_labels(&mut run, &a.labels, &a.val)?;
    let (ckpt, _) = load_ckpt(&mut run, &a.ckpt)?;
    labels.ensure_same(&ckpt.model.label_set)?;
    let store = load_store(&mut run, &a.store, a.tau)?;
    let val = load(&mut run, &a.val, &labels)?;
    let lambdas = a.lambdas.unwrap_or_else(default_lambda_grid);
    let ks = a.ks.unwrap_or_else(default_k_grid);
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(usage("--lambdas must lie in [0, 1]"));
    }
    if ks.contains(&0) {
        return Err(usage("--ks must be positive"));
    }
    let exclude = exclude_ids(&labels, &a.exclude_labels)?;
    let result = grid_search_interpolation(&ckpt.model, &store, &val, &lambdas, &ks, a.baseline.into(), &exclude)?;
    run.write("grid.csv", result.to_csv().as_bytes())?;
    run.write("grid.json", &json_bytes(&result)?)?;
    run.manifest.config = json!({
        "lambdas": lambdas,
        "ks": ks,
        "tau": store.tau,
        "baseline": BaselineDist::from(a.baseline),
        "exclude_labels": a.exclude_labels,
    });
    run.finish()
}

fn xdomain(a: XdomainArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("xdomain", argv, &a.common.out)?;
    let seed = plain_seed(a.common.seed)?;
    if a.runs == 0 {
        return Err(usage("--runs must be positive"));
    }
    let labels = load_labels(&mut run, &a.labels, &a.target)?;
    let (ckpt, _) = load_ckpt(&mut run, &a.ckpt)?;
    let target = load(&mut run, &a.target, &labels)?;
    let exclude = exclude_ids(&labels, &a.exclude_labels)?;
    let report = cross_domain_eval(&ckpt.model, &target, &exclude)?;
    let baseline = match &a.source_train {
        Some(p) => {
            let source = load(&mut run, p, &labels)?;
            Some(random_baseline(&label_distribution(&source)?, &target, a.runs, seed, &exclude)?)
        }
        None => None,
    };
    run.write("report.json", &json_bytes(&json!({ "target": report, "random_baseline": baseline }))?)?;
    let mut text = format!("target {}\n\n{}", target.name, report.to_table());
    if let Some(b) = &baseline {
        text.push_str(&format!("\nrandom baseline ({} runs)\n\n{}", b.runs, b.to_table()));
    }
    run.write("report.txt", text.as_bytes())?;
    run.manifest.seed = Some(seed);
    run.manifest.config = json!({ "runs": a.runs, "exclude_labels": a.exclude_labels });
    run.finish()
}

fn export_embeddings(a: ExportArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("export-embeddings", argv, &a.common.out)?;
    let labels = load_labels(&mut run, &a.labels, &a.input)?;
    let (ckpt, _) = load_ckpt(&mut run, &a.ckpt)?;
    labels.ensure_same(&ckpt.model.label_set)?;
    let corpus = load(&mut run, &a.input, &labels)?;
    let model = &ckpt.model;
    let dim = model.config.encoder.repr_dim();
    let mut tsv = String::from("doc_id\tposition\tgold_label");
    for j in 0..dim {
        tsv.push_str(&format!("\tv{j}"));
    }
    tsv.push('\n');
    for doc in &corpus.documents {
        let out = model.infer(&model.featurize(doc))?;
        for (i, s) in doc.sentences.iter().enumerate() {
            tsv.push_str(&format!("{}\t{i}\t{}", doc.doc_id, labels.name(s.label)));
            for v in out.reprs.row(i) {
                tsv.push_str(&format!("\t{v}"));
            }
            tsv.push('\n');
        }
    }
    run.write("embeddings.tsv", tsv.as_bytes())?;
    run.manifest.config = json!({ "dim": dim });
    run.finish()
}

fn gradcheck(a: GradcheckArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new("gradcheck", argv, &a.common.out)?;
    let seed = plain_seed(a.common.seed)?;
    if !(a.eps > 0.0) {
        return Err(usage(format!("--eps must be positive, got {}", a.eps)));
    }
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, methods) in gradcheck_suite() {
        let r = toy_gradcheck(methods, seed, a.eps)?;
        worst = worst.max(r.max_rel_err);
        rows.push(json!({
            "methods": name,
            "max_rel_err": r.max_rel_err,
            "worst": r.worst,
            "analytic": r.worst_values.0,
            "numeric": r.worst_values.1,
            "coordinates": r.coordinates,
        }));
        println!("{name:<24} {:.3e}", r.max_rel_err);
    }
    let pass = worst <= GRADCHECK_TOLERANCE;
    run.write(
        "gradcheck.json",
        &json_bytes(&json!({ "eps": a.eps, "tolerance": GRADCHECK_TOLERANCE, "pass": pass, "results": rows }))?,
    )?;
    run.manifest.seed = Some(seed);
    run.manifest.config = json!({ "eps": a.eps });
    run.finish()?;
    if pass {
        Ok(())
    } else {
        Err(Error::domain("gradcheck", format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")).into())
    }
}
