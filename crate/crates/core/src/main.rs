use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use topicsum::corpus::{self, build_vocabulary, load_multinews, DocumentCluster, InputFormat, RawCluster, Vocabulary};
use topicsum::eval::{self, evaluate_run, MIN_BUCKET};
use topicsum::ntm::write_topic_report;
use topicsum::training::{
    load_checkpoint, prepare_examples, save_checkpoint, train, write_metrics_csv, EpochMetrics, Model, TrainConfig,
    TrainHooks,
};
use topicsum::{Error, Result};

/// Topic-guided multi-document summarizer.
#[derive(Parser)]
#[command(name = "topicsum", version, about)]
struct Cli {
    /// Upper bound on internal worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize raw splits and build vocabularies.
    Prep(PrepArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Write one summary per input cluster.
    Summarize(SummarizeArgs),
    /// Write the top words of every topic.
    Topics(TopicsArgs),
    /// Decode a split and write ROUGE and per-bucket CSVs.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Training split (vocabularies are built from it).
    #[arg(long)]
    train: PathBuf,
    /// Validation split.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test split.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Input format: jsonl or delimited.
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    /// Sequence vocabulary size, reserved tokens included.
    #[arg(long, default_value_t = 20_000)]
    seq_vocab: usize,
    /// Bag-of-words vocabulary size.
    #[arg(long, default_value_t = 5_000)]
    bow_vocab: usize,
    /// Stopword file, one word per line (default: built-in English list).
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Tokens kept per document.
    #[arg(long, default_value_t = 128)]
    max_doc_len: usize,
    /// Tokens kept per reference summary.
    #[arg(long, default_value_t = 62)]
    max_summary_len: usize,
}

/// Every training hyperparameter; values given here override the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    /// Weight of the topic-model loss [default: 0.8].
    #[arg(long)]
    gamma: Option<f64>,
    /// Weight of the inconsistency loss [default: 0.3].
    #[arg(long)]
    tau: Option<f64>,
    /// Number of topics [default: 10].
    #[arg(long)]
    topics: Option<usize>,
    /// Graph encoder layers [default: 3].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    heads: Option<usize>,
    /// Model width [default: 64].
    #[arg(long)]
    dim: Option<usize>,
    /// Document encoder layers [default: 2].
    #[arg(long)]
    encoder_layers: Option<usize>,
    /// Topic-model inference hidden width [default: 256].
    #[arg(long)]
    ntm_hidden: Option<usize>,
    /// Clusters per batch [default: 8].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Beam size for decoding [default: 5].
    #[arg(long)]
    beam: Option<usize>,
    /// Length normalization exponent [default: 1.0].
    #[arg(long)]
    length_penalty: Option<f64>,
    /// Early-stopping patience in epochs [default: 3].
    #[arg(long)]
    patience: Option<usize>,
    /// Hard cap on epochs [default: 1000].
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Gradient-norm clip [default: 2.0].
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Dropout rate [default: 0.1].
    #[arg(long)]
    dropout: Option<f64>,
    /// Random seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// KL warm-up and annealing [default: true].
    #[arg(long)]
    kl_anneal: Option<bool>,
    /// Tokens per document [default: 128].
    #[arg(long)]
    max_doc_len: Option<usize>,
    /// Documents per cluster [default: 4].
    #[arg(long)]
    max_docs: Option<usize>,
    /// Reference summary tokens [default: 62].
    #[arg(long)]
    max_summary_len: Option<usize>,
    /// Decoder position limit [default: 64].
    #[arg(long)]
    max_decode_len: Option<usize>,
    /// Keep this many word edges per topic node, 0 = all [default: 0].
    #[arg(long)]
    topic_word_top_r: Option<usize>,
    /// Drop the inconsistency loss.
    #[arg(long)]
    no_inc_loss: bool,
    /// Build the graph without topic nodes.
    #[arg(long)]
    no_topic_nodes: bool,
    /// Query word attention with the prefix state instead of the topic pointer.
    #[arg(long)]
    no_topic_pointer: bool,
    /// Skip the graph encoder layers.
    #[arg(long)]
    no_dge: bool,
    /// Freeze the topic-word matrix.
    #[arg(long)]
    fixed_topic_matrix: bool,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            gamma, tau, topics, layers, heads, dim, encoder_layers, ntm_hidden, batch_size, beam, length_penalty,
            patience, max_epochs, lr, grad_clip, dropout, seed, kl_anneal, max_doc_len, max_docs, max_summary_len,
            max_decode_len, topic_word_top_r
        );
        let a = &mut cfg.ablations;
        a.no_inc_loss |= self.no_inc_loss;
        a.no_topic_nodes |= self.no_topic_nodes;
        a.no_topic_pointer |= self.no_topic_pointer;
        a.no_dge |= self.no_dge;
        a.fixed_topic_matrix |= self.fixed_topic_matrix;
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory (manifest, metrics, checkpoint).
    #[arg(long)]
    output: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// prepared, jsonl or delimited.
    #[arg(long, default_value = "jsonl")]
    format: String,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Generated tokens per summary (default and cap: the checkpoint's decoder limit).
    #[arg(long)]
    max_len: Option<usize>,
    /// Output file (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TopicsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Words per topic.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output file (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to decode.
    #[arg(long)]
    split: PathBuf,
    /// prepared, jsonl or delimited.
    #[arg(long, default_value = "prepared")]
    format: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Generated tokens per summary (default and cap: the checkpoint's decoder limit).
    #[arg(long)]
    max_len: Option<usize>,
    /// Buckets with fewer clusters are discarded.
    #[arg(long, default_value_t = MIN_BUCKET)]
    min_bucket: usize,
    /// Also report C_v coherence of the top-10 topic words over the split's documents.
    #[arg(long)]
    coherence: bool,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config: TrainConfig,
    seed: u64,
    data: PathBuf,
    checkpoint: PathBuf,
    started_unix: u64,
    finished_unix: Option<u64>,
    best_epoch: Option<usize>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

fn read_raw(path: &Path, format: InputFormat) -> Result<(Vec<RawCluster>, usize)> {
    let mut ok = Vec::new();
    let mut failed = 0;
    for rec in load_multinews(path, format)? {
        match rec {
            Ok(c) => ok.push(c),
            Err(e) => {
                warn!("{e}");
                failed += 1;
            }
        }
    }
    Ok((ok, failed))
}

fn write_prepared(path: &Path, clusters: &[DocumentCluster]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for c in clusters {
        serde_json::to_writer(&mut out, c)?;
        writeln!(out)?;
    }
    Ok(())
}

fn read_prepared(path: &Path) -> Result<Vec<DocumentCluster>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn encode_all(vocab: &Vocabulary, raw: &[RawCluster], max_doc_len: usize, max_summary_len: usize) -> Vec<DocumentCluster> {
    raw.iter()
        .filter_map(|r| match vocab.encode_cluster(r, max_doc_len, max_summary_len) {
            Ok(c) => Some(c),
            Err(e) => {
                warn!("skipping cluster: {e}");
                None
            }
        })
        .collect()
}

/// Clusters of a split for an existing model, in file order.
fn load_split(model: &Model, path: &Path, format: &str) -> Result<Vec<DocumentCluster>> {
    if format == "prepared" {
        return read_prepared(path);
    }
    let (raw, failed) = read_raw(path, format.parse()?)?;
    if failed > 0 {
        warn!("{failed} malformed records in {}", path.display());
    }
    let cfg = &model.config;
    Ok(encode_all(&model.vocab, &raw, cfg.max_doc_len, cfg.max_summary_len))
}

fn cmd_prep(args: &PrepArgs) -> Result<()> {
    let format: InputFormat = args.format.parse()?;
    std::fs::create_dir_all(&args.output)?;
    let stopwords = match &args.stopwords {
        Some(p) => corpus::load_stopwords(p)?,
        None => corpus::default_stopwords(),
    };
    let (train_raw, train_failed) = read_raw(&args.train, format)?;
    let vocab = build_vocabulary(&train_raw, args.seq_vocab, args.bow_vocab, &stopwords)?;
    vocab.write_files(&args.output)?;
    let mut report = String::new();
    let splits = [("train", Some(&args.train)), ("val", args.val.as_ref()), ("test", args.test.as_ref())];
    for (name, path) in splits {
        let Some(path) = path else { continue };
        let (raw, failed) = if name == "train" {
            (train_raw.clone(), train_failed)
        } else {
            read_raw(path, format)?
        };
        let clusters = encode_all(&vocab, &raw, args.max_doc_len, args.max_summary_len);
        write_prepared(&args.output.join(format!("{name}.jsonl")), &clusters)?;
        let line = format!(
            "{name}\tread={}\tmalformed={failed}\tencoded={}\n",
            raw.len(),
            clusters.len()
        );
        info!("{}", line.trim_end());
        report.push_str(&line);
    }
    std::fs::write(args.output.join("prep_report.txt"), report)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    args.flags.apply(&mut cfg);
    cfg.validate()?;
    std::fs::create_dir_all(&args.output)?;
    let vocab = Vocabulary::read_files(&args.data)?;
    let train_set = read_prepared(&args.data.join("train.jsonl"))?;
    let val_path = args.data.join("val.jsonl");
    let val_set = if val_path.exists() {
        read_prepared(&val_path)?
    } else {
        warn!("no validation split; validating on the training split");
        train_set.clone()
    };
    let checkpoint = args.output.join("best.ckpt");
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        data: args.data.clone(),
        checkpoint: checkpoint.clone(),
        started_unix: now(),
        finished_unix: None,
        best_epoch: None,
    };
    let manifest_path = args.output.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    std::fs::write(args.output.join("config.txt"), cfg.to_kv())?;

    let train_ex = prepare_examples(&train_set, &vocab, &cfg);
    let val_ex = prepare_examples(&val_set, &vocab, &cfg);
    let model = Model::new(cfg, vocab)?;
    let metrics_path = args.output.join("metrics.csv");
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut on_epoch = |_: &Model, m: &EpochMetrics| -> Result<()> {
        history.push(*m);
        write_metrics_csv(File::create(&metrics_path)?, &history)
    };
    let outcome = train(
        &model,
        &train_ex,
        &val_ex,
        TrainHooks {
            on_epoch: Some(&mut on_epoch),
            validate: true,
        },
    )?;
    save_checkpoint(&model, &checkpoint)?;
    manifest.finished_unix = Some(now());
    manifest.best_epoch = Some(outcome.best_epoch);
    write_json(&manifest_path, &manifest)?;
    info!(
        "best epoch {} (val {:.4}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val,
        checkpoint.display()
    );
    Ok(())
}

fn output_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn cmd_summarize(args: &SummarizeArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let clusters = load_split(&model, &args.input, &args.format)?;
    let examples = prepare_examples(&clusters, &model.vocab, &model.config);
    let mut out = output_writer(&args.output)?;
    for ex in &examples {
        let summary = model.summarize(&ex.input, args.beam, args.max_len.unwrap_or(usize::MAX))?;
        writeln!(out, "{}", corpus::detokenize(&summary))?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_topics(args: &TopicsArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let topics = model.ntm.all_top_words(args.n, &model.vocab)?;
    let mut out = output_writer(&args.output)?;
    write_topic_report(&mut out, &topics)?;
    out.flush()?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, workers: usize) -> Result<bool> {
    let model = load_checkpoint(&args.checkpoint)?;
    let clusters = load_split(&model, &args.split, &args.format)?;
    if clusters.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let examples = prepare_examples(&clusters, &model.vocab, &model.config);
    std::fs::create_dir_all(&args.output)?;
    let report = evaluate_run(&model, &examples, args.beam, args.max_len.unwrap_or(usize::MAX), args.min_bucket, workers);
    report.write_metrics_csv(File::create(args.output.join("metrics.csv"))?)?;
    report.write_bucket_csv(File::create(args.output.join("buckets.csv"))?)?;
    write_json(&args.output.join("scores.json"), &report.scores)?;
    if args.coherence {
        let topics = model.ntm.all_top_words(10, &model.vocab)?;
        let docs: Vec<Vec<String>> = clusters
            .iter()
            .flat_map(|c| c.raw_documents.iter().map(|d| corpus::tokenize(d)))
            .collect();
        let cv = eval::coherence_cv(&topics, &docs, eval::CV_WINDOW);
        write_json(&args.output.join("coherence.json"), &cv)?;
    }
    info!(
        "R-1 {:.4} R-2 {:.4} R-SU {:.4} over {} clusters ({} failed)",
        report.r1.f1,
        report.r2.f1,
        report.rsu.f1,
        report.scores.len(),
        report.failures.len()
    );
    Ok(!report.too_many_failures())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Prep(a) => cmd_prep(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Summarize(a) => cmd_summarize(a).map(|_| true),
        Command::Topics(a) => cmd_topics(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a, cli.workers.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        std::env::set_var("RAYON_NUM_THREADS", w.max(1).to_string());
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("more than 1% of clusters failed to decode");
            ExitCode::FAILURE
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
