//! Command-line pipeline: learn a prior, augment counts, debias measurement
//! graphs and score them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;
use triplet_debias::graph::{load_ground_truth, read_debiased, read_measurements, write_record};
use triplet_debias::{
    augment_counts, debias_graph, estimate_prior, evaluate, load_vocabulary, AugmentationConfig, ConflictStrategy,
    DebiasedGraph, EmbeddingTable, EvalConfig, EvalReport, InferenceConfig, MeasurementGraph, PriorConfig, PriorModel,
    TaskMode, TripletCounts, Vocabulary,
};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (record format v1)");

/// Images handed to the worker pool at a time, per worker.
const BATCH_PER_WORKER: usize = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: triplet_debias::Error },
    #[error("image {image_id}: {source}")]
    Image { image_id: String, source: triplet_debias::Error },
    #[error(transparent)]
    Core(#[from] triplet_debias::Error),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    /// 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::File { source, .. } | Self::Image { source, .. } | Self::Core(source) if source.is_io() => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

trait AtPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: Into<triplet_debias::Error>> AtPath<T> for Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::File { path: path.to_path_buf(), source: e.into() })
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).at(path)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).at(path)
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult {
    w.flush().at(path)
}

fn read_vocabulary(path: &Path) -> CliResult<Vocabulary> {
    load_vocabulary(open(path)?).at(path)
}

fn read_counts(path: &Path, vocab: &Vocabulary) -> CliResult<TripletCounts> {
    TripletCounts::read(open(path)?, vocab).at(path)
}

fn read_prior(path: &Path) -> CliResult<PriorModel<f64>> {
    PriorModel::from_reader(open(path)?).at(path)
}

#[derive(Debug, Parser)]
#[command(name = "triplet-debias", version = VERSION, about = "Debias scene-graph relationship predictions with a within-triplet prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a prior from triplet counts.
    Learn(LearnArgs),
    /// Add counts of nearby out-of-vocabulary triplets to valid ones.
    Augment(AugmentArgs),
    /// Debias measurement graphs.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run augment, learn, infer and eval in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add-k smoothing on the conditional rows of seen pairs.
    #[arg(long, default_value_t = 0.0)]
    pub smoothing: f64,
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cosine-distance radius.
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Credit each out-of-vocabulary triplet to its nearest valid triplet only.
    #[arg(long)]
    pub nearest_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long)]
    pub measurements: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checked against the vocabulary the prior was learned with.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Pairs whose relationship entropy (nats) exceeds this keep their
    /// measurement argmax; 0 disables refinement. Unset refines every pair.
    #[arg(long)]
    pub entropy_threshold: Option<f64>,
    #[arg(long, default_value_t = ConflictStrategy::TwoStep)]
    pub conflict: ConflictStrategy,
    #[arg(long, default_value_t = TaskMode::Predcls)]
    pub task: TaskMode,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Supplies the seen triplets for zero-shot recall.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub zero_shot: bool,
    /// Comma-separated cut-offs.
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    /// Predicate names for the CSV and the relationship count.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub report_json: Option<PathBuf>,
    #[arg(long)]
    pub per_predicate_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub measurements: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub nearest_only: bool,
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub entropy_threshold: Option<f64>,
    #[arg(long)]
    pub conflict: Option<ConflictStrategy>,
    #[arg(long)]
    pub task: Option<TaskMode>,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub zero_shot: bool,
}

pub fn learn(args: &LearnArgs, log: &mut dyn Write) -> CliResult {
    let vocab = read_vocabulary(&args.vocab)?;
    let counts = read_counts(&args.counts, &vocab)?;
    let prior: PriorModel<f64> = estimate_prior(&counts, &PriorConfig { smoothing: args.smoothing })
        .at(&args.counts)?
        .with_vocabulary_hash(vocab.fingerprint());
    let mut w = create(&args.out)?;
    prior.to_writer(&mut w).at(&args.out)?;
    finish(w, &args.out)?;
    writeln!(
        log,
        "triplets: {} valid, {} out-of-vocabulary; distinct pairs: {}",
        counts.total_valid(),
        counts.total_invalid(),
        counts.distinct_pairs()
    )?;
    Ok(())
}

pub fn augment(args: &AugmentArgs, log: &mut dyn Write) -> CliResult {
    let vocab = read_vocabulary(&args.vocab)?;
    let counts = read_counts(&args.counts, &vocab)?;
    let table = EmbeddingTable::<f64>::read(open(&args.embeddings)?).at(&args.embeddings)?;
    let config = AugmentationConfig { epsilon: args.epsilon, nearest_only: args.nearest_only };
    let augmented = augment_counts(&counts, &vocab, &table, &config)?;
    let mut w = create(&args.out)?;
    augmented.write(&mut w, &vocab).at(&args.out)?;
    finish(w, &args.out)?;
    writeln!(log, "valid triplets: {} -> {}", counts.total_valid(), augmented.total_valid())?;
    Ok(())
}

fn worker_pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    if workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))
}

/// Debiases a stream of measurement records, writing outputs in input order.
/// Returns the number of images.
pub fn infer_stream<R: BufRead, W: Write>(
    prior: &PriorModel<f64>,
    config: &InferenceConfig<f64>,
    input: R,
    output: &mut W,
    pool: &rayon::ThreadPool,
) -> CliResult<usize> {
    config.validate()?;
    let batch_size = BATCH_PER_WORKER * pool.current_num_threads();
    let mut records = read_measurements::<f64, _>(input);
    let mut n = 0;
    loop {
        let batch: Vec<MeasurementGraph<f64>> = records.by_ref().take(batch_size).collect::<Result<_, _>>()?;
        if batch.is_empty() {
            return Ok(n);
        }
        let results: Vec<_> = pool.install(|| batch.par_iter().map(|g| debias_graph(g, prior, config)).collect());
        for (graph, result) in batch.iter().zip(results) {
            let out = result.map_err(|source| CliError::Image { image_id: graph.image_id.clone(), source })?;
            write_record(&mut *output, &out)?;
        }
        n += batch.len();
    }
}

pub fn infer(args: &InferArgs, log: &mut dyn Write) -> CliResult {
    let prior = read_prior(&args.prior)?;
    if let Some(path) = &args.vocab {
        prior.check_vocabulary(&read_vocabulary(path)?).at(&args.prior)?;
    }
    let config =
        InferenceConfig { entropy_threshold: args.entropy_threshold, conflict: args.conflict, task: args.task };
    let pool = worker_pool(args.workers)?;
    let input = open(&args.measurements)?;
    let mut w = create(&args.out)?;
    let start = Instant::now();
    let n = infer_stream(&prior, &config, input, &mut w, &pool).map_err(|e| match e {
        CliError::Core(source) => CliError::File { path: args.measurements.clone(), source },
        other => other,
    })?;
    finish(w, &args.out)?;
    let secs = start.elapsed().as_secs_f64();
    let per_image = if n > 0 { secs / n as f64 } else { 0.0 };
    writeln!(log, "inferred {n} images in {secs:.3} s ({per_image:.5} s/image)")?;
    Ok(())
}

fn n_relations_of(gts: &[triplet_debias::GroundTruthGraph<f64>], preds: &[DebiasedGraph<f64>]) -> usize {
    let gt_max = gts.iter().flat_map(|g| g.relations.iter().map(|r| r.rel));
    let pred_max = preds.iter().flat_map(|p| p.triplets.iter().map(|t| t.rel_label));
    gt_max.chain(pred_max).max().map_or(0, |m| m + 1)
}

/// Scores predictions; returns the report after writing the optional files.
pub fn eval(args: &EvalArgs, log: &mut dyn Write) -> CliResult<EvalReport> {
    if args.zero_shot && args.prior.is_none() {
        return Err(CliError::Usage(
            "zero-shot recall needs --prior: the seen triplets come from the training counts".into(),
        ));
    }
    let config = EvalConfig { ks: args.k.clone(), iou_threshold: args.iou_threshold };
    config.validate()?;
    let vocab = args.vocab.as_deref().map(read_vocabulary).transpose()?;
    let prior = args.prior.as_deref().map(read_prior).transpose()?;
    if let (Some(p), Some(v), Some(path)) = (&prior, &vocab, &args.prior) {
        p.check_vocabulary(v).at(path)?;
    }
    let preds: Vec<DebiasedGraph<f64>> = read_debiased(open(&args.pred)?).collect::<Result<_, _>>().at(&args.pred)?;
    let gts = load_ground_truth::<f64, _>(open(&args.gt)?).at(&args.gt)?;
    let n_relations = match (&vocab, &prior) {
        (Some(v), _) => v.num_relations(),
        (None, Some(p)) => p.n_relations(),
        (None, None) => n_relations_of(&gts, &preds),
    };
    let seen = prior.as_ref().filter(|_| args.zero_shot).map(PriorModel::seen_triplets);
    let report = evaluate(&preds, &gts, n_relations, seen, &config)?;

    if let Some(path) = &args.report_json {
        let mut w = create(path)?;
        report.to_json_writer(&mut w).at(path)?;
        writeln!(w).at(path)?;
        finish(w, path)?;
    }
    if let Some(path) = &args.per_predicate_csv {
        let labels: Vec<String> = match &vocab {
            Some(v) => v.predicates().to_vec(),
            None => (0..n_relations).map(|r| r.to_string()).collect(),
        };
        let mut w = create(path)?;
        report.write_per_predicate_csv(&mut w, &labels).at(path)?;
        finish(w, path)?;
    }
    write!(log, "{}", report.to_table())?;
    Ok(report)
}

/// Pipeline settings from a TOML file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vocab: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub epsilon: Option<f64>,
    pub nearest_only: Option<bool>,
    pub smoothing: Option<f64>,
    pub entropy_threshold: Option<f64>,
    pub conflict: Option<ConflictStrategy>,
    pub task: Option<TaskMode>,
    pub k: Option<Vec<usize>>,
    pub workers: Option<usize>,
    pub zero_shot: Option<bool>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut config = Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.vocab,
            &mut config.counts,
            &mut config.embeddings,
            &mut config.measurements,
            &mut config.ground_truth,
            &mut config.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Flags win over file values.
    pub fn overlay(mut self, args: &PipelineArgs) -> Self {
        fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        set(&mut self.vocab, &args.vocab);
        set(&mut self.counts, &args.counts);
        set(&mut self.embeddings, &args.embeddings);
        set(&mut self.measurements, &args.measurements);
        set(&mut self.ground_truth, &args.ground_truth);
        set(&mut self.out_dir, &args.out_dir);
        set(&mut self.epsilon, &args.epsilon);
        set(&mut self.smoothing, &args.smoothing);
        set(&mut self.entropy_threshold, &args.entropy_threshold);
        set(&mut self.conflict, &args.conflict);
        set(&mut self.task, &args.task);
        set(&mut self.k, &args.k);
        set(&mut self.workers, &args.workers);
        if args.nearest_only {
            self.nearest_only = Some(true);
        }
        if args.zero_shot {
            self.zero_shot = Some(true);
        }
        self
    }

    /// Required paths are present and exist; K is non-empty and ascending.
    pub fn validate(&self) -> CliResult {
        for (name, path) in [("vocab", &self.vocab), ("counts", &self.counts), ("measurements", &self.measurements)] {
            if path.is_none() {
                return Err(CliError::Usage(format!("pipeline needs `{name}`")));
            }
        }
        if self.out_dir.is_none() {
            return Err(CliError::Usage("pipeline needs `out_dir`".into()));
        }
        for path in
            [&self.vocab, &self.counts, &self.embeddings, &self.measurements, &self.ground_truth].into_iter().flatten()
        {
            if !path.exists() {
                return Err(CliError::File {
                    path: path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file").into(),
                });
            }
        }
        if let Some(k) = &self.k {
            EvalConfig { ks: k.clone(), iou_threshold: 0.5 }.validate()?;
        }
        Ok(())
    }
}

/// File names written by `pipeline` inside the output directory.
pub mod outputs {
    pub const AUGMENTED_COUNTS: &str = "augmented_counts.tsv";
    pub const PRIOR: &str = "prior.json";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const REPORT: &str = "report.json";
    pub const PER_PREDICATE: &str = "per_predicate.csv";
}

/// Runs each stage through the same entry points as the single commands.
pub fn pipeline(args: &PipelineArgs, log: &mut dyn Write) -> CliResult {
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = file.overlay(args);
    config.validate()?;
    let out_dir = config.out_dir.clone().unwrap();
    std::fs::create_dir_all(&out_dir).at(&out_dir)?;
    let vocab = config.vocab.clone().unwrap();
    let mut counts = config.counts.clone().unwrap();

    if let Some(embeddings) = &config.embeddings {
        let out = out_dir.join(outputs::AUGMENTED_COUNTS);
        writeln!(log, "== augment")?;
        augment(
            &AugmentArgs {
                counts: counts.clone(),
                vocab: vocab.clone(),
                embeddings: embeddings.clone(),
                out: out.clone(),
                epsilon: config.epsilon.unwrap_or(0.05),
                nearest_only: config.nearest_only.unwrap_or(false),
            },
            log,
        )?;
        counts = out;
    }

    let prior = out_dir.join(outputs::PRIOR);
    writeln!(log, "== learn")?;
    learn(
        &LearnArgs { counts, vocab: vocab.clone(), out: prior.clone(), smoothing: config.smoothing.unwrap_or(0.0) },
        log,
    )?;

    let predictions = out_dir.join(outputs::PREDICTIONS);
    writeln!(log, "== infer")?;
    infer(
        &InferArgs {
            prior: prior.clone(),
            measurements: config.measurements.clone().unwrap(),
            out: predictions.clone(),
            vocab: Some(vocab.clone()),
            entropy_threshold: config.entropy_threshold,
            conflict: config.conflict.unwrap_or_default(),
            task: config.task.unwrap_or_default(),
            workers: config.workers,
        },
        log,
    )?;

    if let Some(gt) = &config.ground_truth {
        writeln!(log, "== eval")?;
        eval(
            &EvalArgs {
                pred: predictions,
                gt: gt.clone(),
                prior: Some(prior),
                zero_shot: config.zero_shot.unwrap_or(false),
                k: config.k.clone().unwrap_or_else(|| EvalConfig::default().ks),
                iou_threshold: 0.5,
                vocab: Some(vocab),
                report_json: Some(out_dir.join(outputs::REPORT)),
                per_predicate_csv: Some(out_dir.join(outputs::PER_PREDICATE)),
            },
            log,
        )?;
    }
    Ok(())
}

pub fn run(cli: &Cli, log: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Learn(a) => learn(a, log),
        Command::Augment(a) => augment(a, log),
        Command::Infer(a) => infer(a, log),
        Command::Eval(a) => eval(a, log).map(|_| ()),
        Command::Pipeline(a) => pipeline(a, log),
    }
}
