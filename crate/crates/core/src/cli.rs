// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Each subcommand runs one pipeline stage and
//! writes its outputs under `--out`; stages are chained from the shell.
//!
//! Exit status: 0 on success, 1 when inputs fail validation or a stage
//! cannot run, 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{apply_normalization, compute_norm_stats, read_archive, write_archive, EmbeddingArchive, Modality, Split};
use crate::attribution::{attribution_study, Aggregation, AttributionMethod, ObjectiveKind, StudyConfig, StudyReport, StudyRow};
use crate::concepts::{
    all_vectors, cluster_separators, import_external_vectors, kmeans_concepts, match_unsupervised_to_concept, read_concepts,
    supervised_concept, write_concepts, ConceptVector, KMeansConfig, Method, ProbeConfig, Space,
};
use crate::detection::{
    calibrate, evaluate_detection, CalibratedDetector, ConceptDetection, DetectionResult, DetectorFamily, LayerInput, Strategy,
    DEFAULT_DELTA_GRID, DEFAULT_KEEP_FRACTION,
};
use crate::distributions::{
    build_distributions, empirical_cdf, separation_report, superactivator_stats, Histogram, PositionBins,
};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, extended_f64, norm};
use crate::report::{read_json_artifact, write_json_artifact, ReportFormat, ReportWriter};
use crate::synth::{generate_dataset, layer_dir_name, write_dataset, SyntheticConfig};

/// Detector artifact written by `calibrate`.
pub const DETECTORS_FILE: &str = "detectors.json";
/// Full detection results written by `detect`, read by `report`.
pub const DETECTION_RESULT_FILE: &str = "detection_result.json";
/// Attribution rows and maps written by `attribute`, read by `report`.
pub const ATTRIBUTION_RESULT_FILE: &str = "attribution_result.json";

#[derive(Parser, Debug)]
#[command(name = "superact", version, about = "Concept-activation tail analysis pipeline")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate archives, optionally writing normalised copies.
    Validate(ValidateArgs),
    /// Generate a synthetic dataset with planted concept directions.
    Synth(SynthArgs),
    /// Extract concept vectors from train archives.
    TrainConcepts(TrainArgs),
    /// Activation distributions, separation, coverage and position reports.
    Distributions(DistributionsArgs),
    /// Calibrate detectors on validation archives.
    Calibrate(CalibrateArgs),
    /// Evaluate calibrated detectors on test archives.
    Detect(DetectArgs),
    /// Compare attribution objectives on validation and test archives.
    Attribute(AttributeArgs),
    /// Summarise detection and attribution results into tables.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct OutputArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: ReportFormat,
    /// Omit the timestamp line from report tables.
    #[arg(long)]
    no_timestamp: bool,
}

impl OutputArgs {
    fn writer(&self) -> ReportWriter {
        ReportWriter::new(self.format, !self.no_timestamp)
    }
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long = "archive", required = true)]
    archives: Vec<PathBuf>,
    /// Standardise every archive with statistics from its layer's train split.
    #[arg(long, requires = "out")]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: ReportFormat,
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Train archives (one per layer); val archives are used for matching.
    #[arg(long = "archive", required = true)]
    archives: Vec<PathBuf>,
    #[arg(long = "concept")]
    concepts: Vec<String>,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value = "token", value_parser = parse_space)]
    space: Space,
    /// Cluster count (default 1000 for token space, 50 for CLS space).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    /// Directory holding externally produced vectors (`--method external`).
    #[arg(long)]
    external: Option<PathBuf>,
    /// Grid used when matching unsupervised candidates.
    #[arg(long, value_delimiter = ',', value_parser = parse_delta)]
    delta_grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct DistributionsArgs {
    #[arg(long = "archive", required = true)]
    archives: Vec<PathBuf>,
    /// Concept-vector directory.
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long = "concept")]
    concept_ids: Vec<String>,
    /// Quantile of `D_out` used for the separation fraction.
    #[arg(long, default_value_t = 0.98)]
    q: f64,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Optional detector file; SuperActivator detectors add tail statistics.
    #[arg(long)]
    detectors: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Validation archives, one per layer.
    #[arg(long = "archive", required = true)]
    archives: Vec<PathBuf>,
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long = "concept")]
    concept_ids: Vec<String>,
    #[arg(long = "strategy", value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', value_parser = parse_delta)]
    delta_grid: Vec<f64>,
    /// Fraction of tokens retained by the fixed-tail detector.
    #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
    keep_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Test archives, one per layer.
    #[arg(long = "archive", required = true)]
    archives: Vec<PathBuf>,
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    detectors: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    /// Validation and test archives; each detector's layer must have both.
    #[arg(long = "archive", required = true)]
    archives: Vec<PathBuf>,
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    detectors: PathBuf,
    #[arg(long = "concept")]
    concept_ids: Vec<String>,
    #[arg(long = "method", value_delimiter = ',', value_parser = parse_attribution_method)]
    methods: Vec<AttributionMethod>,
    #[arg(long = "objective", value_delimiter = ',', value_parser = parse_objective)]
    objectives: Vec<ObjectiveKind>,
    #[arg(long, default_value = "mean", value_parser = parse_aggregation)]
    aggregation: Aggregation,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output directories of earlier `detect` / `attribute` runs.
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

fn parse_format(s: &str) -> Result<ReportFormat> {
    s.parse()
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
}

fn parse_space(s: &str) -> Result<Space> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    s.parse()
}

fn parse_attribution_method(s: &str) -> Result<AttributionMethod> {
    s.parse()
}

fn parse_objective(s: &str) -> Result<ObjectiveKind> {
    [ObjectiveKind::GlobalVector, ObjectiveKind::SuperactivatorMean]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown objective `{s}`")))
}

fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "max" => Ok(Aggregation::Max),
        _ => Err(Error::InvalidArgument(format!("unknown aggregation `{s}`"))),
    }
}

fn parse_delta(s: &str) -> Result<f64> {
    let d: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("`{s}` is not a number")))?;
    if d > 0.0 && d <= 1.0 {
        Ok(d)
    } else {
        Err(Error::InvalidArgument(format!("delta {d} outside (0, 1]")))
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.jobs {
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j as usize).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Error::Config(format!("cannot start {j} worker threads: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Validate(a) => cmd_validate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::TrainConcepts(a) => cmd_train(a),
        Command::Distributions(a) => cmd_distributions(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn load_archive(path: &Path) -> Result<EmbeddingArchive> {
    if !path.is_dir() {
        return Err(Error::InvalidArgument(format!("archive `{}` not found", path.display())));
    }
    read_archive(path)
}

fn load_archives(paths: &[PathBuf]) -> Result<Vec<EmbeddingArchive>> {
    paths.iter().map(|p| load_archive(p)).collect()
}

/// Archives of one split, in the order given. Fails when there are none.
fn of_split(archives: Vec<EmbeddingArchive>, split: Split) -> Result<Vec<EmbeddingArchive>> {
    let (keep, skip): (Vec<_>, Vec<_>) = archives.into_iter().partition(|a| a.split() == split);
    for a in &skip {
        log::warn!("ignoring {} archive for layer `{}`", a.split(), a.layer_tag());
    }
    if keep.is_empty() {
        return Err(Error::InvalidArgument(format!("no {split} archive given")));
    }
    Ok(keep)
}

fn find_layer<'a>(archives: &'a [EmbeddingArchive], split: Split, layer_tag: &str) -> Option<&'a EmbeddingArchive> {
    archives.iter().find(|a| a.split() == split && a.layer_tag() == layer_tag)
}

/// The requested concepts, or every declared concept in first-seen order.
fn select_concepts(requested: &[String], archives: &[EmbeddingArchive]) -> Result<Vec<String>> {
    let declared = |c: &str| archives.iter().any(|a| a.concept_index(c).is_some());
    if requested.is_empty() {
        let mut out: Vec<String> = Vec::new();
        for c in archives.iter().flat_map(|a| a.concepts()) {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        return Ok(out);
    }
    let mut out: Vec<String> = Vec::new();
    for c in requested {
        if !declared(c) {
            return Err(Error::UnknownConcept(c.clone()));
        }
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    Ok(out)
}

/// Concept vectors keyed by `(concept_id, layer_tag)`.
struct VectorStore {
    vectors: BTreeMap<(String, String), ConceptVector>,
}

impl VectorStore {
    fn load(dir: &Path) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for v in read_concepts(dir)? {
            let key = (v.concept_id.clone(), v.layer_tag.clone());
            if vectors.insert(key, v).is_some() {
                return Err(Error::ConceptFile(format!(
                    "{} holds two vectors for one concept and layer",
                    dir.display()
                )));
            }
        }
        Ok(Self { vectors })
    }

    fn get(&self, concept_id: &str, layer_tag: &str) -> Option<&ConceptVector> {
        self.vectors.get(&(concept_id.to_owned(), layer_tag.to_owned()))
    }

    fn require(&self, concept_id: &str, layer_tag: &str) -> Result<&ConceptVector> {
        self.get(concept_id, layer_tag)
            .ok_or_else(|| Error::ConceptFile(format!("no vector for concept `{concept_id}` at layer `{layer_tag}`")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorSet {
    pub detectors: Vec<CalibratedDetector>,
}

fn load_detectors(path: &Path) -> Result<Vec<CalibratedDetector>> {
    let set: DetectorSet = read_json_artifact(path)?;
    for d in &set.detectors {
        d.validate()?;
    }
    Ok(set.detectors)
}

fn delta_grid(given: &[f64]) -> Vec<f64> {
    if given.is_empty() {
        DEFAULT_DELTA_GRID.to_vec()
    } else {
        given.to_vec()
    }
}

// ---- validate ----

#[derive(Serialize)]
struct ValidateRow {
    archive: String,
    model_id: String,
    modality: Modality,
    layer_tag: String,
    split: Split,
    dim: usize,
    samples: usize,
    tokens: usize,
    concept_id: String,
    positives: usize,
}

fn validate_rows(path: &Path, a: &EmbeddingArchive) -> Vec<ValidateRow> {
    let row = |concept_id: String, positives: usize| ValidateRow {
        archive: path.display().to_string(),
        model_id: a.model_id().to_owned(),
        modality: a.modality(),
        layer_tag: a.layer_tag().to_owned(),
        split: a.split(),
        dim: a.dim(),
        samples: a.samples().len(),
        tokens: a.total_tokens(),
        concept_id,
        positives,
    };
    if a.concepts().is_empty() {
        return vec![row(String::new(), 0)];
    }
    a.concepts()
        .iter()
        .enumerate()
        .map(|(i, c)| row(c.clone(), a.positive_count(i)))
        .collect()
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let mut loaded = Vec::new();
    let mut failures = 0usize;
    for p in &args.archives {
        match load_archive(p) {
            Ok(a) => {
                println!(
                    "ok {}: {} {} samples, {} tokens, dim {}",
                    p.display(),
                    a.split(),
                    a.samples().len(),
                    a.total_tokens(),
                    a.dim()
                );
                loaded.push((p.clone(), a));
            }
            Err(e) => {
                eprintln!("invalid {}: {e}", p.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Error::InvalidArgument(format!("{failures} archive(s) failed validation")));
    }
    let Some(out) = args.out else {
        return Ok(());
    };
    let rows: Vec<ValidateRow> = loaded.iter().flat_map(|(p, a)| validate_rows(p, a)).collect();
    announce(&ReportWriter::new(args.format, !args.no_timestamp).write_table(&out, "validate", &rows)?);
    if args.normalize {
        let mut seen = std::collections::BTreeSet::new();
        for (_, a) in &loaded {
            if !seen.insert((a.layer_tag().to_owned(), a.split())) {
                return Err(Error::InvalidArgument(format!(
                    "two {} archives for layer `{}`",
                    a.split(),
                    a.layer_tag()
                )));
            }
        }
        for (_, a) in &loaded {
            let train = loaded
                .iter()
                .map(|(_, t)| t)
                .find(|t| t.split() == Split::Train && t.layer_tag() == a.layer_tag())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("layer `{}` has no train archive to normalise with", a.layer_tag()))
                })?;
            let stats = compute_norm_stats(train)?;
            let dir = out.join(layer_dir_name(a.layer_tag())).join(a.split().as_str());
            write_archive(&apply_normalization(a, &stats)?, &dir)?;
            announce(&dir);
        }
    }
    Ok(())
}

// ---- synth ----

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = read_json_artifact(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ds = generate_dataset(&cfg)?;
    for dir in write_dataset(&ds, &args.out)? {
        announce(&dir);
    }
    announce(&args.out.join("truth.json"));
    Ok(())
}

// ---- train-concepts ----

#[derive(Serialize)]
struct TrainRow {
    concept_id: String,
    layer_tag: String,
    method: Method,
    space: Space,
    dim: usize,
    norm: f64,
    degenerate: bool,
    match_val_f1: Option<f64>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let archives = load_archives(&args.archives)?;
    let concepts = select_concepts(&args.concepts, &archives)?;
    let probe = ProbeConfig {
        seed: args.seed,
        ..ProbeConfig::default()
    };
    let family = DetectorFamily::SuperActivator {
        delta_grid: delta_grid(&args.delta_grid),
    };
    let trains: Vec<&EmbeddingArchive> = archives.iter().filter(|a| a.split() == Split::Train).collect();

    let vectors: Vec<ConceptVector> = match args.method {
        Method::MeanPrototype | Method::Linsep => {
            if trains.is_empty() {
                return Err(Error::InvalidArgument("no train archive given".into()));
            }
            let jobs: Vec<(&EmbeddingArchive, &String)> = trains
                .iter()
                .flat_map(|a| concepts.iter().filter(|c| a.concept_index(c).is_some()).map(move |c| (*a, c)))
                .collect();
            jobs.par_iter()
                .map(|(a, c)| supervised_concept(a, c, args.method, args.space, &probe))
                .collect::<Result<_>>()?
        }
        Method::Kmeans | Method::KLinsep => {
            if trains.is_empty() {
                return Err(Error::InvalidArgument("no train archive given".into()));
            }
            let mut out = Vec::new();
            for train in &trains {
                let tag = train.layer_tag();
                let points = all_vectors(train, args.space);
                let default = KMeansConfig::for_space(args.space, 0);
                let cfg = KMeansConfig {
                    k: args.k.unwrap_or(default.k),
                    max_iter: args.max_iter,
                    seed: derive_seed(args.seed, &["kmeans", tag]),
                };
                let (centroids, fit) = kmeans_concepts(&points, &cfg, tag, args.space)?;
                let candidates = if args.method == Method::Kmeans {
                    centroids
                } else {
                    let cfg = ProbeConfig {
                        seed: derive_seed(args.seed, &["k_linsep", tag]),
                        ..probe.clone()
                    };
                    cluster_separators(&points, &fit.assignments, &cfg, tag, args.space)?
                };
                out.extend(match_layer(&candidates, &concepts, &archives, tag, &family)?);
            }
            out
        }
        Method::External => {
            let dir = args
                .external
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("--method external needs --external DIR".into()))?;
            let imported = import_external_vectors(dir)?;
            let mut tags: Vec<&str> = Vec::new();
            for v in &imported {
                if !tags.contains(&v.layer_tag.as_str()) {
                    tags.push(&v.layer_tag);
                }
            }
            let mut out = Vec::new();
            for tag in tags {
                let layer: Vec<ConceptVector> = imported.iter().filter(|v| v.layer_tag == tag).cloned().collect();
                let (named, unnamed): (Vec<_>, Vec<_>) = layer.into_iter().partition(|v| concepts.contains(&v.concept_id));
                let remaining: Vec<String> = concepts
                    .iter()
                    .filter(|c| !named.iter().any(|v| &v.concept_id == *c))
                    .cloned()
                    .collect();
                out.extend(named);
                if !remaining.is_empty() && !unnamed.is_empty() {
                    out.extend(match_layer(&unnamed, &remaining, &archives, tag, &family)?);
                }
            }
            out
        }
    };

    let rows: Vec<TrainRow> = vectors
        .iter()
        .map(|v| TrainRow {
            concept_id: v.concept_id.clone(),
            layer_tag: v.layer_tag.clone(),
            method: v.method,
            space: v.space,
            dim: v.dim(),
            norm: norm(&v.values),
            degenerate: v.is_degenerate(),
            match_val_f1: v.train_meta.get("match_val_f1").and_then(|x| x.as_f64()),
        })
        .collect();
    write_concepts(&args.output.out, &vectors)?;
    announce(&args.output.out.join(crate::concepts::MANIFEST_FILE));
    announce(&args.output.writer().write_table(&args.output.out, "train_concepts", &rows)?);
    Ok(())
}

/// Matches candidates of one layer to each concept on that layer's val archive.
fn match_layer(
    candidates: &[ConceptVector],
    concepts: &[String],
    archives: &[EmbeddingArchive],
    layer_tag: &str,
    family: &DetectorFamily,
) -> Result<Vec<ConceptVector>> {
    let val = find_layer(archives, Split::Val, layer_tag)
        .ok_or_else(|| Error::InvalidArgument(format!("matching needs a val archive for layer `{layer_tag}`")))?;
    concepts
        .par_iter()
        .filter(|c| val.concept_index(c).is_some())
        .map(|c| match_unsupervised_to_concept(candidates, c, val, family))
        .collect()
}

// ---- distributions ----

#[derive(Serialize)]
struct SeparationRow {
    concept_id: String,
    layer_tag: String,
    split: Split,
    n_in: usize,
    n_out: usize,
    q: f64,
    out_quantile: f64,
    separation_fraction: f64,
    coverage_q98: f64,
    coverage_q99: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    concept_id: String,
    layer_tag: String,
    split: Split,
    set: &'static str,
    bin: usize,
    lo: f64,
    hi: f64,
    count: u64,
}

#[derive(Serialize)]
struct CdfRow {
    concept_id: String,
    layer_tag: String,
    split: Split,
    set: &'static str,
    value: f64,
    fraction: f64,
}

#[derive(Serialize)]
struct RatioRow {
    concept_id: String,
    layer_tag: String,
    split: Split,
    sample_id: String,
    superactivators: usize,
    in_concept: usize,
    ratio: f64,
}

fn histogram_rows<'a>(
    h: &'a Histogram,
    concept_id: &str,
    a: &EmbeddingArchive,
    set: &'static str,
) -> impl Iterator<Item = HistogramRow> + 'a {
    let (cid, tag, split) = (concept_id.to_owned(), a.layer_tag().to_owned(), a.split());
    h.counts.iter().enumerate().map(move |(i, &count)| HistogramRow {
        concept_id: cid.clone(),
        layer_tag: tag.clone(),
        split,
        set,
        bin: i,
        lo: h.edges[i],
        hi: h.edges[i + 1],
        count,
    })
}

#[derive(Default)]
struct DistributionTables {
    separation: Vec<SeparationRow>,
    histograms: Vec<HistogramRow>,
    cdf: Vec<CdfRow>,
    ratios: Vec<RatioRow>,
    positions: Vec<HistogramRow>,
}

fn cmd_distributions(args: DistributionsArgs) -> Result<()> {
    if !(args.q > 0.0 && args.q <= 1.0) {
        return Err(Error::InvalidArgument(format!("q = {} outside (0, 1]", args.q)));
    }
    let archives = load_archives(&args.archives)?;
    let store = VectorStore::load(&args.concepts)?;
    let concepts = select_concepts(&args.concept_ids, &archives)?;
    let detectors = match &args.detectors {
        Some(p) => load_detectors(p)?,
        None => Vec::new(),
    };
    let (store, archives) = (&store, &archives);
    let jobs: Vec<(&String, &EmbeddingArchive, &ConceptVector)> = concepts
        .iter()
        .flat_map(|c| {
            archives
                .iter()
                .filter(|a| a.concept_index(c).is_some())
                .filter_map(move |a| store.get(c, a.layer_tag()).map(|v| (c, a, v)))
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::InvalidArgument("no concept vector matches any archive layer".into()));
    }
    let parts: Vec<DistributionTables> = jobs
        .par_iter()
        .map(|&(c, a, v)| -> Result<DistributionTables> {
            let mut t = DistributionTables::default();
            let rep = separation_report(&[(a, &v.values)], c, args.q, args.bins)?;
            let l = &rep.layers[0];
            t.separation.push(SeparationRow {
                concept_id: c.clone(),
                layer_tag: l.layer_tag.clone(),
                split: a.split(),
                n_in: l.n_in,
                n_out: l.n_out,
                q: l.q,
                out_quantile: l.out_quantile,
                separation_fraction: l.separation_fraction,
                coverage_q98: l.coverage_q98,
                coverage_q99: l.coverage_q99,
            });
            t.histograms.extend(histogram_rows(&rep.in_histograms[0], c, a, "in"));
            t.histograms.extend(histogram_rows(&rep.out_histograms[0], c, a, "out"));
            let dist = build_distributions(a, c, &v.values)?;
            for (set, values) in [("in", &dist.d_in), ("out", &dist.d_out)] {
                t.cdf.extend(empirical_cdf(values).into_iter().map(|p| CdfRow {
                    concept_id: c.clone(),
                    layer_tag: a.layer_tag().to_owned(),
                    split: a.split(),
                    set,
                    value: p.value,
                    fraction: p.fraction,
                }));
            }
            let sa = detectors
                .iter()
                .find(|d| d.strategy == Strategy::SuperAct && &d.concept_id == c && d.layer_tag == a.layer_tag());
            let has_positive = a.concept_index(c).is_some_and(|ci| a.positive_count(ci) > 0);
            if let (Some(det), true) = (sa, has_positive) {
                let stats = superactivator_stats(a, c, &v.values, det.tau, PositionBins::default())?;
                t.ratios.extend(stats.per_sample.iter().map(|r| RatioRow {
                    concept_id: c.clone(),
                    layer_tag: a.layer_tag().to_owned(),
                    split: a.split(),
                    sample_id: r.sample_id.clone(),
                    superactivators: r.superactivators,
                    in_concept: r.in_concept,
                    ratio: r.ratio,
                }));
                t.positions
                    .extend(histogram_rows(&stats.absolute_positions, c, a, "absolute"));
                t.positions
                    .extend(histogram_rows(&stats.relative_positions, c, a, "relative"));
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut all = DistributionTables::default();
    for p in parts {
        all.separation.extend(p.separation);
        all.histograms.extend(p.histograms);
        all.cdf.extend(p.cdf);
        all.ratios.extend(p.ratios);
        all.positions.extend(p.positions);
    }
    let w = args.output.writer();
    let out = &args.output.out;
    announce(&w.write_table(out, "separation", &all.separation)?);
    announce(&w.write_table(out, "histograms", &all.histograms)?);
    announce(&w.write_table(out, "cdf", &all.cdf)?);
    if !detectors.is_empty() {
        announce(&w.write_table(out, "superactivator_ratios", &all.ratios)?);
        announce(&w.write_table(out, "superactivator_positions", &all.positions)?);
    }
    Ok(())
}

// ---- calibrate ----

#[derive(Serialize)]
struct CalibrationRow {
    concept_id: String,
    strategy: Strategy,
    layer_tag: String,
    delta: Option<f64>,
    #[serde(with = "extended_f64")]
    tau: f64,
    calibration_f1: f64,
    layers_considered: usize,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    if !(args.keep_fraction > 0.0 && args.keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction {} outside (0, 1]",
            args.keep_fraction
        )));
    }
    let vals = of_split(load_archives(&args.archives)?, Split::Val)?;
    let store = VectorStore::load(&args.concepts)?;
    let concepts = select_concepts(&args.concept_ids, &vals)?;
    let strategies = if args.strategies.is_empty() {
        vec![Strategy::SuperAct]
    } else {
        args.strategies.clone()
    };
    let grid = delta_grid(&args.delta_grid);
    let jobs: Vec<(Strategy, &String)> = strategies
        .iter()
        .flat_map(|&s| concepts.iter().map(move |c| (s, c)))
        .collect();
    let results: Vec<(CalibratedDetector, usize)> = jobs
        .par_iter()
        .map(|&(strategy, c)| {
            let layers: Vec<LayerInput<'_>> = vals
                .iter()
                .filter(|a| a.concept_index(c).is_some())
                .filter_map(|a| store.get(c, a.layer_tag()).map(|v| LayerInput::new(a, &v.values)))
                .collect();
            if layers.is_empty() {
                return Err(Error::ConceptFile(format!("no vector for concept `{c}` at any given layer")));
            }
            let family = match strategy {
                Strategy::SuperAct => DetectorFamily::SuperActivator {
                    delta_grid: grid.clone(),
                },
                Strategy::FixedTail => DetectorFamily::FixedTail {
                    keep_fraction: args.keep_fraction,
                },
                s => DetectorFamily::Baseline {
                    strategy: s,
                    seed: args.seed,
                },
            };
            Ok((calibrate(&family, &layers, c)?, layers.len()))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CalibrationRow> = results
        .iter()
        .map(|(d, n)| CalibrationRow {
            concept_id: d.concept_id.clone(),
            strategy: d.strategy,
            layer_tag: d.layer_tag.clone(),
            delta: d.delta,
            tau: d.tau,
            calibration_f1: d.calibration_f1,
            layers_considered: *n,
        })
        .collect();
    let set = DetectorSet {
        detectors: results.into_iter().map(|(d, _)| d).collect(),
    };
    let path = args.output.out.join(DETECTORS_FILE);
    write_json_artifact(&path, &set)?;
    announce(&path);
    announce(&args.output.writer().write_table(&args.output.out, "calibration", &rows)?);
    Ok(())
}

// ---- detect ----

/// One strategy's detection result, as stored for `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyDetection {
    pub strategy: Strategy,
    pub result: DetectionResult,
}

/// One row of the detection summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummaryRow {
    pub strategy: Strategy,
    pub weighted_f1: f64,
    pub weighted_f1_stderr: f64,
    pub n_concepts: usize,
    pub support: usize,
}

impl DetectionSummaryRow {
    pub fn from_result(strategy: Strategy, r: &DetectionResult) -> Self {
        Self {
            strategy,
            weighted_f1: r.weighted_f1,
            weighted_f1_stderr: r.weighted_f1_stderr,
            n_concepts: r.concepts.len(),
            support: r.concepts.iter().map(|c| c.support).sum(),
        }
    }
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    strategy: Strategy,
    concept_id: &'a str,
    sample_id: &'a str,
    statistic: f64,
    predicted: bool,
    truth: bool,
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let tests = of_split(load_archives(&args.archives)?, Split::Test)?;
    let store = VectorStore::load(&args.concepts)?;
    let detectors = load_detectors(&args.detectors)?;
    if detectors.is_empty() {
        return Err(Error::InvalidArgument("detector file is empty".into()));
    }
    let strategies: Vec<Strategy> = Strategy::ALL
        .into_iter()
        .filter(|s| detectors.iter().any(|d| d.strategy == *s))
        .collect();
    let results: Vec<StrategyDetection> = strategies
        .par_iter()
        .map(|&strategy| {
            let pairs: Vec<(CalibratedDetector, Vec<f64>)> = detectors
                .iter()
                .filter(|d| d.strategy == strategy)
                .map(|d| Ok((d.clone(), store.require(&d.concept_id, &d.layer_tag)?.values.clone())))
                .collect::<Result<_>>()?;
            Ok(StrategyDetection {
                strategy,
                result: evaluate_detection(&tests, &pairs, args.seed)?,
            })
        })
        .collect::<Result<_>>()?;

    let summary: Vec<DetectionSummaryRow> = results
        .iter()
        .map(|r| DetectionSummaryRow::from_result(r.strategy, &r.result))
        .collect();
    let per_concept: Vec<&ConceptDetection> = results.iter().flat_map(|r| &r.result.concepts).collect();
    let predictions: Vec<PredictionRow<'_>> = results
        .iter()
        .flat_map(|r| {
            r.result.predictions.iter().map(move |p| PredictionRow {
                strategy: r.strategy,
                concept_id: &p.concept_id,
                sample_id: &p.sample_id,
                statistic: p.statistic,
                predicted: p.predicted,
                truth: p.truth,
            })
        })
        .collect();
    let out = &args.output.out;
    let w = args.output.writer();
    announce(&w.write_table(out, "detection", &summary)?);
    announce(&w.write_table(out, "detection_concepts", &per_concept)?);
    announce(&w.write_table(out, "predictions", &predictions)?);
    let path = out.join(DETECTION_RESULT_FILE);
    write_json_artifact(&path, &results)?;
    announce(&path);
    Ok(())
}

// ---- attribute ----

fn cmd_attribute(args: AttributeArgs) -> Result<()> {
    let archives = load_archives(&args.archives)?;
    let store = VectorStore::load(&args.concepts)?;
    let detectors = load_detectors(&args.detectors)?;
    let concepts = select_concepts(&args.concept_ids, &archives)?;
    let defaults = StudyConfig::default();
    let cfg = StudyConfig {
        methods: if args.methods.is_empty() {
            defaults.methods.clone()
        } else {
            args.methods.clone()
        },
        objectives: if args.objectives.is_empty() {
            defaults.objectives.clone()
        } else {
            args.objectives.clone()
        },
        aggregation: args.aggregation,
        seed: args.seed,
        ..defaults
    };
    let reports: Vec<StudyReport> = concepts
        .par_iter()
        .map(|c| {
            let det = detectors
                .iter()
                .find(|d| d.strategy == Strategy::SuperAct && &d.concept_id == c)
                .ok_or_else(|| Error::InvalidArgument(format!("no superact detector for concept `{c}`")))?;
            let tag = &det.layer_tag;
            let v = store.require(c, tag)?;
            let missing = |s: Split| Error::InvalidArgument(format!("no {s} archive for layer `{tag}`"));
            let val = find_layer(&archives, Split::Val, tag).ok_or_else(|| missing(Split::Val))?;
            let test = find_layer(&archives, Split::Test, tag).ok_or_else(|| missing(Split::Test))?;
            attribution_study(val, test, c, &v.values, det.tau, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut combined = StudyReport {
        rows: Vec::new(),
        maps: Vec::new(),
    };
    for r in reports {
        combined.rows.extend(r.rows);
        combined.maps.extend(r.maps);
    }
    let out = &args.output.out;
    announce(&args.output.writer().write_table(out, "attribution", &combined.rows)?);
    let path = out.join(ATTRIBUTION_RESULT_FILE);
    write_json_artifact(&path, &combined)?;
    announce(&path);
    Ok(())
}

// ---- report ----

#[derive(Serialize)]
struct DetectionTableFlat {
    source: String,
    strategy: Strategy,
    weighted_f1: f64,
    weighted_f1_stderr: f64,
    n_concepts: usize,
    support: usize,
}

#[derive(Serialize)]
struct AttributionTableRow {
    source: String,
    method: AttributionMethod,
    objective: ObjectiveKind,
    f1: f64,
    mean_positive_f1: f64,
    insertion: f64,
    deletion: f64,
    n_concepts: usize,
}

/// Averages study rows over concepts for each (method, objective) cell.
fn attribution_table(source: &str, rows: &[StudyRow]) -> Vec<AttributionTableRow> {
    let mut cells: Vec<(AttributionMethod, ObjectiveKind)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.method, r.objective)) {
            cells.push((r.method, r.objective));
        }
    }
    cells
        .into_iter()
        .map(|(method, objective)| {
            let sel: Vec<&StudyRow> = rows
                .iter()
                .filter(|r| r.method == method && r.objective == objective)
                .collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&StudyRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            AttributionTableRow {
                source: source.to_owned(),
                method,
                objective,
                f1: mean(|r| r.f1),
                mean_positive_f1: mean(|r| r.mean_positive_f1),
                insertion: mean(|r| r.insertion),
                deletion: mean(|r| r.deletion),
                n_concepts: sel.len(),
            }
        })
        .collect()
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut detection = Vec::new();
    let mut attribution = Vec::new();
    for dir in &args.inputs {
        let source = dir.display().to_string();
        let det = dir.join(DETECTION_RESULT_FILE);
        let att = dir.join(ATTRIBUTION_RESULT_FILE);
        if !det.is_file() && !att.is_file() {
            return Err(Error::InvalidArgument(format!(
                "{source} holds neither {DETECTION_RESULT_FILE} nor {ATTRIBUTION_RESULT_FILE}"
            )));
        }
        if det.is_file() {
            let results: Vec<StrategyDetection> = read_json_artifact(&det)?;
            detection.extend(results.iter().map(|r| {
                let s = DetectionSummaryRow::from_result(r.strategy, &r.result);
                DetectionTableFlat {
                    source: source.clone(),
                    strategy: s.strategy,
                    weighted_f1: s.weighted_f1,
                    weighted_f1_stderr: s.weighted_f1_stderr,
                    n_concepts: s.n_concepts,
                    support: s.support,
                }
            }));
        }
        if att.is_file() {
            let study: StudyReport = read_json_artifact(&att)?;
            attribution.extend(attribution_table(&source, &study.rows));
        }
    }
    let w = args.output.writer();
    let out = &args.output.out;
    if !detection.is_empty() {
        announce(&w.write_table(out, "table_detection", &detection)?);
    }
    if !attribution.is_empty() {
        announce(&w.write_table(out, "table_attribution", &attribution)?);
    }
    Ok(())
}
