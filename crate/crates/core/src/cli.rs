//! Command-line front end.
//!
//! Every subcommand emits a list of flat records. `--format human` prints
//! them as `key=value` lines, `--format json` as one JSON object per line.
//! Real numbers are printed with six significant digits in both formats.
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on I/O errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::abx::{abx_error_with, Aggregation, TripletManifest};
use crate::error::{Error, Result};
use crate::featstore::{
    load_sequence_map, load_sequences, read_features, FeatureMatrix, MatchMask, PairManifest, DEFAULT_FRAME_RATE_HZ,
};
use crate::losses::{
    diversity_loss_unnormalized, finite_difference_check, matching_loss, w2v2_contrastive_loss, MatchingLossConfig,
    Reduction, ScoreKind, ScoreMatrix, W2V2LossInput,
};
use crate::masking::{batch_masks, MaskMode, MaskSpec};
use crate::quantizer::{kmeans_fit, kmeans_quantize, KMeansModel, UnitSequence};
use crate::retrieval::{ctf_retrieve, recall_at_n, Direction, FineScorer, FnScorer, RankedList, TableScorer};
use crate::semeval::{semantic_score, JudgmentSet, PoolMode};
use crate::unitlm::{
    ngram_train_with_vocab, paired_accuracy, pseudo_logprob_repeated, read_units, write_units, NGramLm, SpanSpec, UnitLm,
};
use crate::vecmath::dot_f32;

#[derive(Debug, Parser)]
#[command(name = "vgskit", version, about = "Visually grounded speech evaluation toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare analytic loss gradients with finite differences on random instances.
    LossCheck(LossCheckArgs),
    /// Coarse-to-fine retrieval recall in both directions.
    Retrieve(RetrieveArgs),
    /// ABX error with DTW over cosine frame distances.
    Abx(AbxArgs),
    /// Spearman correlation of pooled cosine similarities with human judgments.
    Semantic(SemanticArgs),
    /// Map frames to their nearest centroid.
    Quantize(QuantizeArgs),
    /// Fit k-means centroids on all frames of a feature set.
    KmeansFit(KmeansFitArgs),
    /// Empirical masked-fraction statistics for a span mask spec.
    MaskStats(MaskStatsArgs),
    /// Train an n-gram unit language model.
    LmTrain(LmTrainArgs),
    /// Span-sampled pseudo log-probability of each unit sequence.
    PseudoProb(PseudoProbArgs),
    /// Paired accuracy of positive over negative scores.
    ScorePairs(ScorePairsArgs),
}

#[derive(Debug, Args)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    max_batch: usize,
    #[arg(long, default_value_t = 16)]
    max_dim: usize,
    #[arg(long, default_value_t = 8)]
    max_groups: usize,
    #[arg(long, default_value_t = 8)]
    max_entries: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    /// Caption embeddings, one row per manifest record.
    #[arg(long)]
    queries: PathBuf,
    /// Image embeddings, one row per image in first-appearance order.
    #[arg(long)]
    targets: PathBuf,
    /// Caption × image fine scores; defaults to the dot product.
    #[arg(long)]
    fine_scores: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 20)]
    kc: usize,
    #[arg(long, default_value_t = 10)]
    n: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Unweighted,
    Weighted,
}

#[derive(Debug, Args)]
struct AbxArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long, value_enum, default_value_t = AggregationArg::Unweighted)]
    aggregation: AggregationArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolArg {
    Mean,
    Max,
}

#[derive(Debug, Args)]
struct SemanticArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    judgments: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolArg::Mean)]
    pool: PoolArg,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Unit sequences, one JSON record per utterance.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct KmeansFitArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Centroid file; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskModeArg {
    PerUtterance,
    BatchMinCrop,
}

#[derive(Debug, Args)]
struct MaskStatsArgs {
    /// Utterance lengths of one batch, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10000")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 0.065)]
    p: f64,
    #[arg(long, default_value_t = 10)]
    span: usize,
    #[arg(long, value_enum, default_value_t = MaskModeArg::PerUtterance)]
    mode: MaskModeArg,
    /// Batches drawn, with seeds `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Debug, Args)]
struct LmTrainArgs {
    #[arg(long)]
    units: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.1)]
    add_k: f64,
    /// Vocabulary size; defaults to the largest unit id plus one.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PseudoProbArgs {
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    units: PathBuf,
    /// Span draws averaged per utterance.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 5.0)]
    span_mean: f64,
    #[arg(long, default_value_t = 5.0)]
    span_std: f64,
    #[arg(long, default_value_t = 0.5)]
    coverage: f64,
}

#[derive(Debug, Args)]
struct ScorePairsArgs {
    /// One score per line, or JSON lines with a `logprob` field.
    #[arg(long)]
    pos: PathBuf,
    #[arg(long)]
    neg: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
enum Val {
    Str(String),
    Int(u64),
    Num(f64),
    Bool(bool),
}

impl From<&str> for Val {
    fn from(s: &str) -> Self {
        Val::Str(s.to_owned())
    }
}

impl From<String> for Val {
    fn from(s: String) -> Self {
        Val::Str(s)
    }
}

impl From<usize> for Val {
    fn from(n: usize) -> Self {
        Val::Int(n as u64)
    }
}

impl From<u64> for Val {
    fn from(n: u64) -> Self {
        Val::Int(n)
    }
}

impl From<f64> for Val {
    fn from(x: f64) -> Self {
        Val::Num(x)
    }
}

impl From<bool> for Val {
    fn from(b: bool) -> Self {
        Val::Bool(b)
    }
}

type Record = Vec<(&'static str, Val)>;

macro_rules! record {
    ($($k:literal => $v:expr),* $(,)?) => {
        vec![$(($k, Val::from($v))),*]
    };
}

/// `%g`-style formatting with six significant digits.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    } else {
        trim_fraction(&format!("{x:.*}", (5 - exp) as usize)).to_owned()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn render(records: &[Record], format: Format) -> String {
    let mut out = String::new();
    for rec in records {
        let fields: Vec<String> = rec
            .iter()
            .map(|(k, v)| match format {
                Format::Human => {
                    let v = match v {
                        Val::Str(s) => s.clone(),
                        Val::Int(n) => n.to_string(),
                        Val::Num(x) => format_number(*x),
                        Val::Bool(b) => b.to_string(),
                    };
                    format!("{k}={v}")
                }
                Format::Json => {
                    let v = match v {
                        Val::Str(s) => serde_json::to_string(s).expect("string serializes"),
                        Val::Int(n) => n.to_string(),
                        Val::Num(x) if x.is_finite() => format_number(*x),
                        Val::Num(_) => "null".into(),
                        Val::Bool(b) => b.to_string(),
                    };
                    format!("\"{k}\":{v}")
                }
            })
            .collect();
        match format {
            Format::Human => out.push_str(&fields.join(" ")),
            Format::Json => {
                out.push('{');
                out.push_str(&fields.join(","));
                out.push('}');
            }
        }
        out.push('\n');
    }
    out
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(records) => match out.write_all(render(&records, cli.format).as_bytes()) {
            Ok(()) => 0,
            Err(_) => 2,
        },
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Vec<Record>> {
    let seed = cli.seed;
    match &cli.command {
        Command::LossCheck(a) => loss_check(a, seed),
        Command::Retrieve(a) => retrieve(a),
        Command::Abx(a) => abx(a),
        Command::Semantic(a) => semantic(a),
        Command::Quantize(a) => quantize(a),
        Command::KmeansFit(a) => kmeans(a, seed),
        Command::MaskStats(a) => mask_stats(a, seed),
        Command::LmTrain(a) => lm_train(a),
        Command::PseudoProb(a) => pseudo_prob(a, seed),
        Command::ScorePairs(a) => score_pairs(a),
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn matching_instance_error(rng: &mut ChaCha8Rng, a: &LossCheckArgs) -> Result<f64> {
    let b = rng.random_range(1..=a.max_batch);
    let mut rows = vec![vec![1u8; b]; b];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, bit) in row.iter_mut().enumerate() {
            *bit = u8::from(i != j && rng.random_bool(0.7));
        }
    }
    let mask = MatchMask::from_rows(&rows)?;
    let reduction = if rng.random_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
    let cfg = MatchingLossConfig::new(rng.random_range(0.0..2.0), mask)?.with_reduction(reduction);
    let x0 = uniform_vec(rng, b * b, -3.0, 3.0);
    finite_difference_check(
        |x| {
            let s = ScoreMatrix::new(b, b, x.to_vec(), ScoreKind::Fine).expect("square scores");
            let o = matching_loss(&s, &cfg).expect("valid config");
            (o.loss, o.grad)
        },
        &x0,
        a.eps,
    )
}

fn w2v2_instance_error(rng: &mut ChaCha8Rng, a: &LossCheckArgs) -> Result<f64> {
    let d = rng.random_range(2..=a.max_dim.max(2));
    let k = rng.random_range(0..=8);
    let temperature = rng.random_range(0.1..1.0);
    let x0 = uniform_vec(rng, d * (k + 2), -1.0, 1.0);
    finite_difference_check(
        |x| {
            let v: Vec<Vec<f64>> = x.chunks_exact(d).map(<[f64]>::to_vec).collect();
            let o = w2v2_contrastive_loss(&W2V2LossInput {
                context: v[0].clone(),
                target: v[1].clone(),
                distractors: v[2..].to_vec(),
                temperature,
            })
            .expect("nonzero vectors");
            let mut g = o.grad_context;
            g.extend(o.grad_target);
            g.extend(o.grad_distractors.into_iter().flatten());
            (o.loss, g)
        },
        &x0,
        a.eps,
    )
}

fn diversity_instance_error(rng: &mut ChaCha8Rng, a: &LossCheckArgs) -> Result<f64> {
    let g = rng.random_range(1..=a.max_groups);
    let v = rng.random_range(2..=a.max_entries.max(2));
    let mut x0 = uniform_vec(rng, g * v, 0.05, 1.0);
    for row in x0.chunks_mut(v) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    finite_difference_check(
        |x| {
            let o = diversity_loss_unnormalized(g, v, x).expect("positive entries");
            (o.loss, o.grad)
        },
        &x0,
        a.eps,
    )
}

fn loss_check(a: &LossCheckArgs, seed: u64) -> Result<Vec<Record>> {
    if a.instances == 0 || a.max_batch == 0 || a.max_dim == 0 || a.max_groups == 0 || a.max_entries == 0 {
        return Err(Error::InvalidArgument("instance counts and limits must be positive".into()));
    }
    type Check = fn(&mut ChaCha8Rng, &LossCheckArgs) -> Result<f64>;
    let checks: [(&str, Check); 3] = [
        ("matching", matching_instance_error),
        ("w2v2", w2v2_instance_error),
        ("diversity", diversity_instance_error),
    ];
    let mut records = Vec::new();
    for (k, (name, check)) in checks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst = 0.0f64;
        for _ in 0..a.instances {
            worst = worst.max(check(&mut rng, a)?);
        }
        records.push(record! {
            "loss" => *name,
            "instances" => a.instances,
            "max_rel_err" => worst,
            "ok" => worst < a.tolerance,
        });
    }
    Ok(records)
}

fn recall_records(
    ranked: &[RankedList],
    manifest: &PairManifest,
    n: usize,
    direction: Direction,
    calls: u64,
) -> Result<Vec<Record>> {
    let name = match direction {
        Direction::SpeechToImage => "speech_to_image",
        Direction::ImageToSpeech => "image_to_speech",
    };
    let mut records = Vec::new();
    for k in [1, 5, 10].into_iter().filter(|&k| k <= n) {
        records.push(record! {
            "direction" => name,
            "n" => k,
            "recall" => recall_at_n(ranked, manifest, k, direction)?,
            "fine_calls" => calls,
        });
    }
    Ok(records)
}

fn retrieve(a: &RetrieveArgs) -> Result<Vec<Record>> {
    let manifest = PairManifest::read(&a.manifest)?;
    let queries = read_features(&a.queries)?;
    let targets = read_features(&a.targets)?;
    if queries.rows() != manifest.n_captions() || targets.rows() != manifest.n_images() {
        return Err(Error::ShapeMismatch(format!(
            "manifest has {} captions and {} images, features have {} and {} rows",
            manifest.n_captions(),
            manifest.n_images(),
            queries.rows(),
            targets.rows()
        )));
    }
    let (s2i, i2s): (Box<dyn FineScorer>, Box<dyn FineScorer>) = match &a.fine_scores {
        Some(path) => {
            let table = read_features(path)?;
            if table.shape() != (queries.rows(), targets.rows()) {
                return Err(Error::ShapeMismatch(format!(
                    "fine scores are {}x{}, expected {}x{}",
                    table.rows(),
                    table.cols(),
                    queries.rows(),
                    targets.rows()
                )));
            }
            let scorer = TableScorer::new(table);
            let transposed = scorer.transposed();
            (Box::new(scorer), Box::new(transposed))
        }
        None => {
            let (q, t) = (queries.clone(), targets.clone());
            let (q2, t2) = (queries.clone(), targets.clone());
            (
                Box::new(FnScorer::new(move |i, j| dot_f32(q.row(i), t.row(j)))),
                Box::new(FnScorer::new(move |i, j| dot_f32(t2.row(i), q2.row(j)))),
            )
        }
    };
    let forward = ctf_retrieve(&queries, &targets, s2i.as_ref(), a.kc, a.n)?;
    let backward = ctf_retrieve(&targets, &queries, i2s.as_ref(), a.kc, a.n)?;
    let mut records = recall_records(&forward, &manifest, a.n, Direction::SpeechToImage, s2i.call_count())?;
    records.extend(recall_records(&backward, &manifest, a.n, Direction::ImageToSpeech, i2s.call_count())?);
    Ok(records)
}

fn abx(a: &AbxArgs) -> Result<Vec<Record>> {
    let features = load_sequence_map(&a.features, DEFAULT_FRAME_RATE_HZ)?;
    let manifest = TripletManifest::read(&a.triplets)?;
    let aggregation = match a.aggregation {
        AggregationArg::Unweighted => Aggregation::Unweighted,
        AggregationArg::Weighted => Aggregation::Weighted,
    };
    let report = abx_error_with(&manifest, &features, aggregation)?;
    let mut records: Vec<Record> = report
        .groups
        .iter()
        .map(|g| record! { "group" => g.group.clone(), "error_pct" => 100.0 * g.error, "triples" => g.triples })
        .collect();
    records.push(record! { "group" => "overall", "error_pct" => 100.0 * report.overall, "triples" => report.triples });
    Ok(records)
}

fn semantic(a: &SemanticArgs) -> Result<Vec<Record>> {
    let features = load_sequence_map(&a.features, DEFAULT_FRAME_RATE_HZ)?;
    let judgments = JudgmentSet::read(&a.judgments)?;
    let (mode, name) = match a.pool {
        PoolArg::Mean => (PoolMode::Mean, "mean"),
        PoolArg::Max => (PoolMode::Max, "max"),
    };
    let score = semantic_score(&judgments, &features, mode)?;
    Ok(vec![record! { "pool" => name, "pairs" => judgments.judgments().len(), "score" => score }])
}

fn kmeans(a: &KmeansFitArgs, seed: u64) -> Result<Vec<Record>> {
    let seqs = load_sequences(&a.features, DEFAULT_FRAME_RATE_HZ)?;
    let data = FeatureMatrix::vstack(seqs.iter().map(|s| s.matrix()))?;
    let model = kmeans_fit(&data, a.k, a.max_iters, seed)?;
    model.save(&a.out)?;
    let inertia = model.inertia_history().last().copied().unwrap_or(f64::NAN);
    Ok(vec![record! {
        "k" => model.k(),
        "dim" => model.dim(),
        "frames" => data.rows(),
        "iterations" => model.iterations(),
        "inertia" => inertia,
    }])
}

fn quantize(a: &QuantizeArgs) -> Result<Vec<Record>> {
    let model = KMeansModel::load(&a.model)?;
    let seqs = load_sequences(&a.features, DEFAULT_FRAME_RATE_HZ)?;
    let units: Vec<UnitSequence> = seqs.iter().map(|s| kmeans_quantize(&model, s)).collect::<Result<_>>()?;
    write_units(&units, &a.out)?;
    let mut used = vec![false; model.k()];
    units.iter().flat_map(|u| &u.units).for_each(|&u| used[u as usize] = true);
    Ok(vec![record! {
        "utterances" => units.len(),
        "frames" => units.iter().map(UnitSequence::len).sum::<usize>(),
        "distinct_units" => used.iter().filter(|&&u| u).count(),
    }])
}

fn mask_stats(a: &MaskStatsArgs, seed: u64) -> Result<Vec<Record>> {
    if a.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be at least 1".into()));
    }
    let mode = match a.mode {
        MaskModeArg::PerUtterance => MaskMode::PerUtterance,
        MaskModeArg::BatchMinCrop => MaskMode::BatchMinCrop,
    };
    let spec = MaskSpec::new(a.p, a.span, mode, seed)?;
    let mut fractions = vec![0.0; a.lengths.len()];
    let mut starts = vec![0.0; a.lengths.len()];
    for t in 0..a.trials {
        let trial = MaskSpec { seed: seed.wrapping_add(t as u64), ..spec };
        for (i, m) in batch_masks(&a.lengths, &trial)?.iter().enumerate() {
            fractions[i] += m.masked_fraction();
            starts[i] += m.starts().len() as f64;
        }
    }
    let trials = a.trials as f64;
    Ok(a.lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            record! {
                "utterance" => i,
                "length" => len,
                "mean_fraction" => fractions[i] / trials,
                "mean_starts" => starts[i] / trials,
                "expected_fraction" => spec.expected_fraction(),
            }
        })
        .collect())
}

fn lm_train(a: &LmTrainArgs) -> Result<Vec<Record>> {
    let seqs = read_units(&a.units)?;
    let lm = ngram_train_with_vocab(&seqs, a.order, a.add_k, a.vocab)?;
    lm.save(&a.out)?;
    Ok(vec![record! {
        "order" => lm.order(),
        "vocab" => lm.vocab_size(),
        "sequences" => seqs.len(),
        "tokens" => seqs.iter().map(UnitSequence::len).sum::<usize>(),
    }])
}

fn pseudo_prob(a: &PseudoProbArgs, seed: u64) -> Result<Vec<Record>> {
    let lm = NGramLm::load(&a.lm)?;
    let seqs = read_units(&a.units)?;
    let spec = SpanSpec::new(a.span_mean, a.span_std, a.coverage, seed)?;
    seqs.iter()
        .map(|s| {
            let lp = pseudo_logprob_repeated(&lm, s, &spec, a.repeats)?;
            Ok(record! { "utterance_id" => s.utterance_id.clone(), "logprob" => lp })
        })
        .collect()
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let value = if line.starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            v.get("logprob")
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| parse_err("missing numeric \"logprob\" field".into()))?
        } else {
            line.parse::<f64>().map_err(|e| parse_err(e.to_string()))?
        };
        if !value.is_finite() {
            return Err(parse_err("non-finite score".into()));
        }
        out.push(value);
    }
    Ok(out)
}

fn score_pairs(a: &ScorePairsArgs) -> Result<Vec<Record>> {
    let pos = read_scores(&a.pos)?;
    let neg = read_scores(&a.neg)?;
    let accuracy = paired_accuracy(&pos, &neg)?;
    Ok(vec![record! { "pairs" => pos.len(), "accuracy" => accuracy }])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("vgskit").chain(args.iter().copied());
        let code = run_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn number_formatting() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (1.0 / 3.0, "0.333333"),
            (-2.0 / 3.0, "-0.666667"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234567, "1.23457e-05"),
            (99.99999, "100"),
            (999999.5, "1e+06"),
            (f64::NAN, "nan"),
        ];
        for (x, want) in cases {
            assert_eq!(format_number(x), want, "{x}");
        }
    }

    #[test]
    fn render_formats() {
        let recs = vec![record! { "name" => "a b", "n" => 3usize, "x" => 0.25, "ok" => true }];
        assert_eq!(render(&recs, Format::Human), "name=a b n=3 x=0.25 ok=true\n");
        assert_eq!(render(&recs, Format::Json), "{\"name\":\"a b\",\"n\":3,\"x\":0.25,\"ok\":true}\n");
        let nan = vec![record! { "x" => f64::NAN }];
        assert_eq!(render(&nan, Format::Json), "{\"x\":null}\n");
    }

    #[test]
    fn help_and_unknown() {
        let (code, out, _) = run_capture(&["abx", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("--triplets"));
        assert_eq!(run_capture(&["bogus"]).0, 1);
        assert_eq!(run_capture(&["abx", "--bogus-flag"]).0, 1);
        assert_eq!(run_capture(&[]).0, 1);
    }

    #[test]
    fn io_errors_exit_2() {
        let (code, _, err) = run_capture(&["lm-train", "--units", "/nonexistent/u.jsonl", "--out", "/tmp/x"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn validation_errors_exit_1() {
        assert_eq!(run_capture(&["mask-stats", "--p", "2"]).0, 1);
        assert_eq!(run_capture(&["mask-stats", "--threads", "0"]).0, 1);
    }

    #[test]
    fn loss_check_passes() {
        let (code, out, _) = run_capture(&["--format", "json", "loss-check", "--instances", "10"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 3);
        assert!(out.lines().all(|l| l.contains("\"ok\":true")), "{out}");
    }

    #[test]
    fn mask_stats_reports_each_utterance() {
        let (code, out, _) = run_capture(&["mask-stats", "--lengths", "100,1000", "--mode", "batch-min-crop", "--trials", "5"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 2);
        assert!(out.starts_with("utterance=0 length=100 "));
    }

    #[test]
    fn score_pairs_reads_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let pos = dir.path().join("pos.txt");
        let neg = dir.path().join("neg.jsonl");
        fs::write(&pos, "-1.5\n-2\n\n-0.5\n").unwrap();
        fs::write(&neg, "{\"utterance_id\":\"a\",\"logprob\":-3}\n{\"logprob\":-2}\n{\"logprob\":0}\n").unwrap();
        let (code, out, _) = run_capture(&[
            "score-pairs",
            "--pos",
            pos.to_str().unwrap(),
            "--neg",
            neg.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert_eq!(out, "pairs=3 accuracy=0.5\n");
        fs::write(&neg, "oops\n").unwrap();
        let (code, _, err) = run_capture(&["score-pairs", "--pos", pos.to_str().unwrap(), "--neg", neg.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.contains("line 1"));
    }
}
