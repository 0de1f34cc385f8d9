//! Subcommand arguments and implementations.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use poscap::corpus::{parse_corpus, Split, Vocabulary};
use poscap::decode::{ConditionMode, DecodeConfig, DecodeStats, Strategy};
use poscap::metrics::{bleu, cider, sentence_set, DiversityReport, NgramIndex};
use poscap::posclassify::{labelled_examples, train_classifier, ClassifierConfig};
use poscap::posquant::{tightness_report, KMedoids, DEFAULT_MAX_LEN};
use poscap::rerank::{
    consensus_rerank, likelihood_rerank, oracle_rerank, retrieve_neighbors, Candidate, Metric, RankMethod,
    DEFAULT_NEIGHBORS,
};
use poscap::seqmodel::{train_mle, ModelConfig};
use poscap::synth::{generate, parse_templates, SynthSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::benchmark::run_benchmark;
use crate::config::BenchConfig;
use crate::pipeline::{load_classifier, load_dataset, load_medoids, load_model, read, train_tag_sequences, Decoder};

/// Errors caused by how the command was invoked rather than by its data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "poscap", version, about = "POS-guided caption decoding, metrics and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tagged corpus and feature file.
    Synth(SynthArgs),
    /// Quantize train-split tag sequences into K medoids.
    Cluster(ClusterArgs),
    /// Train the tabular caption model.
    Train(TrainArgs),
    /// Train the medoid classifier on image features.
    TrainClassifier(TrainClassifierArgs),
    /// Decode captions for every image of a split.
    Decode(DecodeArgs),
    /// Re-rank decoded captions.
    Rerank(RerankArgs),
    /// Score decoded captions.
    Evaluate(EvaluateArgs),
    /// Run every configured strategy and write a report.
    Benchmark(BenchmarkArgs),
}

fn effective<T: Serialize>(name: &str, cfg: &T) {
    if let Ok(s) = serde_json::to_string(cfg) {
        eprintln!("{name}: effective config {s}");
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::TrainClassifier(a) => train_clf(a),
        Command::Decode(a) => decode(a),
        Command::Rerank(a) => rerank(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

// ── synth ─────────────────────────────────────────────────────────────────

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().images)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub caps_per_image: usize,
    #[arg(long, default_value_t = SynthSpec::default().words_per_tag)]
    pub words_per_tag: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// One tag template per line; the built-in inventory when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Writes `<prefix>.corpus.tsv` and `<prefix>.features.tsv`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

fn synth(a: SynthArgs) -> Result<()> {
    effective("synth", &a);
    let mut spec = SynthSpec {
        seed: a.seed,
        images: a.images,
        caps_per_image: a.caps_per_image,
        words_per_tag: a.words_per_tag,
        feature_dim: a.feature_dim,
        noise: a.noise,
        ..SynthSpec::default()
    };
    if let Some(p) = &a.templates {
        spec.templates = parse_templates(&read(p)?).with_context(|| p.display().to_string())?;
    }
    let out = generate(&spec).map_err(|e| usage(e.to_string()))?;
    let prefix = a.out_prefix.display().to_string();
    write(Path::new(&format!("{prefix}.corpus.tsv")), &out.corpus)?;
    write(Path::new(&format!("{prefix}.features.tsv")), &out.features)?;
    println!("wrote {prefix}.corpus.tsv and {prefix}.features.tsv");
    Ok(())
}

// ── cluster ───────────────────────────────────────────────────────────────

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of medoids K.
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Mean-distance threshold for the tightness report.
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn cluster(a: ClusterArgs) -> Result<()> {
    effective("cluster", &a);
    let (ds, _, _) = parse_corpus(&read(&a.corpus)?, a.min_count).with_context(|| a.corpus.display().to_string())?;
    let seqs = train_tag_sequences(&ds, a.max_len)?;
    let km = KMedoids {
        max_iters: a.max_iters,
        ..KMedoids::new(a.k, a.seed)
    };
    let clustering = km.fit(&seqs)?;
    write(&a.out, &clustering.medoids.to_tsv())?;
    let report = tightness_report(&clustering.medoids, &seqs, a.threshold)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        cost_history: &'a [u64],
        tightness: &'a poscap::posquant::TightnessReport,
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&Summary {
            cost_history: &clustering.cost_history,
            tightness: &report
        })?
    );
    Ok(())
}

// ── train ─────────────────────────────────────────────────────────────────

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Condition the model on these medoids; unconditioned when omitted.
    #[arg(long)]
    pub medoids: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 8)]
    pub buckets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    effective("train", &a);
    let (ds, vocab) = load_dataset(&a.corpus, &a.features, a.min_count)?;
    let medoids = a.medoids.as_deref().map(|p| load_medoids(p, a.max_len)).transpose()?;
    let cfg = ModelConfig {
        alpha: a.alpha,
        buckets: a.buckets,
        seed: a.seed,
    };
    let model = train_mle(&ds, &vocab, medoids.as_ref(), &cfg)?;
    write(&a.out, &model.to_json()?)?;
    println!("vocabulary {} words, model written to {}", vocab.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub medoids: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn train_clf(a: TrainClassifierArgs) -> Result<()> {
    effective("train-classifier", &a);
    let (ds, _) = load_dataset(&a.corpus, &a.features, a.min_count)?;
    let medoids = load_medoids(&a.medoids, a.max_len)?;
    let cfg = ClassifierConfig {
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        ..ClassifierConfig::default()
    };
    let (clf, trace) = train_classifier(&ds, &medoids, &cfg)?;
    let (xs, labels) = labelled_examples(&ds, &medoids)?;
    write(&a.out, &clf.to_json()?)?;
    println!(
        "final nll {:.6}, train accuracy {:.4}",
        trace.nll.last().copied().unwrap_or(f64::NAN),
        clf.accuracy(&xs, &labels)?
    );
    Ok(())
}

// ── decode ────────────────────────────────────────────────────────────────

/// One line of the decode TSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedRow {
    pub image_id: String,
    pub rank: usize,
    pub logprob: f64,
    pub medoid: Option<usize>,
    pub caption: String,
}

pub fn format_decode_tsv(rows: &[DecodedRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let medoid = r.medoid.map_or("-".to_string(), |m| m.to_string());
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.image_id, r.rank, r.logprob, medoid, r.caption).unwrap();
    }
    out
}

pub fn parse_decode_tsv(text: &str) -> Result<Vec<DecodedRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| anyhow!("decode TSV line {}: {what}", i + 1);
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            Ok(DecodedRow {
                image_id: f[0].to_string(),
                rank: f[1].parse().map_err(|_| bad("bad rank"))?,
                logprob: f[2].parse().map_err(|_| bad("bad log-probability"))?,
                medoid: match f[3] {
                    "-" => None,
                    m => Some(m.parse().map_err(|_| bad("bad medoid index"))?),
                },
                caption: f[4].to_string(),
            })
        })
        .collect()
}

/// Rows grouped by image, in first-appearance order.
fn group_rows(rows: Vec<DecodedRow>) -> Vec<(String, Vec<DecodedRow>)> {
    let mut order: Vec<(String, Vec<DecodedRow>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        let i = *index.entry(r.image_id.clone()).or_insert_with(|| {
            order.push((r.image_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(r);
    }
    order
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    /// greedy, beam, dbs or pos.
    #[arg(long)]
    pub strategy: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample condition medoids instead of taking the top-k (pos only).
    #[arg(long)]
    pub sample: bool,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub medoids: Option<PathBuf>,
    #[arg(long)]
    pub features: PathBuf,
    /// Restrict decoding to the images of `--split` in this corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Decode TSV; statistics go to `<out>.stats.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct DecodeSummary {
    strategy: Strategy,
    images: usize,
    stats: DecodeStats,
    secs_per_image: f64,
}

fn decode(a: DecodeArgs) -> Result<()> {
    effective("decode", &a);
    let strategy: Strategy = a.strategy.parse().map_err(|e: poscap::Error| usage(e.to_string()))?;
    if strategy == Strategy::Pos && (a.classifier.is_none() || a.medoids.is_none()) {
        return Err(usage("--strategy pos needs --classifier and --medoids"));
    }
    let model = load_model(&a.model)?;
    let features = poscap::corpus::load_features(&a.features)?;
    let classifier = a.classifier.as_deref().map(load_classifier).transpose()?;
    let medoids = a.medoids.as_deref().map(|p| load_medoids(p, a.max_len)).transpose()?;
    let ids: Vec<String> = match &a.corpus {
        Some(c) => {
            let split: Split = a.split.parse().map_err(|e: poscap::Error| usage(e.to_string()))?;
            let (ds, _, _) = parse_corpus(&read(c)?, 1)?;
            ds.image_ids(split).into_iter().map(str::to_string).collect()
        }
        None => features.iter().map(|(id, _)| id.to_string()).collect(),
    };
    let decoder = Decoder {
        model: &model,
        classifier: classifier.as_ref(),
        medoids: medoids.as_ref(),
        strategy,
        config: DecodeConfig {
            k: a.k,
            max_len: a.max_len,
            lambda: a.lambda,
            seed: a.seed,
            conditions: if a.sample { ConditionMode::Sample } else { ConditionMode::TopK },
        },
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers).build()?;
    let results: Vec<(Vec<Candidate>, DecodeStats)> = pool.install(|| {
        ids.par_iter()
            .enumerate()
            .map(|(i, id)| {
                let f = features.get(id).ok_or_else(|| anyhow!("no features for image {id}"))?;
                decoder.decode(f, i)
            })
            .collect::<Result<_>>()
    })?;
    let mut rows = Vec::new();
    let mut stats = DecodeStats::default();
    for (id, (cands, s)) in ids.iter().zip(&results) {
        stats.absorb(s);
        for (r, c) in cands.iter().enumerate() {
            rows.push(DecodedRow {
                image_id: id.clone(),
                rank: r + 1,
                logprob: c.logprob,
                medoid: c.medoid,
                caption: model.vocabulary().render(&c.tokens),
            });
        }
    }
    write(&a.out, &format_decode_tsv(&rows))?;
    let summary = DecodeSummary {
        strategy,
        images: ids.len(),
        stats,
        secs_per_image: stats.elapsed.as_secs_f64() / ids.len().max(1) as f64,
    };
    let stats_path = PathBuf::from(format!("{}.stats.json", a.out.display()));
    write(&stats_path, &serde_json::to_string_pretty(&summary)?)?;
    println!("decoded {} images with {strategy}", ids.len());
    Ok(())
}

// ── rerank / evaluate ─────────────────────────────────────────────────────

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    /// oracle, consensus or likelihood.
    #[arg(long)]
    pub mode: String,
    /// bleu1..bleu4 or cider (oracle mode).
    #[arg(long, default_value = "cider")]
    pub metric: String,
    /// Neighbours retrieved for consensus re-ranking.
    #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
    pub m: usize,
    /// Decode TSV to re-rank.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn candidates(rows: &[DecodedRow], vocab: &Vocabulary) -> Vec<Candidate> {
    rows.iter()
        .map(|r| Candidate {
            tokens: vocab.encode(&r.caption),
            logprob: r.logprob,
            medoid: r.medoid,
        })
        .collect()
}

fn rerank(a: RerankArgs) -> Result<()> {
    effective("rerank", &a);
    let mode: RankMethod = a.mode.parse().map_err(|e: poscap::Error| usage(e.to_string()))?;
    let metric: Metric = a.metric.parse().map_err(|e: poscap::Error| usage(e.to_string()))?;
    let split: Split = a.split.parse().map_err(|e: poscap::Error| usage(e.to_string()))?;
    if mode == RankMethod::Consensus && a.features.is_none() {
        return Err(usage("--mode consensus needs --features"));
    }
    let (ds, vocab) = match &a.features {
        Some(f) => load_dataset(&a.corpus, f, a.min_count)?,
        None => {
            let (ds, vocab, _) = parse_corpus(&read(&a.corpus)?, a.min_count)?;
            (ds, vocab)
        }
    };
    let refs = ds.references(split);
    let train_refs = ds.references(Split::Train);
    let eval_index = NgramIndex::build(refs.values().cloned());
    let train_index = NgramIndex::build(train_refs.values().cloned());
    let rows = parse_decode_tsv(&read(&a.input)?)?;
    let mut out = Vec::new();
    for (id, group) in group_rows(rows) {
        let cands = candidates(&group, &vocab);
        let ranked = match mode {
            RankMethod::Likelihood => likelihood_rerank(&cands),
            RankMethod::Oracle => {
                let r = refs.get(id.as_str()).ok_or_else(|| anyhow!("no {split} references for {id}"))?;
                oracle_rerank(&cands, r, metric, &eval_index)?
            }
            RankMethod::Consensus => {
                let feats = ds.features();
                let q = feats.get(&id).ok_or_else(|| anyhow!("no features for {id}"))?;
                let train: Vec<(&str, &[f64])> = train_refs
                    .keys()
                    .map(|tid| (*tid, feats.get(tid).expect("dataset images have features")))
                    .collect();
                let neighbors = retrieve_neighbors(q, train.iter().copied(), a.m.min(train.len()))?;
                let pool: Vec<&[u32]> =
                    neighbors.iter().flat_map(|n| train_refs[n.image_id.as_str()].iter().copied()).collect();
                consensus_rerank(&cands, &pool, &train_index)?
            }
        };
        // captions keep their original text; match them back by position
        let mut used = vec![false; group.len()];
        for e in ranked.entries {
            let j = (0..group.len())
                .find(|&j| !used[j] && cands[j] == e.candidate)
                .expect("re-ranking is a permutation");
            used[j] = true;
            out.push(DecodedRow {
                rank: e.rank,
                ..group[j].clone()
            });
        }
    }
    write(&a.out, &format_decode_tsv(&out))?;
    println!("re-ranked {} captions by {mode}", out.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Decode TSV; rank 1 is treated as the best caption.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Aggregated diversity report.
    #[arg(long)]
    pub out_json: PathBuf,
    /// Per-image metrics.
    #[arg(long)]
    pub out_tsv: PathBuf,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    effective("evaluate", &a);
    let split: Split = a.split.parse().map_err(|e: poscap::Error| usage(e.to_string()))?;
    let (ds, vocab, _) = parse_corpus(&read(&a.corpus)?, a.min_count)?;
    let refs = ds.references(split);
    let index = NgramIndex::build(refs.values().cloned());
    let train: HashSet<Vec<u32>> = sentence_set(ds.train().map(|c| c.tokens.as_slice()));
    let mut tsv = String::from("image_id\tcaptions\tbleu1\tbleu4\tcider\tmbleu4\tdiv1\tdiv2\tuniqueness\tnovel\n");
    let mut reports = Vec::new();
    for (id, mut group) in group_rows(parse_decode_tsv(&read(&a.input)?)?) {
        group.sort_by_key(|r| r.rank);
        let r = refs.get(id.as_str()).ok_or_else(|| anyhow!("no {split} references for {id}"))?;
        let cands = candidates(&group, &vocab);
        let caps: Vec<&[u32]> = cands.iter().map(|c| c.tokens.as_slice()).collect();
        let best = caps[0];
        let rep = DiversityReport::compute(&caps, &train);
        writeln!(
            tsv,
            "{id}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            caps.len(),
            bleu(best, r, 1),
            bleu(best, r, 4),
            cider(best, r, &index)?,
            rep.mbleu4.map_or("-".into(), |m| format!("{m:.6}")),
            rep.div1,
            rep.div2,
            rep.uniqueness,
            rep.novel
        )
        .unwrap();
        reports.push(rep);
    }
    let Some(agg) = DiversityReport::aggregate(&reports) else {
        bail!("decode TSV is empty");
    };
    write(&a.out_json, &serde_json::to_string_pretty(&agg)?)?;
    write(&a.out_tsv, &tsv)?;
    println!("{}", serde_json::to_string(&agg)?);
    Ok(())
}

// ── benchmark ─────────────────────────────────────────────────────────────

#[derive(Debug, Args, Serialize)]
pub struct BenchmarkArgs {
    /// Flat TOML config; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub out_tsv: Option<PathBuf>,
    /// Leave wall-clock fields out of the report.
    #[arg(long)]
    pub no_timings: bool,
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => BenchConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => BenchConfig::default(),
    };
    effective("benchmark", &cfg);
    let mut report = run_benchmark(&cfg)?;
    if a.no_timings {
        report = report.without_timings();
    }
    write(&a.out_json, &report.to_json()?)?;
    if let Some(p) = &a.out_tsv {
        write(p, &report.to_tsv())?;
    }
    print!("{}", report.to_tsv());
    Ok(())
}

/// Exit code for an error returned by [`run`]: 1 for usage, 2 for data.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        1
    } else {
        2
    }
}
