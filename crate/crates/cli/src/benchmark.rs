//! Runs every configured strategy at every k over one split and collects
//! speed, operation counts, diversity and best-kᵗʰ accuracy.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Duration;

use anyhow::{ensure, Context, Result};
use poscap::corpus::Split;
use poscap::decode::{ConditionMode, DecodeConfig, DecodeStats, Strategy};
use poscap::metrics::{sentence_set, DiversityReport, NgramIndex};
use poscap::rerank::{
    consensus_rerank, likelihood_rerank, oracle_rerank, retrieve_neighbors, Candidate, Metric, MetricScorer,
    RankMethod, RankedList,
};
use serde::Serialize;

use crate::config::BenchConfig;
use crate::pipeline::{split_images, Artifacts, Decoder};

pub const RANK_METHODS: [RankMethod; 3] = [RankMethod::Oracle, RankMethod::Consensus, RankMethod::Likelihood];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub total_secs: f64,
    pub secs_per_image: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub topk_selections: u64,
    pub merges: u64,
    pub argmaxes: u64,
    pub model_evals: u64,
}

impl From<&DecodeStats> for OpCounts {
    fn from(s: &DecodeStats) -> Self {
        OpCounts {
            topk_selections: s.topk_selections,
            merges: s.merges,
            argmaxes: s.argmaxes,
            model_evals: s.model_evals,
        }
    }
}

/// Mean score of the caption at each rank, ranks `1..=k`; images with
/// fewer than `r` captions contribute 0 at rank `r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingCurve {
    pub method: RankMethod,
    pub metric: Metric,
    pub best_kth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Example {
    pub image_id: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    pub ops: OpCounts,
    pub diversity: DiversityReport,
    /// Fraction of images whose captions have mBleu-4 exactly 0.
    pub zero_overlap_fraction: Option<f64>,
    pub curves: Vec<RankingCurve>,
    pub examples: Vec<Example>,
}

impl BenchRow {
    pub fn curve(&self, method: RankMethod, metric: Metric) -> Option<&RankingCurve> {
        self.curves.iter().find(|c| c.method == method && c.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub config: BenchConfig,
    pub images: usize,
    pub vocabulary_size: usize,
    pub medoids: usize,
    pub classifier_train_accuracy: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchmarkReport {
    pub fn row(&self, strategy: Strategy, k: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.k == k)
    }

    /// The report with every wall-clock field removed.
    pub fn without_timings(&self) -> BenchmarkReport {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.timing = None);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "strategy\tk\tsecs_per_image\ttopk_selections\tmerges\targmaxes\tmodel_evals\tuniqueness\tnovel\tmbleu4\tdiv1\tdiv2\tzero_overlap",
        );
        let first = self.rows.first();
        let curve_cols: Vec<(RankMethod, Metric)> =
            first.map(|r| r.curves.iter().map(|c| (c.method, c.metric)).collect()).unwrap_or_default();
        for (m, metric) in &curve_cols {
            write!(out, "\t{m}_{metric}_best1\t{m}_{metric}_bestk").unwrap();
        }
        out.push('\n');
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let d = &r.diversity;
            write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                r.strategy,
                r.k,
                opt(r.timing.as_ref().map(|t| t.secs_per_image)),
                r.ops.topk_selections,
                r.ops.merges,
                r.ops.argmaxes,
                r.ops.model_evals,
                d.uniqueness,
                d.novel,
                opt(d.mbleu4),
                d.div1,
                d.div2,
                opt(r.zero_overlap_fraction),
            )
            .unwrap();
            for (m, metric) in &curve_cols {
                let c = r.curve(*m, *metric);
                let best1 = c.and_then(|c| c.best_kth.first().copied());
                let bestk = c.and_then(|c| c.best_kth.last().copied());
                write!(out, "\t{}\t{}", opt(best1), opt(bestk)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

struct ImageContext<'a> {
    id: &'a str,
    features: &'a [f64],
    refs: Vec<&'a [u32]>,
    pool: Vec<&'a [u32]>,
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let art = Artifacts::build(cfg)?;
    run_with_artifacts(cfg, &art)
}

pub fn run_with_artifacts(cfg: &BenchConfig, art: &Artifacts) -> Result<BenchmarkReport> {
    let strategies = cfg.strategy_list()?;
    let metrics = cfg.metric_list()?;
    let split: Split = cfg.split.parse()?;
    let ids = split_images(&art.dataset, split, cfg.max_images);
    ensure!(!ids.is_empty(), "the {split} split has no images");

    let features = art.dataset.features();
    let refs = art.dataset.references(split);
    let train_refs = art.dataset.references(Split::Train);
    let eval_index = NgramIndex::build(refs.values().cloned());
    let train_index = NgramIndex::build(train_refs.values().cloned());
    let train_set: HashSet<Vec<u32>> = sentence_set(art.dataset.train().map(|c| c.tokens.as_slice()));
    let train_feats: Vec<(&str, &[f64])> = train_refs
        .keys()
        .map(|id| (*id, features.get(id).expect("dataset images have features")))
        .collect();

    let images: Vec<ImageContext<'_>> = ids
        .iter()
        .map(|id| {
            let f = features.get(id).context("image without features")?;
            let m = cfg.neighbors.min(train_feats.len());
            let neighbors = retrieve_neighbors(f, train_feats.iter().copied(), m)?;
            let pool = neighbors.iter().flat_map(|n| train_refs[n.image_id.as_str()].iter().copied()).collect();
            Ok(ImageContext {
                id,
                features: f,
                refs: refs[id.as_str()].clone(),
                pool,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &k in &cfg.ks {
        for &strategy in &strategies {
            rows.push(bench_row(cfg, art, strategy, k, &metrics, &images, &eval_index, &train_index, &train_set)?);
        }
    }
    Ok(BenchmarkReport {
        config: cfg.clone(),
        images: images.len(),
        vocabulary_size: art.vocabulary.len(),
        medoids: art.medoids.k(),
        classifier_train_accuracy: art.classifier_train_accuracy,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn bench_row(
    cfg: &BenchConfig,
    art: &Artifacts,
    strategy: Strategy,
    k: usize,
    metrics: &[Metric],
    images: &[ImageContext<'_>],
    eval_index: &NgramIndex,
    train_index: &NgramIndex,
    train_set: &HashSet<Vec<u32>>,
) -> Result<BenchRow> {
    let decoder = Decoder {
        model: &art.model,
        classifier: Some(&art.classifier),
        medoids: Some(&art.medoids),
        strategy,
        config: DecodeConfig {
            k,
            max_len: cfg.max_len,
            lambda: cfg.lambda,
            seed: cfg.seed,
            conditions: if cfg.sample_conditions { ConditionMode::Sample } else { ConditionMode::TopK },
        },
    };
    let mut stats = DecodeStats::default();
    let mut decoded = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let (cands, s) = decoder
            .decode(img.features, i)
            .with_context(|| format!("{strategy} k={k} on {}", img.id))?;
        stats.absorb(&s);
        decoded.push(cands);
    }

    let mut per_image = Vec::with_capacity(images.len());
    let mut sums: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (img, cands) in images.iter().zip(&decoded) {
        let caps: Vec<&[u32]> = cands.iter().map(|c| c.tokens.as_slice()).collect();
        per_image.push(DiversityReport::compute(&caps, train_set));
        let consensus = consensus_rerank(cands, &img.pool, train_index)?;
        let likelihood = likelihood_rerank(cands);
        for (mi, &metric) in metrics.iter().enumerate() {
            let scorer = MetricScorer::new(metric, &img.refs, eval_index)?;
            for (ri, method) in RANK_METHODS.iter().enumerate() {
                let ranked: RankedList = match method {
                    RankMethod::Oracle => oracle_rerank(cands, &img.refs, metric, eval_index)?,
                    RankMethod::Consensus => consensus.clone(),
                    RankMethod::Likelihood => likelihood.clone(),
                };
                let acc = sums.entry((ri, mi)).or_insert_with(|| vec![0.0; k]);
                for (slot, e) in acc.iter_mut().zip(&ranked.entries) {
                    *slot += match method {
                        RankMethod::Oracle => e.score,
                        _ => scorer.score(&e.candidate.tokens),
                    };
                }
            }
        }
    }
    let n = images.len() as f64;
    let curves = sums
        .into_iter()
        .map(|((ri, mi), acc)| RankingCurve {
            method: RANK_METHODS[ri],
            metric: metrics[mi],
            best_kth: acc.into_iter().map(|s| s / n).collect(),
        })
        .collect();
    let with_overlap: Vec<f64> = per_image.iter().filter_map(|r| r.mbleu4).collect();
    let zero_overlap_fraction = (!with_overlap.is_empty())
        .then(|| with_overlap.iter().filter(|&&m| m == 0.0).count() as f64 / with_overlap.len() as f64);
    let examples = images
        .iter()
        .zip(&decoded)
        .take(3)
        .map(|(img, cands)| Example {
            image_id: img.id.to_string(),
            captions: likelihood_order(cands).map(|c| art.vocabulary.render(&c.tokens)).collect(),
        })
        .collect();
    let total = stats.elapsed;
    Ok(BenchRow {
        strategy,
        k,
        timing: Some(timing(total, images.len())),
        ops: OpCounts::from(&stats),
        diversity: DiversityReport::aggregate(&per_image).expect("at least one image"),
        zero_overlap_fraction,
        curves,
        examples,
    })
}

fn likelihood_order(cands: &[Candidate]) -> impl Iterator<Item = Candidate> {
    likelihood_rerank(cands).entries.into_iter().map(|e| e.candidate)
}

fn timing(total: Duration, images: usize) -> Timing {
    Timing {
        total_secs: total.as_secs_f64(),
        secs_per_image: total.as_secs_f64() / images.max(1) as f64,
    }
}
