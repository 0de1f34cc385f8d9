//! Ranking of sampled captions: oracle, consensus and likelihood.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{bleu, CiderScorer, NgramIndex, CIDER_SIGMA, MAX_ORDER};

/// Default number of retrieved neighbours for consensus re-ranking.
pub const DEFAULT_NEIGHBORS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    /// Caption words without `BOS`/`EOS`.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub medoid: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "String")]
pub enum Metric {
    Bleu(usize),
    Cider,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Bleu(1), Metric::Bleu(2), Metric::Bleu(3), Metric::Bleu(4), Metric::Cider];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Bleu(n) => write!(f, "bleu{n}"),
            Metric::Cider => f.write_str("cider"),
        }
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.to_string()
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?} (expected bleu1..bleu4 or cider)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMethod {
    Oracle,
    Consensus,
    Likelihood,
}

impl RankMethod {
    pub fn name(self) -> &'static str {
        match self {
            RankMethod::Oracle => "oracle",
            RankMethod::Consensus => "consensus",
            RankMethod::Likelihood => "likelihood",
        }
    }
}

impl fmt::Display for RankMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<RankMethod> {
        [RankMethod::Oracle, RankMethod::Consensus, RankMethod::Likelihood]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ranking mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub rank: usize,
    pub score: f64,
    pub candidate: Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedList {
    pub method: RankMethod,
    pub entries: Vec<Ranked>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The entry at 1-based `rank`.
    pub fn at(&self, rank: usize) -> Option<&Ranked> {
        rank.checked_sub(1).and_then(|i| self.entries.get(i))
    }
}

fn rank_order(a: &(f64, &Candidate), b: &(f64, &Candidate)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(b.1.logprob.total_cmp(&a.1.logprob))
        .then_with(|| a.1.tokens.cmp(&b.1.tokens))
        .then(a.1.medoid.cmp(&b.1.medoid))
}

fn rank_by(method: RankMethod, candidates: &[Candidate], score: impl Fn(&Candidate) -> f64) -> RankedList {
    let mut scored: Vec<(f64, &Candidate)> = candidates.iter().map(|c| (score(c), c)).collect();
    scored.sort_by(rank_order);
    RankedList {
        method,
        entries: scored
            .into_iter()
            .enumerate()
            .map(|(i, (score, c))| Ranked {
                rank: i + 1,
                score,
                candidate: c.clone(),
            })
            .collect(),
    }
}

/// A metric bound to one reference set.
pub struct MetricScorer<'a> {
    metric: Metric,
    refs: Vec<&'a [u32]>,
    cider: Option<CiderScorer<'a>>,
}

impl<'a> MetricScorer<'a> {
    pub fn new(metric: Metric, references: &[&'a [u32]], index: &'a NgramIndex) -> Result<MetricScorer<'a>> {
        if references.is_empty() {
            return Err(Error::Empty("reference set".into()));
        }
        let cider = match metric {
            Metric::Cider => Some(CiderScorer::new(references, index, CIDER_SIGMA, MAX_ORDER)?),
            Metric::Bleu(n) if !(1..=MAX_ORDER).contains(&n) => {
                return Err(Error::invalid(format!("BLEU order {n} out of range")))
            }
            Metric::Bleu(_) => None,
        };
        Ok(MetricScorer {
            metric,
            refs: references.to_vec(),
            cider,
        })
    }

    pub fn score(&self, tokens: &[u32]) -> f64 {
        match (&self.cider, self.metric) {
            (Some(c), _) => c.score(tokens),
            (None, Metric::Bleu(n)) => bleu(tokens, &self.refs, n),
            (None, Metric::Cider) => unreachable!(),
        }
    }
}

/// Sorts candidates by `metric` against the true references. Ties go to
/// the higher log-probability, then to the lexicographically smaller caption.
pub fn oracle_rerank(
    candidates: &[Candidate],
    references: &[&[u32]],
    metric: Metric,
    index: &NgramIndex,
) -> Result<RankedList> {
    let scorer = MetricScorer::new(metric, references, index)?;
    Ok(rank_by(RankMethod::Oracle, candidates, |c| scorer.score(&c.tokens)))
}

/// Sorts candidates by CIDEr-D against the pooled captions of retrieved
/// neighbours.
pub fn consensus_rerank(candidates: &[Candidate], pool: &[&[u32]], index: &NgramIndex) -> Result<RankedList> {
    if pool.is_empty() {
        return Err(Error::Empty("neighbour reference pool".into()));
    }
    let scorer = CiderScorer::new(pool, index, CIDER_SIGMA, MAX_ORDER)?;
    Ok(rank_by(RankMethod::Consensus, candidates, |c| scorer.score(&c.tokens)))
}

/// Sorts candidates by decoder log-probability.
pub fn likelihood_rerank(candidates: &[Candidate]) -> RankedList {
    rank_by(RankMethod::Likelihood, candidates, |c| c.logprob)
}

// ── Retrieval ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub image_id: String,
    pub similarity: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The `m` train images most cosine-similar to `query`, ties by image id.
pub fn retrieve_neighbors<'a>(
    query: &[f64],
    train: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    m: usize,
) -> Result<Vec<Neighbor>> {
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::invalid("query feature vector has zero norm"));
    }
    let mut all = Vec::new();
    for (id, v) in train {
        if v.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                found: v.len(),
            });
        }
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::invalid(format!("feature vector of {id} has zero norm")));
        }
        let dot: f64 = query.iter().zip(v).map(|(a, b)| a * b).sum();
        all.push(Neighbor {
            image_id: id.to_string(),
            similarity: dot / (qn * n),
        });
    }
    if m > all.len() {
        return Err(Error::invalid(format!("m = {m} exceeds the {} train images", all.len())));
    }
    let by_similarity = |a: &Neighbor, b: &Neighbor| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.image_id.cmp(&b.image_id))
    };
    if m > 0 && m < all.len() {
        all.select_nth_unstable_by(m - 1, by_similarity);
    }
    all.truncate(m);
    all.sort_by(by_similarity);
    Ok(all)
}
