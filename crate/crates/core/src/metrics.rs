//! Caption metrics over token-id sequences.
//!
//! Accuracy: BLEU-n and CIDEr-D. Diversity: mutual overlap (mBleu-4),
//! div-n, novelty and uniqueness. Captions are word ids without `BOS`/`EOS`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;
pub const MAX_ORDER: usize = 4;

// ── N-grams ───────────────────────────────────────────────────────────────

/// Counts of the order-`n` n-grams of `tokens`.
pub fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], u32> {
    let mut counts = HashMap::new();
    if n == 0 {
        return counts;
    }
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Document frequencies of n-grams of orders `1..=MAX_ORDER` over a
/// reference corpus. One document is the reference set of one image.
#[derive(Debug, Clone, Default)]
pub struct NgramIndex {
    docs: usize,
    df: HashMap<Vec<u32>, u32>,
}

impl NgramIndex {
    pub fn build<'a, D, R>(documents: D) -> NgramIndex
    where
        D: IntoIterator<Item = R>,
        R: IntoIterator<Item = &'a [u32]>,
    {
        let mut index = NgramIndex::default();
        for doc in documents {
            index.docs += 1;
            let mut seen: HashSet<&[u32]> = HashSet::new();
            for caption in doc {
                for n in 1..=MAX_ORDER {
                    seen.extend(caption.windows(n));
                }
            }
            for g in seen {
                *index.df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        index
    }

    pub fn documents(&self) -> usize {
        self.docs
    }

    pub fn df(&self, ngram: &[u32]) -> u32 {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.docs == 0
    }

    fn idf(&self, ngram: &[u32]) -> f64 {
        (self.docs as f64).ln() - f64::from(self.df(ngram).max(1)).ln()
    }
}

// ── BLEU ──────────────────────────────────────────────────────────────────

fn closest_ref_len(c: usize, refs: &[&[u32]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Unsmoothed BLEU with uniform weights over orders `1..=n_max`, clipped
/// counts and a brevity penalty against the closest reference length.
pub fn bleu(candidate: &[u32], references: &[&[u32]], n_max: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || n_max == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let cand = ngram_counts(candidate, n);
        let total: u32 = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let matched: u32 = cand
            .iter()
            .map(|(g, &c)| {
                let clip = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(clip)
            })
            .sum();
        if matched == 0 {
            return 0.0;
        }
        log_sum += (f64::from(matched) / f64::from(total)).ln();
    }
    let c = candidate.len() as f64;
    let r = closest_ref_len(candidate.len(), references) as f64;
    let bp = (1.0 - r / c).min(0.0).exp();
    bp * (log_sum / n_max as f64).exp()
}

// ── CIDEr-D ───────────────────────────────────────────────────────────────

struct TfIdf<'a> {
    vecs: Vec<BTreeMap<&'a [u32], f64>>,
    norms: Vec<f64>,
    len: usize,
}

impl<'a> TfIdf<'a> {
    fn new(tokens: &'a [u32], index: &NgramIndex, n_max: usize) -> TfIdf<'a> {
        let mut vecs = Vec::with_capacity(n_max);
        let mut norms = Vec::with_capacity(n_max);
        for n in 1..=n_max {
            let v: BTreeMap<&[u32], f64> = ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, c)| (g, f64::from(c) * index.idf(g)))
                .collect();
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        TfIdf {
            vecs,
            norms,
            len: tokens.len(),
        }
    }
}

/// CIDEr-D scorer with the reference vectors prepared once.
pub struct CiderScorer<'a> {
    index: &'a NgramIndex,
    refs: Vec<TfIdf<'a>>,
    sigma: f64,
    n_max: usize,
}

impl<'a> CiderScorer<'a> {
    pub fn new(references: &[&'a [u32]], index: &'a NgramIndex, sigma: f64, n_max: usize) -> Result<CiderScorer<'a>> {
        if index.is_empty() {
            return Err(Error::Empty("document-frequency table".into()));
        }
        if n_max == 0 || !(sigma > 0.0) {
            return Err(Error::invalid("CIDEr-D needs n_max >= 1 and sigma > 0"));
        }
        let refs = references.iter().map(|r| TfIdf::new(r, index, n_max)).collect();
        Ok(CiderScorer {
            index,
            refs,
            sigma,
            n_max,
        })
    }

    pub fn score(&self, candidate: &[u32]) -> f64 {
        if self.refs.is_empty() {
            return 0.0;
        }
        let cand = TfIdf::new(candidate, self.index, self.n_max);
        let mut per_ref: Vec<f64> = self
            .refs
            .iter()
            .map(|r| {
                let delta = cand.len as f64 - r.len as f64;
                let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
                let mut total = 0.0;
                for n in 0..self.n_max {
                    if cand.norms[n] == 0.0 || r.norms[n] == 0.0 {
                        continue;
                    }
                    let dot: f64 = cand.vecs[n]
                        .iter()
                        .filter_map(|(g, &v)| r.vecs[n].get(*g).map(|&rv| v.min(rv) * rv))
                        .sum();
                    total += dot / (cand.norms[n] * r.norms[n]) * penalty;
                }
                total / self.n_max as f64
            })
            .collect();
        per_ref.sort_unstable_by(f64::total_cmp);
        CIDER_SCALE * per_ref.iter().sum::<f64>() / per_ref.len() as f64
    }
}

/// CIDEr-D of `candidate` against `references`.
pub fn cider_d(candidate: &[u32], references: &[&[u32]], index: &NgramIndex, sigma: f64, n_max: usize) -> Result<f64> {
    Ok(CiderScorer::new(references, index, sigma, n_max)?.score(candidate))
}

/// CIDEr-D with the standard parameters.
pub fn cider(candidate: &[u32], references: &[&[u32]], index: &NgramIndex) -> Result<f64> {
    cider_d(candidate, references, index, CIDER_SIGMA, MAX_ORDER)
}

// ── Diversity ─────────────────────────────────────────────────────────────

/// Mean BLEU-4 of each caption against the remaining ones.
pub fn mutual_overlap(captions: &[&[u32]]) -> Result<f64> {
    if captions.len() < 2 {
        return Err(Error::invalid("mutual overlap needs at least two captions"));
    }
    let mut scores: Vec<f64> = (0..captions.len())
        .map(|j| {
            let others: Vec<&[u32]> = captions
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, c)| *c)
                .collect();
            bleu(captions[j], &others, MAX_ORDER)
        })
        .collect();
    scores.sort_unstable_by(f64::total_cmp);
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Distinct order-`n` n-grams across the set over total words generated.
pub fn div_n(captions: &[&[u32]], n: usize) -> f64 {
    let words: usize = captions.iter().map(|c| c.len()).sum();
    if words == 0 || n == 0 {
        return 0.0;
    }
    let distinct: HashSet<&[u32]> = captions.iter().flat_map(|c| c.windows(n)).collect();
    distinct.len() as f64 / words as f64
}

/// Number of captions whose exact token sequence is absent from `train`.
pub fn novelty(captions: &[&[u32]], train: &HashSet<Vec<u32>>) -> usize {
    captions.iter().filter(|c| !train.contains(**c)).count()
}

/// Fraction of distinct token sequences.
pub fn uniqueness(captions: &[&[u32]]) -> f64 {
    if captions.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<&[u32]> = captions.iter().copied().collect();
    distinct.len() as f64 / captions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    pub k: usize,
    pub uniqueness: f64,
    pub novel: usize,
    /// `None` when fewer than two captions were generated.
    pub mbleu4: Option<f64>,
    pub div1: f64,
    pub div2: f64,
}

impl DiversityReport {
    pub fn compute(captions: &[&[u32]], train: &HashSet<Vec<u32>>) -> DiversityReport {
        DiversityReport {
            k: captions.len(),
            uniqueness: uniqueness(captions),
            novel: novelty(captions, train),
            mbleu4: mutual_overlap(captions).ok(),
            div1: div_n(captions, 1),
            div2: div_n(captions, 2),
        }
    }

    /// Per-image reports averaged, with novel counts summed.
    pub fn aggregate(reports: &[DiversityReport]) -> Option<DiversityReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&DiversityReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mbleu: Vec<f64> = reports.iter().filter_map(|r| r.mbleu4).collect();
        Some(DiversityReport {
            k: reports.iter().map(|r| r.k).max().unwrap_or(0),
            uniqueness: mean(&|r| r.uniqueness),
            novel: reports.iter().map(|r| r.novel).sum(),
            mbleu4: (!mbleu.is_empty()).then(|| mbleu.iter().sum::<f64>() / mbleu.len() as f64),
            div1: mean(&|r| r.div1),
            div2: mean(&|r| r.div2),
        })
    }
}

/// Training captions as a set of exact token sequences.
pub fn sentence_set<'a>(captions: impl IntoIterator<Item = &'a [u32]>) -> HashSet<Vec<u32>> {
    captions.into_iter().map(<[u32]>::to_vec).collect()
}
