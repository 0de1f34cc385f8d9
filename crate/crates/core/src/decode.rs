//! Decoding strategies over a [`ConditionalModel`].
//!
//! Beam search is built from two instrumented steps: `expand_topk` takes
//! the sorted top-k extensions of every live beam, and `merge` combines
//! those sorted lists into the global top-k. Hypotheses are ranked by raw
//! cumulative log-probability. A finished hypothesis keeps competing in the
//! merge with its frozen score.
//!
//! POS-guided decoding runs one greedy decode per quantized tag sequence,
//! so it records only argmax operations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::posclassify::PosClassifier;
use crate::posquant::MedoidSet;
use crate::seqmodel::{ConditionalModel, ContextRoot, ModelContext, TabularCaptionModel};

/// Models that can report the medoid set they are conditioned on.
pub trait PosConditioned: ConditionalModel {
    fn medoids(&self) -> Option<&MedoidSet>;
}

impl PosConditioned for TabularCaptionModel {
    fn medoids(&self) -> Option<&MedoidSet> {
        TabularCaptionModel::medoids(self)
    }
}

// ── Types ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Emitted tokens after `BOS`; ends with `EOS` when finished.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn root() -> Hypothesis {
        Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        }
    }

    /// Caption words, without the trailing `EOS`.
    pub fn words(&self) -> &[u32] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    fn prefix(&self) -> Vec<u32> {
        let mut p = Vec::with_capacity(self.tokens.len() + 2);
        p.push(BOS);
        p.extend_from_slice(&self.tokens);
        p
    }

    fn extend(&self, token: u32, logprob: f64) -> Hypothesis {
        debug_assert!(!self.finished);
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        Hypothesis {
            tokens,
            logprob,
            finished: token == EOS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// The k highest-posterior medoids.
    #[default]
    TopK,
    /// k medoids sampled without replacement, seeded by `DecodeConfig::seed`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeConfig {
    pub k: usize,
    pub max_len: usize,
    /// Diversity penalty weight (diverse beam search only).
    pub lambda: f64,
    pub seed: u64,
    pub conditions: ConditionMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 5,
            max_len: 20,
            lambda: 0.5,
            seed: 0,
            conditions: ConditionMode::TopK,
        }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        Ok(())
    }
}

fn serialize_secs<S: Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

/// Operation counts and wall-clock time for one or more decodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecodeStats {
    pub topk_selections: u64,
    pub merges: u64,
    pub argmaxes: u64,
    pub model_evals: u64,
    #[serde(rename = "elapsed_secs", serialize_with = "serialize_secs")]
    pub elapsed: Duration,
}

impl DecodeStats {
    pub fn absorb(&mut self, other: &DecodeStats) {
        self.topk_selections += other.topk_selections;
        self.merges += other.merges;
        self.argmaxes += other.argmaxes;
        self.model_evals += other.model_evals;
        self.elapsed += other.elapsed;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
    Dbs,
    Pos,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Greedy, Strategy::Beam, Strategy::Dbs, Strategy::Pos];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Dbs => "dbs",
            Strategy::Pos => "pos",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

/// Index of the largest finite entry, ties by lower index.
fn argmax(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if s == f64::NEG_INFINITY || s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0)
}

// ── Greedy ────────────────────────────────────────────────────────────────

fn greedy_inner<M: ConditionalModel + ?Sized>(
    model: &M,
    root: ContextRoot<'_>,
    max_len: usize,
    stats: &mut DecodeStats,
) -> Hypothesis {
    let mut hyp = Hypothesis::root();
    let mut prefix = vec![BOS];
    while !hyp.finished && hyp.tokens.len() < max_len {
        let lp = model.next_logprobs(&ModelContext::new(root, &prefix));
        stats.model_evals += 1;
        stats.argmaxes += 1;
        let Some(t) = argmax(lp.iter().copied()) else {
            break;
        };
        hyp = hyp.extend(t as u32, hyp.logprob + lp[t]);
        prefix.push(t as u32);
    }
    hyp
}

/// One argmax per step until `EOS` or `max_len` tokens.
pub fn greedy_decode<M: ConditionalModel + ?Sized>(
    model: &M,
    root: ContextRoot<'_>,
    config: &DecodeConfig,
) -> Result<(Hypothesis, DecodeStats)> {
    config.validate()?;
    let start = Instant::now();
    let mut stats = DecodeStats::default();
    let hyp = greedy_inner(model, root, config.max_len, &mut stats);
    stats.elapsed = start.elapsed();
    Ok((hyp, stats))
}

// ── Beam search ───────────────────────────────────────────────────────────

/// One extension of one beam; `token == None` carries a finished beam over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub beam: usize,
    pub token: Option<u32>,
    pub score: f64,
}

fn by_score_then_token(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// For every live beam, the `k` best `(score, token)` extensions sorted
/// descending (ties by lower token id). Finished beams pass through as
/// singletons.
pub fn expand_topk<M: ConditionalModel + ?Sized>(
    beams: &[Hypothesis],
    model: &M,
    root: ContextRoot<'_>,
    k: usize,
    stats: &mut DecodeStats,
) -> Vec<Vec<Candidate>> {
    beams
        .iter()
        .enumerate()
        .map(|(b, hyp)| {
            if hyp.finished {
                return vec![Candidate {
                    beam: b,
                    token: None,
                    score: hyp.logprob,
                }];
            }
            let prefix = hyp.prefix();
            let lp = model.next_logprobs(&ModelContext::new(root, &prefix));
            stats.model_evals += 1;
            stats.topk_selections += 1;
            let mut scored: Vec<(f64, u32)> = lp
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != f64::NEG_INFINITY && !x.is_nan())
                .map(|(t, &x)| (hyp.logprob + x, t as u32))
                .collect();
            if scored.len() > k {
                scored.select_nth_unstable_by(k - 1, by_score_then_token);
                scored.truncate(k);
            }
            scored.sort_unstable_by(by_score_then_token);
            scored
                .into_iter()
                .map(|(score, t)| Candidate {
                    beam: b,
                    token: Some(t),
                    score,
                })
                .collect()
        })
        .collect()
}

struct Head {
    score: f64,
    beam: usize,
    list: usize,
    pos: usize,
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Head {}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Head {
    // max-heap: higher score first, then lower beam, then earlier position
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.beam.cmp(&self.beam))
            .then(other.list.cmp(&self.list))
            .then(other.pos.cmp(&self.pos))
    }
}

/// Global top-`k` of descending-sorted candidate lists, output descending.
/// Equal scores keep `(beam index, list order)`.
pub fn merge(lists: &[Vec<Candidate>], k: usize, stats: &mut DecodeStats) -> Result<Vec<Candidate>> {
    for (i, list) in lists.iter().enumerate() {
        let sorted = list.windows(2).all(|w| w[0].score >= w[1].score);
        if !sorted || list.iter().any(|c| c.score.is_nan()) {
            return Err(Error::Unsorted(i));
        }
    }
    stats.merges += 1;
    let mut heap: BinaryHeap<Head> = lists
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.first().map(|c| Head {
                score: c.score,
                beam: c.beam,
                list: i,
                pos: 0,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let Some(h) = heap.pop() else { break };
        out.push(lists[h.list][h.pos]);
        if let Some(next) = lists[h.list].get(h.pos + 1) {
            heap.push(Head {
                score: next.score,
                beam: next.beam,
                list: h.list,
                pos: h.pos + 1,
            });
        }
    }
    Ok(out)
}

/// Width-`k` beam search; returns up to `k` distinct hypotheses sorted by
/// descending log-probability.
pub fn beam_search<M: ConditionalModel + ?Sized>(
    model: &M,
    root: ContextRoot<'_>,
    config: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, DecodeStats)> {
    config.validate()?;
    let start = Instant::now();
    let mut stats = DecodeStats::default();
    let mut beams = vec![Hypothesis::root()];
    for _ in 0..config.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let lists = expand_topk(&beams, model, root, config.k, &mut stats);
        let chosen = merge(&lists, config.k, &mut stats)?;
        beams = chosen
            .iter()
            .map(|c| match c.token {
                None => beams[c.beam].clone(),
                Some(t) => beams[c.beam].extend(t, c.score),
            })
            .collect();
    }
    stats.elapsed = start.elapsed();
    Ok((beams, stats))
}

// ── Diverse beam search ───────────────────────────────────────────────────

/// `k` groups of width one, expanded in order at every step. A group scores
/// a token by its log-probability minus `lambda` times the number of earlier
/// groups that chose the same token at this step.
pub fn diverse_beam_search<M: ConditionalModel + ?Sized>(
    model: &M,
    root: ContextRoot<'_>,
    config: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, DecodeStats)> {
    config.validate()?;
    let start = Instant::now();
    let mut stats = DecodeStats::default();
    let mut groups = vec![Hypothesis::root(); config.k];
    let mut used = vec![0u32; model.vocab_size()];
    for _ in 0..config.max_len {
        if groups.iter().all(|g| g.finished) {
            break;
        }
        used.fill(0);
        for g in groups.iter_mut().filter(|g| !g.finished) {
            let prefix = g.prefix();
            let lp = model.next_logprobs(&ModelContext::new(root, &prefix));
            stats.model_evals += 1;
            stats.argmaxes += 1;
            let penalized = lp
                .iter()
                .zip(&used)
                .map(|(&x, &n)| if n == 0 { x } else { x - config.lambda * n as f64 });
            let Some(t) = argmax(penalized) else {
                continue;
            };
            used[t] += 1;
            *g = g.extend(t as u32, g.logprob + lp[t]);
        }
    }
    stats.elapsed = start.elapsed();
    Ok((groups, stats))
}

// ── POS-guided ────────────────────────────────────────────────────────────

/// Picks `k` medoids from the classifier posterior, then decodes greedily
/// under each. Output order follows the chosen medoids.
pub fn pos_guided_decode<M: PosConditioned + ?Sized>(
    model: &M,
    classifier: &PosClassifier,
    medoids: &MedoidSet,
    features: &[f64],
    config: &DecodeConfig,
) -> Result<(Vec<(Hypothesis, usize)>, DecodeStats)> {
    config.validate()?;
    let fp = medoids.fingerprint();
    if classifier.k() != medoids.k() || classifier.medoid_fingerprint() != fp {
        return Err(Error::Mismatch("classifier was trained against a different medoid set".into()));
    }
    match model.medoids() {
        Some(m) if m.fingerprint() == fp => {}
        Some(_) => return Err(Error::Mismatch("model is conditioned on a different medoid set".into())),
        None => return Err(Error::Mismatch("model is not POS-conditioned".into())),
    }
    if config.k > medoids.k() {
        return Err(Error::invalid(format!("k = {} exceeds the {} medoids", config.k, medoids.k())));
    }
    let start = Instant::now();
    let conditions = match config.conditions {
        ConditionMode::TopK => classifier.topk_conditions(features, config.k)?,
        ConditionMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            classifier.sample_conditions(features, config.k, &mut rng)?
        }
    };
    let mut stats = DecodeStats::default();
    let out = conditions
        .into_iter()
        .map(|c| {
            let root = ContextRoot::new(features).with_condition(c);
            (greedy_inner(model, root, config.max_len, &mut stats), c)
        })
        .collect();
    stats.elapsed = start.elapsed();
    Ok((out, stats))
}
