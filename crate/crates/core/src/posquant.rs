//! Quantization of part-of-speech tag sequences with hamming k-medoids.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{parse_tags, Tag};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 20;
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Largest number of medoid subsets the exhaustive pass will enumerate.
pub const DEFAULT_EXHAUSTIVE_LIMIT: u64 = 4096;

/// A tag sequence padded with `PAD` (or truncated) to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TagSequence(Vec<Tag>);

impl TagSequence {
    pub fn new(tags: &[Tag], max_len: usize) -> Result<TagSequence> {
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let body = &tags[..tags.len().min(max_len)];
        if let Some(pos) = body.iter().position(|&t| t == Tag::Pad) {
            if body[pos..].iter().any(|&t| t != Tag::Pad) {
                return Err(Error::invalid("PAD before a non-PAD tag"));
            }
        }
        let mut v = body.to_vec();
        v.resize(max_len, Tag::Pad);
        Ok(TagSequence(v))
    }

    pub fn max_len(&self) -> usize {
        self.0.len()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.0
    }

    /// Number of leading non-`PAD` tags.
    pub fn content_len(&self) -> usize {
        self.0.iter().take_while(|&&t| t != Tag::Pad).count()
    }

    /// Tag at 1-based caption position, or `None` past the content.
    pub fn tag_at(&self, position: usize) -> Option<Tag> {
        match position.checked_sub(1).and_then(|i| self.0.get(i)) {
            Some(&Tag::Pad) | None => None,
            Some(&t) => Some(t),
        }
    }

    /// Concatenated one-hot encoding over the 13 tag ids.
    pub fn one_hot(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.0.len() * Tag::ALL.len()];
        for (i, t) in self.0.iter().enumerate() {
            v[i * Tag::ALL.len() + t.id() as usize] = 1;
        }
        v
    }
}

impl fmt::Display for TagSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0[..self.content_len()].iter().map(|t| t.name()).collect();
        f.write_str(&names.join(" "))
    }
}

fn distance_unchecked(a: &[Tag], b: &[Tag]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Number of positions at which the two sequences differ.
pub fn hamming_distance(a: &TagSequence, b: &TagSequence) -> Result<usize> {
    if a.max_len() != b.max_len() {
        return Err(Error::DimensionMismatch {
            expected: a.max_len(),
            found: b.max_len(),
        });
    }
    Ok(distance_unchecked(&a.0, &b.0))
}

// ── Medoid sets ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedoidSet {
    medoids: Vec<TagSequence>,
    max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub index: usize,
    pub distance: usize,
}

impl MedoidSet {
    pub fn new(medoids: Vec<TagSequence>) -> Result<MedoidSet> {
        let max_len = medoids
            .first()
            .map(TagSequence::max_len)
            .ok_or_else(|| Error::Empty("medoid set".into()))?;
        if medoids.iter().any(|m| m.max_len() != max_len) {
            return Err(Error::invalid("medoids differ in max_len"));
        }
        let mut seen = std::collections::HashSet::new();
        if !medoids.iter().all(|m| seen.insert(m)) {
            return Err(Error::invalid("duplicate medoid"));
        }
        Ok(MedoidSet { medoids, max_len })
    }

    pub fn k(&self) -> usize {
        self.medoids.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn medoids(&self) -> &[TagSequence] {
        &self.medoids
    }

    pub fn get(&self, index: usize) -> Option<&TagSequence> {
        self.medoids.get(index)
    }

    /// Nearest medoid by hamming distance, ties to the lowest index.
    pub fn quantize(&self, t: &TagSequence) -> Result<Quantized> {
        if t.max_len() != self.max_len {
            return Err(Error::DimensionMismatch {
                expected: self.max_len,
                found: t.max_len(),
            });
        }
        Ok(nearest(&self.medoids, t))
    }

    /// Pads or truncates raw corpus tags, then quantizes.
    pub fn quantize_tags(&self, tags: &[Tag]) -> Result<Quantized> {
        self.quantize(&TagSequence::new(tags, self.max_len)?)
    }

    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        for (i, m) in self.medoids.iter().enumerate() {
            writeln!(out, "{i}\t{m}")?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("tag names are ascii")
    }

    /// Parses `<index>\t<TAG> <TAG> ...` lines; indices must run 0..K.
    pub fn parse_tsv(text: &str, max_len: usize) -> Result<MedoidSet> {
        let mut medoids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (idx, tags) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected <index>\\t<tags>"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad index {idx:?}")))?;
            if idx != medoids.len() {
                return Err(Error::parse(lineno, format!("expected index {}", medoids.len())));
            }
            let tags = parse_tags(tags).map_err(|e| Error::parse(lineno, e.to_string()))?;
            if tags.is_empty() {
                return Err(Error::parse(lineno, "empty medoid"));
            }
            medoids.push(TagSequence::new(&tags, max_len)?);
        }
        MedoidSet::new(medoids)
    }

    /// Hex SHA-256 of the TSV form plus `max_len`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.max_len.to_le_bytes());
        h.update(self.to_tsv().as_bytes());
        hex::encode(h.finalize())
    }
}

fn nearest(medoids: &[TagSequence], t: &TagSequence) -> Quantized {
    let mut best = Quantized {
        index: 0,
        distance: usize::MAX,
    };
    for (i, m) in medoids.iter().enumerate() {
        let d = distance_unchecked(&m.0, &t.0);
        if d < best.distance {
            best = Quantized { index: i, distance: d };
        }
    }
    best
}

// ── k-medoids ─────────────────────────────────────────────────────────────

/// Alternating k-medoids over hamming distance with farthest-point seeding.
///
/// When the distinct sequences admit at most `exhaustive_limit` medoid
/// subsets, every subset is scored after alternation converges and a
/// strictly cheaper one replaces the alternation result.
#[derive(Debug, Clone, Copy)]
pub struct KMedoids {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub exhaustive_limit: u64,
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub medoids: MedoidSet,
    /// Cluster index for every input sequence.
    pub assignment: Vec<usize>,
    /// Total assignment cost after seeding and after each iteration.
    pub cost_history: Vec<u64>,
}

impl Clustering {
    pub fn cost(&self) -> u64 {
        *self.cost_history.last().expect("history is never empty")
    }
}

impl KMedoids {
    pub fn new(k: usize, seed: u64) -> KMedoids {
        KMedoids {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            exhaustive_limit: DEFAULT_EXHAUSTIVE_LIMIT,
        }
    }

    pub fn fit(&self, sequences: &[TagSequence]) -> Result<Clustering> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let max_len = sequences
            .first()
            .map(TagSequence::max_len)
            .ok_or_else(|| Error::Empty("sequence list".into()))?;
        if let Some(s) = sequences.iter().find(|s| s.max_len() != max_len) {
            return Err(Error::DimensionMismatch {
                expected: max_len,
                found: s.max_len(),
            });
        }

        // Work on distinct sequences weighted by multiplicity.
        let mut slot: HashMap<&TagSequence, usize> = HashMap::new();
        let mut distinct: Vec<&TagSequence> = Vec::new();
        let mut weight: Vec<u64> = Vec::new();
        let mut member_of: Vec<usize> = Vec::with_capacity(sequences.len());
        for s in sequences {
            let id = *slot.entry(s).or_insert_with(|| {
                distinct.push(s);
                weight.push(0);
                distinct.len() - 1
            });
            weight[id] += 1;
            member_of.push(id);
        }
        let n = distinct.len();
        if self.k > n {
            return Err(Error::invalid(format!(
                "k = {} exceeds the {n} distinct sequences",
                self.k
            )));
        }
        let dist = |a: usize, b: usize| distance_unchecked(&distinct[a].0, &distinct[b].0) as u64;

        // Farthest-point seeding from a random start.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut medoids = vec![rng.random_range(0..n)];
        let mut gap: Vec<u64> = (0..n).map(|i| dist(i, medoids[0])).collect();
        while medoids.len() < self.k {
            let (far, _) = gap
                .iter()
                .enumerate()
                .fold((0, 0), |best, (i, &g)| if g > best.1 { (i, g) } else { best });
            medoids.push(far);
            for (i, g) in gap.iter_mut().enumerate() {
                *g = (*g).min(dist(i, far));
            }
        }

        let assign = |medoids: &[usize]| -> (Vec<usize>, u64) {
            let mut labels = vec![0; n];
            let mut cost = 0;
            for (i, label) in labels.iter_mut().enumerate() {
                let (best, d) = medoids
                    .iter()
                    .enumerate()
                    .map(|(c, &m)| (c, dist(i, m)))
                    .fold((0, u64::MAX), |b, x| if x.1 < b.1 { x } else { b });
                *label = best;
                cost += weight[i] * d;
            }
            (labels, cost)
        };

        let (mut labels, cost) = assign(&medoids);
        let mut cost_history = vec![cost];
        for _ in 0..self.max_iters {
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.k];
            for (i, &c) in labels.iter().enumerate() {
                members[c].push(i);
            }
            for (c, group) in members.iter().enumerate() {
                let within = |cand: usize| -> u64 {
                    group.iter().map(|&j| weight[j] * dist(cand, j)).sum()
                };
                // The current medoid keeps its place on ties.
                let mut best = medoids[c];
                let mut best_cost = within(best);
                for &cand in group {
                    let cc = within(cand);
                    if cc < best_cost {
                        best = cand;
                        best_cost = cc;
                    }
                }
                medoids[c] = best;
            }
            let (next_labels, next_cost) = assign(&medoids);
            labels = next_labels;
            let prev = *cost_history.last().unwrap();
            cost_history.push(next_cost);
            if next_cost == prev {
                break;
            }
        }

        if binomial(n as u64, self.k as u64).is_some_and(|c| c <= self.exhaustive_limit) {
            let mut best = (*cost_history.last().unwrap(), medoids.clone());
            let mut subset: Vec<usize> = (0..self.k).collect();
            loop {
                let (_, c) = assign(&subset);
                if c < best.0 {
                    best = (c, subset.clone());
                }
                if !next_combination(&mut subset, n) {
                    break;
                }
            }
            if best.0 < *cost_history.last().unwrap() {
                medoids = best.1;
                labels = assign(&medoids).0;
                cost_history.push(best.0);
            }
        }

        let medoid_set = MedoidSet::new(medoids.iter().map(|&m| distinct[m].clone()).collect())?;
        Ok(Clustering {
            medoids: medoid_set,
            assignment: member_of.iter().map(|&d| labels[d]).collect(),
            cost_history,
        })
    }
}

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut c: u64 = 1;
    for i in 0..k {
        c = c.checked_mul(n - i)? / (i + 1);
    }
    Some(c)
}

/// Advances a sorted index subset of `0..n` in lexicographic order.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    for i in (0..k).rev() {
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

pub fn kmedoids(sequences: &[TagSequence], k: usize, seed: u64, max_iters: usize) -> Result<MedoidSet> {
    Ok(KMedoids {
        max_iters,
        ..KMedoids::new(k, seed)
    }
    .fit(sequences)?
    .medoids)
}

// ── Tightness ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterTightness {
    pub index: usize,
    pub size: usize,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessReport {
    /// Non-empty clusters only.
    pub clusters: Vec<ClusterTightness>,
    pub empty: Vec<usize>,
    pub threshold: f64,
    /// Fraction of non-empty clusters whose mean distance is below `threshold`.
    pub fraction_below: f64,
}

pub fn tightness_report(
    medoids: &MedoidSet,
    sequences: &[TagSequence],
    threshold: f64,
) -> Result<TightnessReport> {
    if sequences.is_empty() {
        return Err(Error::Empty("sequence list".into()));
    }
    let mut sum = vec![0usize; medoids.k()];
    let mut size = vec![0usize; medoids.k()];
    for s in sequences {
        let q = medoids.quantize(s)?;
        sum[q.index] += q.distance;
        size[q.index] += 1;
    }
    let mut clusters = Vec::new();
    let mut empty = Vec::new();
    for i in 0..medoids.k() {
        if size[i] == 0 {
            empty.push(i);
        } else {
            clusters.push(ClusterTightness {
                index: i,
                size: size[i],
                mean_distance: sum[i] as f64 / size[i] as f64,
            });
        }
    }
    let below = clusters.iter().filter(|c| c.mean_distance < threshold).count();
    Ok(TightnessReport {
        fraction_below: below as f64 / clusters.len() as f64,
        clusters,
        empty,
        threshold,
    })
}
