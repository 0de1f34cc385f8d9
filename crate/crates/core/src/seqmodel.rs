//! Next-token models over a fixed vocabulary.
//!
//! [`ConditionalModel`] is the only interface the decoders see. The
//! [`TabularCaptionModel`] estimates it from a tagged corpus with add-α
//! smoothed count tables, optionally conditioned on a quantized tag
//! sequence (a medoid index) and the tag that medoid places at the current
//! position.
//!
//! Backoff when a context is unseen drops the image bucket first, then the
//! previous word, then the tag. Under a medoid condition the medoid's
//! content length fixes the caption length: `EOS` is impossible before it
//! and certain after it.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Tag, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::posquant::MedoidSet;

/// Image features plus an optional medoid condition: everything a decode
/// needs besides the prefix.
#[derive(Debug, Clone, Copy)]
pub struct ContextRoot<'a> {
    pub features: &'a [f64],
    pub condition: Option<usize>,
}

impl<'a> ContextRoot<'a> {
    pub fn new(features: &'a [f64]) -> Self {
        ContextRoot {
            features,
            condition: None,
        }
    }

    pub fn with_condition(self, medoid_index: usize) -> Self {
        ContextRoot {
            condition: Some(medoid_index),
            ..self
        }
    }
}

/// Context for predicting the word at `position() == prefix.len()`.
/// `prefix[0]` is always `BOS`.
#[derive(Debug, Clone, Copy)]
pub struct ModelContext<'a> {
    pub features: &'a [f64],
    pub condition: Option<usize>,
    pub prefix: &'a [u32],
}

impl<'a> ModelContext<'a> {
    pub fn new(root: ContextRoot<'a>, prefix: &'a [u32]) -> Self {
        debug_assert_eq!(prefix.first(), Some(&BOS));
        ModelContext {
            features: root.features,
            condition: root.condition,
            prefix,
        }
    }

    pub fn position(&self) -> usize {
        self.prefix.len()
    }

    pub fn prev(&self) -> u32 {
        *self.prefix.last().expect("prefix starts with BOS")
    }
}

pub trait ConditionalModel {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of every vocabulary id at the next position.
    /// Entries are finite or `-inf` and exponentiate to a distribution.
    fn next_logprobs(&self, ctx: &ModelContext<'_>) -> Vec<f64>;
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logprobs(&self, ctx: &ModelContext<'_>) -> Vec<f64> {
        (**self).next_logprobs(ctx)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Total log-probability of `tokens` (the `EOS` step included when present).
pub fn sequence_logprob<M: ConditionalModel + ?Sized>(
    model: &M,
    root: ContextRoot<'_>,
    tokens: &[u32],
) -> Result<f64> {
    let v = model.vocab_size();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::invalid(format!("token {bad} outside vocabulary of {v}")));
    }
    let mut prefix = Vec::with_capacity(tokens.len() + 1);
    prefix.push(BOS);
    let mut total = 0.0;
    for &t in tokens {
        let lp = model.next_logprobs(&ModelContext::new(root, &prefix));
        total += lp[t as usize];
        prefix.push(t);
    }
    Ok(total)
}

// ── Image buckets ─────────────────────────────────────────────────────────

/// Assigns a feature vector to the seeded random unit direction with the
/// largest dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuckets {
    directions: Vec<Vec<f64>>,
}

impl ImageBuckets {
    pub fn new(dim: usize, buckets: usize, seed: u64) -> Result<ImageBuckets> {
        if buckets == 0 || buckets > u16::MAX as usize {
            return Err(Error::invalid("bucket count must be in 1..=65535"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions = (0..buckets)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    v
                }
            })
            .collect();
        Ok(ImageBuckets { directions })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn bucket(&self, features: &[f64]) -> u16 {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, d) in self.directions.iter().enumerate() {
            let dot: f64 = d.iter().zip(features).map(|(a, b)| a * b).sum();
            if dot > best.1 {
                best = (i, dot);
            }
        }
        best.0 as u16
    }
}

// ── Tabular model ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub bucket: Option<u16>,
    pub medoid: Option<u32>,
    pub tag: Option<Tag>,
    pub prev: Option<u32>,
}

impl ContextKey {
    const ROOT: ContextKey = ContextKey {
        bucket: None,
        medoid: None,
        tag: None,
        prev: None,
    };
}

/// Next-word counts under one context, sorted by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total: u64,
    pub entries: Vec<(u32, u64)>,
}

impl Counts {
    fn get(&self, token: u32) -> u64 {
        self.entries
            .binary_search_by_key(&token, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub alpha: f64,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            alpha: 0.1,
            buckets: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularCaptionModel {
    alpha: f64,
    vocabulary: Vocabulary,
    buckets: ImageBuckets,
    medoids: Option<MedoidSet>,
    table: HashMap<ContextKey, Counts>,
}

impl TabularCaptionModel {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn medoids(&self) -> Option<&MedoidSet> {
        self.medoids.as_ref()
    }

    pub fn buckets(&self) -> &ImageBuckets {
        &self.buckets
    }

    pub fn counts(&self, key: &ContextKey) -> Option<&Counts> {
        self.table.get(key)
    }

    /// Number of ids that can ever be emitted (everything but PAD and BOS).
    fn support(&self) -> f64 {
        (self.vocabulary.len() - 2) as f64
    }

    fn fill(&self, counts: &Counts, mask_eos: bool) -> Vec<f64> {
        let v = self.vocabulary.len();
        let (mass, support) = if mask_eos {
            (counts.total - counts.get(EOS), self.support() - 1.0)
        } else {
            (counts.total, self.support())
        };
        let log_denom = (mass as f64 + self.alpha * support).ln();
        let mut out = vec![self.alpha.ln() - log_denom; v];
        for &(tok, c) in &counts.entries {
            out[tok as usize] = (c as f64 + self.alpha).ln() - log_denom;
        }
        out[PAD as usize] = f64::NEG_INFINITY;
        out[BOS as usize] = f64::NEG_INFINITY;
        if mask_eos {
            out[EOS as usize] = f64::NEG_INFINITY;
        }
        out
    }

    fn lookup(&self, keys: &[ContextKey]) -> &Counts {
        keys.iter()
            .find_map(|k| self.table.get(k))
            .or_else(|| self.table.get(&ContextKey::ROOT))
            .expect("unigram counts exist after training")
    }

    pub fn to_json(&self) -> Result<String> {
        let mut table: Vec<(ContextKey, Counts)> =
            self.table.iter().map(|(k, c)| (*k, c.clone())).collect();
        table.sort_by_key(|e| e.0);
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            alpha: self.alpha,
            vocabulary_fingerprint: self.vocabulary.fingerprint(),
            vocabulary: self.vocabulary.words().to_vec(),
            buckets: self.buckets.clone(),
            medoid_fingerprint: self.medoids.as_ref().map(MedoidSet::fingerprint),
            medoids: self.medoids.clone(),
            table,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<TabularCaptionModel> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Mismatch(format!("unsupported model format {:?}", file.format)));
        }
        let vocabulary = Vocabulary::from_words(file.vocabulary)?;
        if vocabulary.fingerprint() != file.vocabulary_fingerprint {
            return Err(Error::Mismatch("vocabulary fingerprint".into()));
        }
        if file.medoids.as_ref().map(MedoidSet::fingerprint) != file.medoid_fingerprint {
            return Err(Error::Mismatch("medoid fingerprint".into()));
        }
        if !(file.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        let table: HashMap<ContextKey, Counts> = file.table.into_iter().collect();
        if !table.contains_key(&ContextKey::ROOT) {
            return Err(Error::invalid("model has no unigram counts"));
        }
        Ok(TabularCaptionModel {
            alpha: file.alpha,
            vocabulary,
            buckets: file.buckets,
            medoids: file.medoids,
            table,
        })
    }
}

const MODEL_FORMAT: &str = "poscap-tabular-v1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    alpha: f64,
    vocabulary: Vec<String>,
    vocabulary_fingerprint: String,
    buckets: ImageBuckets,
    medoids: Option<MedoidSet>,
    medoid_fingerprint: Option<String>,
    table: Vec<(ContextKey, Counts)>,
}

impl ConditionalModel for TabularCaptionModel {
    fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    fn next_logprobs(&self, ctx: &ModelContext<'_>) -> Vec<f64> {
        let bucket = Some(self.buckets.bucket(ctx.features));
        let prev = Some(ctx.prev());
        let condition = match (&self.medoids, ctx.condition) {
            (Some(m), Some(i)) => m.get(i).map(|q| (i as u32, q)),
            _ => None,
        };
        let Some((medoid, q)) = condition else {
            let keys = [
                ContextKey { bucket, prev, ..ContextKey::ROOT },
                ContextKey { prev, ..ContextKey::ROOT },
            ];
            return self.fill(self.lookup(&keys), false);
        };

        let Some(tag) = q.tag_at(ctx.position()) else {
            let mut out = vec![f64::NEG_INFINITY; self.vocabulary.len()];
            out[EOS as usize] = 0.0;
            return out;
        };
        let medoid = Some(medoid);
        let tag = Some(tag);
        let keys = [
            ContextKey { bucket, medoid, tag, prev },
            ContextKey { bucket: None, medoid, tag, prev },
            ContextKey { bucket: None, medoid, tag, prev: None },
            ContextKey { medoid, ..ContextKey::ROOT },
        ];
        self.fill(self.lookup(&keys), true)
    }
}

/// Maximum-likelihood count tables from the train split, add-α smoothed at
/// query time.
pub fn train_mle(
    dataset: &Dataset,
    vocabulary: &Vocabulary,
    medoids: Option<&MedoidSet>,
    config: &ModelConfig,
) -> Result<TabularCaptionModel> {
    if !(config.alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let dim = dataset.features().dim();
    let buckets = ImageBuckets::new(dim, config.buckets, config.seed)?;
    let mut raw: HashMap<ContextKey, HashMap<u32, u64>> = HashMap::new();
    let mut bump = |key: ContextKey, word: u32| {
        *raw.entry(key).or_default().entry(word).or_insert(0) += 1;
    };

    let mut seen = 0usize;
    for item in dataset.train() {
        seen += 1;
        let features = dataset.features().get(&item.image_id).ok_or_else(|| {
            Error::invalid(format!("no feature vector for image {:?}", item.image_id))
        })?;
        if let Some(&bad) = item.tokens.iter().find(|&&t| t as usize >= vocabulary.len()) {
            return Err(Error::invalid(format!("token {bad} outside vocabulary")));
        }
        let bucket = Some(buckets.bucket(features));
        let q = match medoids {
            Some(m) => {
                let idx = m.quantize_tags(&item.tags)?.index;
                Some((idx as u32, &m.medoids()[idx]))
            }
            None => None,
        };
        let mut prev = BOS;
        for (i, &word) in item.tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
            let position = i + 1;
            let p = Some(prev);
            bump(ContextKey { bucket, prev: p, ..ContextKey::ROOT }, word);
            bump(ContextKey { prev: p, ..ContextKey::ROOT }, word);
            bump(ContextKey::ROOT, word);
            if let Some((m, seq)) = q {
                if let Some(tag) = seq.tag_at(position) {
                    let (medoid, tag) = (Some(m), Some(tag));
                    bump(ContextKey { bucket, medoid, tag, prev: p }, word);
                    bump(ContextKey { bucket: None, medoid, tag, prev: p }, word);
                    bump(ContextKey { bucket: None, medoid, tag, prev: None }, word);
                    bump(ContextKey { medoid, ..ContextKey::ROOT }, word);
                }
            }
            prev = word;
        }
    }
    if seen == 0 {
        return Err(Error::Empty("train split".into()));
    }

    let table = raw
        .into_iter()
        .map(|(k, counts)| {
            let mut entries: Vec<(u32, u64)> = counts.into_iter().collect();
            entries.sort_unstable();
            let total = entries.iter().map(|e| e.1).sum();
            (k, Counts { total, entries })
        })
        .collect();
    Ok(TabularCaptionModel {
        alpha: config.alpha,
        vocabulary: vocabulary.clone(),
        buckets,
        medoids: medoids.cloned(),
        table,
    })
}

// ── Fixture models ────────────────────────────────────────────────────────

/// Small hand-made models for exercising decoders.
pub mod toy {
    use super::*;
    use crate::corpus::RESERVED;
    use rand::Rng;

    /// Uniform over the non-reserved words; never emits `EOS`.
    #[derive(Debug, Clone, Copy)]
    pub struct UniformWords {
        pub vocab_size: usize,
    }

    impl ConditionalModel for UniformWords {
        fn vocab_size(&self) -> usize {
            self.vocab_size
        }

        fn next_logprobs(&self, _ctx: &ModelContext<'_>) -> Vec<f64> {
            let n = self.vocab_size - RESERVED as usize;
            let mut out = vec![-(n as f64).ln(); self.vocab_size];
            out[..RESERVED as usize].fill(f64::NEG_INFINITY);
            out
        }
    }

    /// Emits a fixed sentence with probability 1, then `EOS`.
    #[derive(Debug, Clone)]
    pub struct Chain {
        pub vocab_size: usize,
        pub sentence: Vec<u32>,
    }

    impl ConditionalModel for Chain {
        fn vocab_size(&self) -> usize {
            self.vocab_size
        }

        fn next_logprobs(&self, ctx: &ModelContext<'_>) -> Vec<f64> {
            let next = self.sentence.get(ctx.position() - 1).copied().unwrap_or(EOS);
            let mut out = vec![f64::NEG_INFINITY; self.vocab_size];
            out[next as usize] = 0.0;
            out
        }
    }

    /// A random table over prefixes: every prefix gets its own seeded
    /// random distribution over `EOS` and the `words` non-reserved ids.
    /// Continuous logits make exact ties vanishingly unlikely.
    #[derive(Debug, Clone, Copy)]
    pub struct RandomTable {
        pub words: usize,
        pub seed: u64,
        /// Logit scale; larger values give peakier distributions.
        pub sharpness: f64,
        /// When set, the distribution ignores all but the previous token.
        pub bigram: bool,
    }

    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }

    impl RandomTable {
        pub fn new(words: usize, seed: u64) -> Self {
            RandomTable {
                words,
                seed,
                sharpness: 2.0,
                bigram: false,
            }
        }
    }

    impl ConditionalModel for RandomTable {
        fn vocab_size(&self) -> usize {
            self.words + RESERVED as usize
        }

        fn next_logprobs(&self, ctx: &ModelContext<'_>) -> Vec<f64> {
            let mut h = splitmix(self.seed);
            let context: &[u32] = if self.bigram {
                &ctx.prefix[ctx.prefix.len() - 1..]
            } else {
                ctx.prefix
            };
            for &t in context {
                h = splitmix(h ^ t as u64);
            }
            if let Some(c) = ctx.condition {
                h = splitmix(h ^ (c as u64).wrapping_mul(0x1000_0001));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let mut out = vec![f64::NEG_INFINITY; self.vocab_size()];
            out[EOS as usize] = self.sharpness * rng.random::<f64>();
            for slot in out.iter_mut().skip(RESERVED as usize) {
                *slot = self.sharpness * rng.random::<f64>();
            }
            let z = logsumexp(&out);
            out.iter_mut().for_each(|x| *x -= z);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;
    use crate::corpus::{parse_corpus, parse_features, UNK};
    use crate::posquant::TagSequence;

    fn fixture(corpus: &str, features: &str) -> (Dataset, Vocabulary) {
        let (ds, vocab, _) = parse_corpus(corpus, 1).unwrap();
        let ds = ds.with_features(parse_features(features).unwrap()).unwrap();
        (ds, vocab)
    }

    fn check_normalized(lp: &[f64]) {
        assert!(lp.iter().all(|x| x.is_finite() || *x == f64::NEG_INFINITY));
        assert!(logsumexp(lp).abs() < 1e-9, "logsumexp = {}", logsumexp(lp));
    }

    #[test]
    fn single_caption_mle_with_tiny_alpha() {
        let (ds, vocab) = fixture("i1\ttrain\ta_DET dog_NOUN\n", "i1\t1 0\n");
        let cfg = ModelConfig { alpha: 1e-12, ..Default::default() };
        let m = train_mle(&ds, &vocab, None, &cfg).unwrap();
        let feats = [1.0, 0.0];
        let prefix = [BOS, vocab.id("a")];
        let lp = m.next_logprobs(&ModelContext::new(ContextRoot::new(&feats), &prefix));
        assert!((lp[vocab.id("dog") as usize].exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn add_alpha_estimate_by_hand() {
        let (ds, vocab) = fixture(
            "i1\ttrain\ta_DET dog_NOUN\ni1\ttrain\ta_DET cat_NOUN\n",
            "i1\t1 0\n",
        );
        let alpha = 1.0;
        let m = train_mle(&ds, &vocab, None, &ModelConfig { alpha, ..Default::default() }).unwrap();
        // emit support excludes PAD and BOS: EOS, UNK, a, dog, cat
        let support = (vocab.len() - 2) as f64;
        assert_eq!(support, 5.0);
        let feats = [1.0, 0.0];
        let prefix = [BOS, vocab.id("a")];
        let lp = m.next_logprobs(&ModelContext::new(ContextRoot::new(&feats), &prefix));
        let expect = (1.0 + alpha) / (2.0 + alpha * support);
        assert!((lp[vocab.id("dog") as usize].exp() - expect).abs() < 1e-12);
        assert!((lp[vocab.id("cat") as usize].exp() - expect).abs() < 1e-12);
        assert!((lp[UNK as usize].exp() - alpha / (2.0 + alpha * support)).abs() < 1e-12);
        assert_eq!(lp[PAD as usize], f64::NEG_INFINITY);
        check_normalized(&lp);
    }

    #[test]
    fn unseen_context_backs_off() {
        let (ds, vocab) = fixture("i1\ttrain\ta_DET dog_NOUN\n", "i1\t1 0\n");
        let m = train_mle(&ds, &vocab, None, &ModelConfig::default()).unwrap();
        // prev = dog never precedes anything but EOS; prev = UNK is unseen
        let feats = [-1.0, 0.0];
        let prefix = [BOS, UNK];
        let lp = m.next_logprobs(&ModelContext::new(ContextRoot::new(&feats), &prefix));
        check_normalized(&lp);
        let root = m.counts(&ContextKey::ROOT).unwrap();
        assert_eq!(root.total, 3);
    }

    #[test]
    fn sequence_logprob_closed_forms() {
        let chain = Chain { vocab_size: 7, sentence: vec![4, 5] };
        let feats = [0.0];
        let root = ContextRoot::new(&feats);
        assert_eq!(sequence_logprob(&chain, root, &[4, 5, EOS]).unwrap(), 0.0);

        let uniform = UniformWords { vocab_size: 8 };
        let lp = sequence_logprob(&uniform, root, &[4, 5, 6]).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!(sequence_logprob(&uniform, root, &[4, 99]).is_err());
    }

    #[test]
    fn sequence_logprob_is_stepwise_sum() {
        let model = RandomTable::new(5, 11);
        let feats = [0.0];
        let root = ContextRoot::new(&feats);
        let tokens = [5, 4, 8, EOS];
        let mut expect = 0.0;
        let mut prefix = vec![BOS];
        for &t in &tokens {
            expect += model.next_logprobs(&ModelContext::new(root, &prefix))[t as usize];
            prefix.push(t);
        }
        assert_eq!(sequence_logprob(&model, root, &tokens).unwrap(), expect);
    }

    #[test]
    fn random_table_is_normalized() {
        let model = RandomTable::new(6, 3);
        let feats = [0.0];
        for prefix in [vec![BOS], vec![BOS, 4], vec![BOS, 9, 2]] {
            check_normalized(&model.next_logprobs(&ModelContext::new(ContextRoot::new(&feats), &prefix)));
        }
    }

    const POS_CORPUS: &str = "\
i1\ttrain\ta_DET dog_NOUN runs_VERB
i1\ttrain\ta_DET big_ADJ dog_NOUN runs_VERB
i2\ttrain\tthe_DET cat_NOUN sleeps_VERB
i2\ttrain\tthe_DET cat_NOUN
i3\ttest\ta_DET cat_NOUN runs_VERB
";
    const POS_FEATURES: &str = "i1\t1 0\ni2\t0 1\ni3\t1 1\n";

    fn pos_model() -> (TabularCaptionModel, Vocabulary, MedoidSet) {
        let (ds, vocab) = fixture(POS_CORPUS, POS_FEATURES);
        let medoids = MedoidSet::new(vec![
            TagSequence::new(&[Tag::Det, Tag::Noun, Tag::Verb], 6).unwrap(),
            TagSequence::new(&[Tag::Det, Tag::Adj, Tag::Noun, Tag::Verb], 6).unwrap(),
            TagSequence::new(&[Tag::Det, Tag::Noun], 6).unwrap(),
        ])
        .unwrap();
        let m = train_mle(&ds, &vocab, Some(&medoids), &ModelConfig::default()).unwrap();
        (m, vocab, medoids)
    }

    #[test]
    fn conditioned_distributions_are_normalized_and_force_length() {
        let (m, vocab, medoids) = pos_model();
        let feats = [1.0, 0.0];
        for c in 0..medoids.k() {
            let len = medoids.medoids()[c].content_len();
            let root = ContextRoot::new(&feats).with_condition(c);
            let mut prefix = vec![BOS];
            for pos in 1..=len + 1 {
                let lp = m.next_logprobs(&ModelContext::new(root, &prefix));
                check_normalized(&lp);
                if pos <= len {
                    assert_eq!(lp[EOS as usize], f64::NEG_INFINITY);
                } else {
                    assert_eq!(lp[EOS as usize], 0.0);
                }
                prefix.push(vocab.id("dog"));
            }
        }
    }

    #[test]
    fn condition_changes_distribution_only_when_conditioned() {
        let (m, vocab, _) = pos_model();
        let feats = [1.0, 0.0];
        let prefix = [BOS, vocab.id("a")];
        let at = |c: usize| m.next_logprobs(&ModelContext::new(ContextRoot::new(&feats).with_condition(c), &prefix));
        assert_ne!(at(0), at(1));

        let (ds, vocab) = fixture(POS_CORPUS, POS_FEATURES);
        let plain = train_mle(&ds, &vocab, None, &ModelConfig::default()).unwrap();
        let a = plain.next_logprobs(&ModelContext::new(ContextRoot::new(&feats).with_condition(0), &prefix));
        let b = plain.next_logprobs(&ModelContext::new(ContextRoot::new(&feats).with_condition(2), &prefix));
        let c = plain.next_logprobs(&ModelContext::new(ContextRoot::new(&feats), &prefix));
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn duplicate_caption_never_lowers_its_likelihood() {
        let (ds, vocab) = fixture(POS_CORPUS, POS_FEATURES);
        let (_, _, medoids) = pos_model();
        for medoids in [None, Some(&medoids)] {
            let base = train_mle(&ds, &vocab, medoids, &ModelConfig::default()).unwrap();
            for (i, item) in ds.train().enumerate() {
                let mut more = ds.clone();
                more.items.push(item.clone());
                let retrained = train_mle(&more, &vocab, medoids, &ModelConfig::default()).unwrap();
                let feats = ds.features().get(&item.image_id).unwrap();
                let mut root = ContextRoot::new(feats);
                if let Some(m) = medoids {
                    root = root.with_condition(m.quantize_tags(&item.tags).unwrap().index);
                }
                let mut toks = item.tokens.clone();
                toks.push(EOS);
                let before = sequence_logprob(&base, root, &toks).unwrap();
                let after = sequence_logprob(&retrained, root, &toks).unwrap();
                assert!(after >= before, "item {i}: {after} < {before}");
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let (m, _, _) = pos_model();
        let back = TabularCaptionModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let tampered = m.to_json().unwrap().replace("\"dog\"", "\"dig\"");
        assert!(TabularCaptionModel::from_json(&tampered).is_err());
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let (ds, vocab) = fixture("i1\ttest\ta_DET\n", "i1\t1\n");
        assert!(matches!(
            train_mle(&ds, &vocab, None, &ModelConfig::default()),
            Err(Error::Empty(_))
        ));
        let (ds, vocab) = fixture("i1\ttrain\ta_DET\n", "i1\t1\n");
        let cfg = ModelConfig { alpha: 0.0, ..Default::default() };
        assert!(train_mle(&ds, &vocab, None, &cfg).is_err());
    }
}
