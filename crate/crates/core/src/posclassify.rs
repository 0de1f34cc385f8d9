//! Image → quantized tag sequence classification.
//!
//! A multinomial logistic model trained with full-batch gradient descent
//! predicts a posterior over the K medoids. Gumbel-softmax sampling and
//! best-alignment selection support drawing conditions stochastically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Tag};
use crate::error::{Error, Result};
use crate::posquant::{MedoidSet, TagSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the initial weights; 0 starts from zero.
    pub init_scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 0.5,
            epochs: 300,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosClassifier {
    dim: usize,
    k: usize,
    /// Row-major `dim × k`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    medoid_fingerprint: String,
    config: ClassifierConfig,
}

/// Per-epoch mean negative log-likelihood, the last entry after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub nll: Vec<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Indices of the `k` largest scores, ties by lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl PosClassifier {
    pub fn zeros(dim: usize, k: usize, medoid_fingerprint: impl Into<String>) -> PosClassifier {
        PosClassifier {
            dim,
            k,
            weights: vec![0.0; dim * k],
            bias: vec![0.0; k],
            medoid_fingerprint: medoid_fingerprint.into(),
            config: ClassifierConfig::default(),
        }
    }

    pub fn from_parameters(
        dim: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        medoid_fingerprint: impl Into<String>,
    ) -> Result<PosClassifier> {
        if weights.len() != dim * k || bias.len() != k || k == 0 {
            return Err(Error::invalid("parameter shapes do not match dim × k"));
        }
        Ok(PosClassifier {
            dim,
            k,
            weights,
            bias,
            medoid_fingerprint: medoid_fingerprint.into(),
            config: ClassifierConfig::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn medoid_fingerprint(&self) -> &str {
        &self.medoid_fingerprint
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.k..(i + 1) * self.k];
            for (zj, wij) in z.iter_mut().zip(row) {
                *zj += xi * wij;
            }
        }
        z
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(self.logits_unchecked(features))
    }

    /// `softmax(Wᵀx + b)`.
    pub fn posterior(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(features)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// The `k` most probable medoid indices, ties by lower index.
    pub fn topk_conditions(&self, features: &[f64], k: usize) -> Result<Vec<usize>> {
        if k > self.k {
            return Err(Error::invalid(format!("k = {k} exceeds the {} classes", self.k)));
        }
        Ok(top_k_indices(&self.posterior(features)?, k))
    }

    /// `k` distinct medoid indices sampled without replacement from the
    /// posterior (Gumbel top-k).
    pub fn sample_conditions(&self, features: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if k > self.k {
            return Err(Error::invalid(format!("k = {k} exceeds the {} classes", self.k)));
        }
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
        let perturbed: Vec<f64> = self
            .logits(features)?
            .into_iter()
            .map(|z| z + gumbel.sample(rng))
            .collect();
        Ok(top_k_indices(&perturbed, k))
    }

    fn check_labels(&self, xs: &[&[f64]], labels: &[usize]) -> Result<()> {
        if xs.len() != labels.len() {
            return Err(Error::invalid("feature and label counts differ"));
        }
        if xs.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.k) {
            return Err(Error::invalid(format!("label {bad} outside [0, {})", self.k)));
        }
        for x in xs {
            self.check_dim(x)?;
        }
        Ok(())
    }

    /// Mean negative log-likelihood of `labels`.
    pub fn nll(&self, xs: &[&[f64]], labels: &[usize]) -> Result<f64> {
        self.check_labels(xs, labels)?;
        Ok(self.nll_unchecked(xs, labels))
    }

    fn nll_unchecked(&self, xs: &[&[f64]], labels: &[usize]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z = self.logits_unchecked(x);
                crate::seqmodel::logsumexp(&z) - z[y]
            })
            .sum();
        total / xs.len() as f64
    }

    /// Analytic gradient of the mean NLL: `(dW, db)`, `dW` row-major.
    pub fn gradient(&self, xs: &[&[f64]], labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_labels(xs, labels)?;
        Ok(self.gradient_unchecked(xs, labels))
    }

    fn gradient_unchecked(&self, xs: &[&[f64]], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let n = xs.len() as f64;
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; self.k];
        for (x, &y) in xs.iter().zip(labels) {
            let mut p = self.logits_unchecked(x);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (j, pj) in p.iter().enumerate() {
                gb[j] += pj / n;
            }
            for (i, &xi) in x.iter().enumerate() {
                let row = &mut gw[i * self.k..(i + 1) * self.k];
                for (g, pj) in row.iter_mut().zip(&p) {
                    *g += xi * pj / n;
                }
            }
        }
        (gw, gb)
    }

    /// Full-batch gradient descent on the mean NLL.
    pub fn fit(
        xs: &[&[f64]],
        labels: &[usize],
        k: usize,
        medoid_fingerprint: impl Into<String>,
        config: &ClassifierConfig,
    ) -> Result<(PosClassifier, TrainTrace)> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let dim = xs.first().map_or(0, |x| x.len());
        let mut clf = PosClassifier::zeros(dim, k, medoid_fingerprint);
        clf.config = *config;
        clf.check_labels(xs, labels)?;
        if config.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let normal = Normal::new(0.0, config.init_scale)
                .map_err(|e| Error::invalid(e.to_string()))?;
            clf.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }

        let mut nll = Vec::with_capacity(config.epochs + 1);
        for _ in 0..config.epochs {
            nll.push(clf.nll_unchecked(xs, labels));
            let (gw, gb) = clf.gradient_unchecked(xs, labels);
            for (w, g) in clf.weights.iter_mut().zip(gw) {
                *w -= config.lr * g;
            }
            for (b, g) in clf.bias.iter_mut().zip(gb) {
                *b -= config.lr * g;
            }
        }
        nll.push(clf.nll_unchecked(xs, labels));
        Ok((clf, TrainTrace { nll }))
    }

    pub fn accuracy(&self, xs: &[&[f64]], labels: &[usize]) -> Result<f64> {
        self.check_labels(xs, labels)?;
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &y)| top_k_indices(&self.logits_unchecked(x), 1)[0] == y)
            .count();
        Ok(hits as f64 / xs.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<PosClassifier> {
        let c: PosClassifier = serde_json::from_str(text)?;
        if c.weights.len() != c.dim * c.k || c.bias.len() != c.k || c.k == 0 {
            return Err(Error::invalid("classifier parameter shapes are inconsistent"));
        }
        Ok(c)
    }
}

/// Training examples from the train split: image features and the
/// quantized label of each caption's tag sequence.
pub fn labelled_examples<'a>(
    dataset: &'a Dataset,
    medoids: &MedoidSet,
) -> Result<(Vec<&'a [f64]>, Vec<usize>)> {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for item in dataset.train() {
        let x = dataset.features().get(&item.image_id).ok_or_else(|| {
            Error::invalid(format!("no feature vector for image {:?}", item.image_id))
        })?;
        xs.push(x);
        labels.push(medoids.quantize_tags(&item.tags)?.index);
    }
    Ok((xs, labels))
}

pub fn train_classifier(
    dataset: &Dataset,
    medoids: &MedoidSet,
    config: &ClassifierConfig,
) -> Result<(PosClassifier, TrainTrace)> {
    let (xs, labels) = labelled_examples(dataset, medoids)?;
    PosClassifier::fit(&xs, &labels, medoids.k(), medoids.fingerprint(), config)
}

// ── Gumbel softmax ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    /// `softmax((logits + g) / τ)`.
    pub relaxed: Vec<f64>,
    /// Argmax of `relaxed`, ties by lower index.
    pub hard: usize,
}

/// Relaxed sample with caller-supplied noise.
pub fn gumbel_softmax_with_noise(logits: &[f64], temperature: f64, noise: &[f64]) -> Result<GumbelSample> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if logits.is_empty() {
        return Err(Error::Empty("logits".into()));
    }
    if noise.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            found: noise.len(),
        });
    }
    let mut relaxed: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(z, g)| (z + g) / temperature)
        .collect();
    let hard = top_k_indices(&relaxed, 1)[0];
    softmax_in_place(&mut relaxed);
    Ok(GumbelSample { relaxed, hard })
}

pub fn gumbel_softmax_sample(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<GumbelSample> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let noise: Vec<f64> = (0..logits.len()).map(|_| gumbel.sample(rng)).collect();
    gumbel_softmax_with_noise(logits, temperature, &noise)
}

pub fn gumbel_softmax_seeded(logits: &[f64], temperature: f64, seed: u64) -> Result<GumbelSample> {
    gumbel_softmax_sample(logits, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The sampled medoid closest in hamming distance to the reference tags,
/// ties by earliest position in `samples`.
pub fn select_best_aligned(samples: &[usize], reference: &[Tag], medoids: &MedoidSet) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list".into()));
    }
    let reference = TagSequence::new(reference, medoids.max_len())?;
    let mut best: Option<(usize, usize)> = None;
    for &s in samples {
        let m = medoids
            .get(s)
            .ok_or_else(|| Error::invalid(format!("medoid index {s} out of range")))?;
        let d = crate::posquant::hamming_distance(m, &reference)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((s, d));
        }
    }
    Ok(best.expect("samples are non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tag::*;

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn zero_weights_give_uniform_posterior_and_log_k_nll() {
        let c = PosClassifier::zeros(3, 4, "");
        let p = c.posterior(&[1.0, -2.0, 0.5]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let xs: Vec<&[f64]> = vec![&[1.0, 0.0, 0.0], &[0.0, 2.0, 1.0]];
        let nll = c.nll(&xs, &[0, 3]).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_softmax() {
        let c = PosClassifier::from_parameters(1, 2, vec![0.0, 0.0], vec![0.0, 3f64.ln()], "").unwrap();
        let p = c.posterior(&[7.0]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!(c.posterior(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn posterior_matches_direct_formula() {
        let w = vec![0.5, -1.0, 2.0, 0.25, 0.0, -0.75];
        let b = vec![0.1, 0.2, -0.3];
        let c = PosClassifier::from_parameters(2, 3, w.clone(), b.clone(), "").unwrap();
        let x = [1.5, -2.0];
        let z: Vec<f64> = (0..3).map(|j| b[j] + x[0] * w[j] + x[1] * w[3 + j]).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p = c.posterior(&x).unwrap();
        for j in 0..3 {
            assert!((p[j] - z[j].exp() / denom).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topk_conditions_order_and_ties() {
        let c = PosClassifier::zeros(1, 5, "");
        assert_eq!(c.topk_conditions(&[1.0], 3).unwrap(), vec![0, 1, 2]);
        assert!(c.topk_conditions(&[1.0], 6).is_err());
        let probs = [0.1f64, 0.7, 0.2];
        let b: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let c = PosClassifier::from_parameters(1, 3, vec![0.0; 3], b, "").unwrap();
        assert_eq!(c.topk_conditions(&[0.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn separable_two_class_fixture_trains_to_full_accuracy() {
        let data: Vec<[f64; 2]> = vec![[1.0, 0.2], [0.8, -0.1], [1.2, 0.4], [-1.0, 0.1], [-0.7, -0.3], [-1.3, 0.2]];
        let labels = [0, 0, 0, 1, 1, 1];
        let xs: Vec<&[f64]> = data.iter().map(|x| x.as_slice()).collect();
        let cfg = ClassifierConfig { lr: 0.01, epochs: 200, ..Default::default() };
        let (c, trace) = PosClassifier::fit(&xs, &labels, 2, "", &cfg).unwrap();
        assert!(trace.nll.windows(2).all(|w| w[1] <= w[0]), "loss must not increase");
        assert!(trace.nll.last().unwrap() <= &trace.nll[0]);
        let cfg = ClassifierConfig { lr: 0.5, epochs: 500, ..Default::default() };
        let (c2, _) = PosClassifier::fit(&xs, &labels, 2, "", &cfg).unwrap();
        assert_eq!(c2.accuracy(&xs, &labels).unwrap(), 1.0);
        assert_eq!(c.k(), 2);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let xs: Vec<&[f64]> = vec![&[1.0]];
        assert!(PosClassifier::fit(&xs, &[2], 2, "", &ClassifierConfig::default()).is_err());
        let cfg = ClassifierConfig { lr: 0.0, ..Default::default() };
        assert!(PosClassifier::fit(&xs, &[0], 2, "", &cfg).is_err());
    }

    #[test]
    fn gumbel_without_noise_is_softmax() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let s = gumbel_softmax_with_noise(&logits, 1.0, &[0.0; 4]).unwrap();
        let p = softmax(&logits);
        for (a, b) in s.relaxed.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.hard, 2);
        assert!(gumbel_softmax_with_noise(&logits, 0.0, &[0.0; 4]).is_err());
        assert!(gumbel_softmax_seeded(&logits, -1.0, 1).is_err());
    }

    #[test]
    fn gumbel_is_reproducible_and_on_simplex() {
        let logits = [0.5, 0.1, -0.4, 1.0, 0.0];
        for seed in 0..200 {
            for tau in [0.05, 0.5, 1.0, 3.0] {
                let a = gumbel_softmax_seeded(&logits, tau, seed).unwrap();
                let b = gumbel_softmax_seeded(&logits, tau, seed).unwrap();
                assert_eq!(a, b);
                assert!((a.relaxed.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(a.relaxed.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn lower_temperature_means_lower_entropy() {
        let logits = [0.5, 0.1, -0.4, 1.0, 0.0];
        let mean_entropy = |tau: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..1000)
                .map(|_| entropy(&gumbel_softmax_sample(&logits, tau, &mut rng).unwrap().relaxed))
                .sum::<f64>()
                / 1000.0
        };
        let taus = [1.0, 0.7, 0.5, 0.3, 0.1];
        let ents: Vec<f64> = taus.iter().map(|&t| mean_entropy(t)).collect();
        assert!(ents.windows(2).all(|w| w[1] < w[0]), "{ents:?}");
    }

    #[test]
    fn sampled_conditions_are_distinct() {
        let c = PosClassifier::from_parameters(1, 6, vec![0.0; 6], vec![0.0, 1.0, 2.0, 0.5, -1.0, 0.2], "").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = c.sample_conditions(&[1.0], 4, &mut rng).unwrap();
            let set: std::collections::HashSet<_> = s.iter().collect();
            assert_eq!(set.len(), 4);
        }
    }

    fn medoids() -> MedoidSet {
        MedoidSet::new(vec![
            TagSequence::new(&[Det, Noun, Verb], 5).unwrap(),
            TagSequence::new(&[Det, Adj, Noun, Verb], 5).unwrap(),
            TagSequence::new(&[Pron, Verb, Adv], 5).unwrap(),
            TagSequence::new(&[Det, Noun], 5).unwrap(),
            TagSequence::new(&[Num, Noun, Verb, Adp, Noun], 5).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn best_alignment_prefers_exact_quantization() {
        let m = medoids();
        let reference = [Det, Adj, Noun, Verb];
        assert_eq!(select_best_aligned(&[0, 2, 1, 4], &reference, &m).unwrap(), 1);
        assert_eq!(select_best_aligned(&[4], &reference, &m).unwrap(), 4);
        assert!(select_best_aligned(&[], &reference, &m).is_err());
    }

    #[test]
    fn best_alignment_matches_linear_scan() {
        let m = medoids();
        let reference = [Det, Noun, Verb, Adp];
        // distances: 0 -> 1, 1 -> 3, 2 -> 4, 3 -> 2, 4 -> 2
        assert_eq!(select_best_aligned(&[2, 3, 1, 4], &reference, &m).unwrap(), 3);
        // ties go to the earliest sample
        assert_eq!(select_best_aligned(&[4, 1, 3], &reference, &m).unwrap(), 4);
        assert_eq!(select_best_aligned(&[2, 1, 0, 3], &reference, &m).unwrap(), 0);
    }
}
