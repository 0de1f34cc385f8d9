//! Loading or building every artifact the decoders need, and decoding one
//! image with any strategy.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use poscap::corpus::{parse_corpus, parse_features, Dataset, Split, Vocabulary};
use poscap::decode::{
    beam_search, diverse_beam_search, greedy_decode, pos_guided_decode, ConditionMode, DecodeConfig, DecodeStats,
    Hypothesis, Strategy,
};
use poscap::posclassify::{labelled_examples, train_classifier, ClassifierConfig, PosClassifier};
use poscap::posquant::{KMedoids, MedoidSet, TagSequence};
use poscap::rerank::Candidate;
use poscap::seqmodel::{train_mle, ContextRoot, ModelConfig, TabularCaptionModel};
use poscap::synth::{generate, parse_templates, SynthSpec};

use crate::config::BenchConfig;

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Corpus and features joined into a dataset.
pub fn load_dataset(corpus: &Path, features: &Path, min_count: usize) -> Result<(Dataset, Vocabulary)> {
    let (ds, vocab, _) = parse_corpus(&read(corpus)?, min_count).with_context(|| corpus.display().to_string())?;
    let feats = parse_features(&read(features)?).with_context(|| features.display().to_string())?;
    Ok((ds.with_features(feats)?, vocab))
}

/// Train-split tag sequences padded to `max_len`.
pub fn train_tag_sequences(dataset: &Dataset, max_len: usize) -> Result<Vec<TagSequence>> {
    Ok(dataset
        .train()
        .map(|c| TagSequence::new(&c.tags, max_len))
        .collect::<poscap::Result<_>>()?)
}

pub fn load_medoids(path: &Path, max_len: usize) -> Result<MedoidSet> {
    MedoidSet::parse_tsv(&read(path)?, max_len).with_context(|| path.display().to_string())
}

pub fn load_model(path: &Path) -> Result<TabularCaptionModel> {
    TabularCaptionModel::from_json(&read(path)?).with_context(|| path.display().to_string())
}

pub fn load_classifier(path: &Path) -> Result<PosClassifier> {
    PosClassifier::from_json(&read(path)?).with_context(|| path.display().to_string())
}

pub struct Artifacts {
    pub dataset: Dataset,
    pub vocabulary: Vocabulary,
    pub medoids: MedoidSet,
    pub model: TabularCaptionModel,
    pub classifier: PosClassifier,
    pub classifier_train_accuracy: f64,
}

impl BenchConfig {
    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let mut spec = SynthSpec {
            seed: self.seed,
            images: self.synth_images,
            caps_per_image: self.synth_caps_per_image,
            words_per_tag: self.synth_words_per_tag,
            feature_dim: self.synth_feature_dim,
            noise: self.synth_noise,
            ..SynthSpec::default()
        };
        if let Some(p) = &self.templates {
            spec.templates = parse_templates(&read(p)?).with_context(|| p.display().to_string())?;
        }
        Ok(spec)
    }
}

impl Artifacts {
    pub fn build(cfg: &BenchConfig) -> Result<Artifacts> {
        let missing = cfg.missing_paths();
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
            bail!("missing artifact paths: {}", list.join(", "));
        }
        let (dataset, vocabulary) = match (&cfg.corpus, &cfg.features) {
            (Some(c), Some(f)) => load_dataset(c, f, cfg.min_count)?,
            _ => {
                let out = generate(&cfg.synth_spec()?)?;
                let (ds, vocab, _) = parse_corpus(&out.corpus, cfg.min_count)?;
                (ds.with_features(parse_features(&out.features)?)?, vocab)
            }
        };
        let medoids = match &cfg.medoids {
            Some(p) => load_medoids(p, cfg.max_len)?,
            None => {
                let seqs = train_tag_sequences(&dataset, cfg.max_len)?;
                KMedoids::new(cfg.medoids_k, cfg.seed).fit(&seqs)?.medoids
            }
        };
        let model = match &cfg.model {
            Some(p) => load_model(p)?,
            None => train_mle(
                &dataset,
                &vocabulary,
                Some(&medoids),
                &ModelConfig {
                    alpha: cfg.alpha,
                    buckets: cfg.buckets,
                    seed: cfg.seed,
                },
            )?,
        };
        ensure!(
            model.vocabulary().fingerprint() == vocabulary.fingerprint(),
            "model vocabulary does not match the corpus vocabulary"
        );
        ensure!(
            model.medoids().map(MedoidSet::fingerprint) == Some(medoids.fingerprint()),
            "model is not conditioned on the configured medoid set"
        );
        let classifier = match &cfg.classifier {
            Some(p) => load_classifier(p)?,
            None => {
                let config = ClassifierConfig {
                    lr: cfg.classifier_lr,
                    epochs: cfg.classifier_epochs,
                    seed: cfg.seed,
                    ..ClassifierConfig::default()
                };
                train_classifier(&dataset, &medoids, &config)?.0
            }
        };
        ensure!(
            classifier.medoid_fingerprint() == medoids.fingerprint(),
            "classifier was trained against a different medoid set"
        );
        let (xs, labels) = labelled_examples(&dataset, &medoids)?;
        let classifier_train_accuracy = classifier.accuracy(&xs, &labels)?;
        Ok(Artifacts {
            dataset,
            vocabulary,
            medoids,
            model,
            classifier,
            classifier_train_accuracy,
        })
    }
}

/// Everything needed to decode one image with one strategy.
pub struct Decoder<'a> {
    pub model: &'a TabularCaptionModel,
    pub classifier: Option<&'a PosClassifier>,
    pub medoids: Option<&'a MedoidSet>,
    pub strategy: Strategy,
    pub config: DecodeConfig,
}

fn candidate(h: &Hypothesis, medoid: Option<usize>) -> Candidate {
    Candidate {
        tokens: h.words().to_vec(),
        logprob: h.logprob,
        medoid,
    }
}

impl Decoder<'_> {
    /// Decodes image number `index` (used to derive a per-image seed when
    /// conditions are sampled).
    pub fn decode(&self, features: &[f64], index: usize) -> Result<(Vec<Candidate>, DecodeStats)> {
        let root = ContextRoot::new(features);
        Ok(match self.strategy {
            Strategy::Greedy => {
                let (h, s) = greedy_decode(self.model, root, &self.config)?;
                (vec![candidate(&h, None)], s)
            }
            Strategy::Beam => {
                let (hs, s) = beam_search(self.model, root, &self.config)?;
                (hs.iter().map(|h| candidate(h, None)).collect(), s)
            }
            Strategy::Dbs => {
                let (hs, s) = diverse_beam_search(self.model, root, &self.config)?;
                (hs.iter().map(|h| candidate(h, None)).collect(), s)
            }
            Strategy::Pos => {
                let (Some(clf), Some(medoids)) = (self.classifier, self.medoids) else {
                    bail!("POS-guided decoding needs a classifier and a medoid set");
                };
                let mut config = self.config;
                if config.conditions == ConditionMode::Sample {
                    config.seed = config.seed.wrapping_add(index as u64);
                }
                let (hs, s) = pos_guided_decode(self.model, clf, medoids, features, &config)?;
                (hs.iter().map(|(h, m)| candidate(h, Some(*m))).collect(), s)
            }
        })
    }
}

/// Image ids of a split that have feature vectors, in first-appearance order.
pub fn split_images(dataset: &Dataset, split: Split, limit: Option<usize>) -> Vec<String> {
    let mut ids: Vec<String> = dataset.image_ids(split).into_iter().map(str::to_string).collect();
    if let Some(n) = limit {
        ids.truncate(n);
    }
    ids
}
