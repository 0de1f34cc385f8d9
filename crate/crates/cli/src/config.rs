//! Flat key-value benchmark configuration.
//!
//! ```toml
//! seed = 0
//! # data: either corpus + features, or a synthetic corpus
//! # corpus = "data.corpus.tsv"
//! # features = "data.features.tsv"
//! synth_images = 480
//! synth_noise = 0.1
//! # optional pre-built artifacts
//! # medoids = "medoids.tsv"
//! # model = "model.json"
//! # classifier = "classifier.json"
//! medoids_k = 24
//! strategies = ["greedy", "beam", "dbs", "pos"]
//! ks = [1, 5, 10, 20]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use poscap::decode::Strategy;
use poscap::rerank::Metric;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Single source of randomness for every stage.
    pub seed: u64,

    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub medoids: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub classifier: Option<PathBuf>,

    pub templates: Option<PathBuf>,
    pub synth_images: usize,
    pub synth_caps_per_image: usize,
    pub synth_words_per_tag: usize,
    pub synth_feature_dim: usize,
    pub synth_noise: f64,

    pub min_count: usize,
    pub medoids_k: usize,
    pub max_len: usize,
    pub alpha: f64,
    pub buckets: usize,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,

    pub strategies: Vec<String>,
    pub ks: Vec<usize>,
    pub lambda: f64,
    /// Condition medoids are sampled instead of taken as the top-k.
    pub sample_conditions: bool,
    pub neighbors: usize,
    pub metrics: Vec<String>,
    pub split: String,
    pub max_images: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let synth = poscap::synth::SynthSpec::default();
        BenchConfig {
            seed: 0,
            corpus: None,
            features: None,
            medoids: None,
            model: None,
            classifier: None,
            templates: None,
            synth_images: synth.images,
            synth_caps_per_image: synth.caps_per_image,
            synth_words_per_tag: synth.words_per_tag,
            synth_feature_dim: synth.feature_dim,
            synth_noise: synth.noise,
            min_count: 1,
            medoids_k: 24,
            max_len: poscap::posquant::DEFAULT_MAX_LEN,
            alpha: 0.1,
            buckets: 8,
            classifier_lr: 0.5,
            classifier_epochs: 300,
            strategies: Strategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            ks: vec![1, 5, 10, 20],
            lambda: 0.5,
            sample_conditions: false,
            neighbors: poscap::rerank::DEFAULT_NEIGHBORS,
            metrics: vec!["bleu4".into(), "cider".into()],
            split: "test".into(),
            max_images: None,
        }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<BenchConfig> {
        let cfg: BenchConfig = toml::from_str(text).context("invalid benchmark config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<BenchConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = BenchConfig::parse(&text)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.corpus,
                &mut cfg.features,
                &mut cfg.medoids,
                &mut cfg.model,
                &mut cfg.classifier,
                &mut cfg.templates,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy_list()?;
        self.metric_list()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            bail!("ks must be a non-empty list of positive integers");
        }
        if self.corpus.is_some() != self.features.is_some() {
            bail!("corpus and features must be given together");
        }
        if self.max_len == 0 || self.medoids_k == 0 {
            bail!("max_len and medoids_k must be positive");
        }
        if !(self.lambda >= 0.0) {
            bail!("lambda must be non-negative");
        }
        self.split.parse::<poscap::Split>()?;
        Ok(())
    }

    pub fn strategy_list(&self) -> Result<Vec<Strategy>> {
        let mut out = Vec::new();
        for s in &self.strategies {
            let s: Strategy = s.parse()?;
            if out.contains(&s) {
                bail!("strategy {s} listed twice");
            }
            out.push(s);
        }
        if out.is_empty() {
            bail!("no strategies configured");
        }
        Ok(out)
    }

    pub fn metric_list(&self) -> Result<Vec<Metric>> {
        let mut out: Vec<Metric> = Vec::new();
        for m in &self.metrics {
            let m: Metric = m.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Configured artifact paths that do not exist.
    pub fn missing_paths(&self) -> Vec<PathBuf> {
        [&self.corpus, &self.features, &self.medoids, &self.model, &self.classifier, &self.templates]
            .into_iter()
            .flatten()
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = BenchConfig::parse("seed = 3\nks = [2, 4]\nstrategies = [\"beam\", \"pos\"]\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.ks, vec![2, 4]);
        assert_eq!(cfg.strategy_list().unwrap(), vec![Strategy::Beam, Strategy::Pos]);
        assert_eq!(cfg.max_len, 20);
        assert_eq!(BenchConfig::parse("").unwrap(), BenchConfig::default());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(BenchConfig::parse("sed = 1").is_err());
        assert!(BenchConfig::parse("strategies = [\"bfs\"]").is_err());
        assert!(BenchConfig::parse("ks = [0]").is_err());
        assert!(BenchConfig::parse("metrics = [\"meteor\"]").is_err());
        assert!(BenchConfig::parse("corpus = \"x\"").is_err());
        assert!(BenchConfig::parse("split = \"dev\"").is_err());
    }

    #[test]
    fn lists_missing_artifacts() {
        let cfg = BenchConfig {
            model: Some("/nonexistent/model.json".into()),
            classifier: Some("/nonexistent/clf.json".into()),
            ..Default::default()
        };
        assert_eq!(cfg.missing_paths().len(), 2);
    }
}
