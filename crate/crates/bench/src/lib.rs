//! Shared fixtures for the criterion benchmarks.

use poscap::corpus::{parse_corpus, parse_features, Dataset};
use poscap::posclassify::{train_classifier, ClassifierConfig, PosClassifier};
use poscap::posquant::{KMedoids, MedoidSet, TagSequence, DEFAULT_MAX_LEN};
use poscap::seqmodel::{train_mle, ModelConfig, TabularCaptionModel};
use poscap::synth::{generate, SynthSpec};
use poscap::Split;

pub struct Fixture {
    pub dataset: Dataset,
    pub medoids: MedoidSet,
    pub model: TabularCaptionModel,
    pub classifier: PosClassifier,
}

impl Fixture {
    /// The default synthetic corpus with every artifact trained on it.
    pub fn synth() -> Fixture {
        let spec = SynthSpec::default();
        let out = generate(&spec).expect("default synth spec");
        let (ds, vocab, _) = parse_corpus(&out.corpus, 1).expect("synth corpus parses");
        let dataset = ds.with_features(parse_features(&out.features).unwrap()).unwrap();
        let seqs = train_sequences(&dataset);
        let medoids = KMedoids::new(spec.templates.len(), 0).fit(&seqs).unwrap().medoids;
        let model = train_mle(&dataset, &vocab, Some(&medoids), &ModelConfig::default()).unwrap();
        let (classifier, _) = train_classifier(&dataset, &medoids, &ClassifierConfig::default()).unwrap();
        Fixture {
            dataset,
            medoids,
            model,
            classifier,
        }
    }

    pub fn test_features(&self) -> &[f64] {
        let id = self.dataset.image_ids(Split::Test)[0];
        self.dataset.features().get(id).unwrap()
    }
}

pub fn train_sequences(dataset: &Dataset) -> Vec<TagSequence> {
    dataset
        .train()
        .map(|c| TagSequence::new(&c.tags, DEFAULT_MAX_LEN).unwrap())
        .collect()
}
