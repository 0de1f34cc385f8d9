//! Seeded synthetic tagged corpora with template-driven sentence shape.
//!
//! Image `i` belongs to template cluster `i % T`. Its features are the
//! cluster centroid (a random unit vector) plus Gaussian noise, and each of
//! its captions realizes the cluster's template with words drawn uniformly
//! from a pool keyed by (tag, occurrence of that tag within the template).
//! The `j`-th image of cluster `c` goes to val when `(j + c) % 10 == 8`, to
//! test when it is 9, and to train otherwise.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{parse_tags, Split, Tag};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATES: [&str; 24] = [
    "DET NOUN VERB ADP DET NOUN PUNCT",
    "DET ADJ NOUN VERB ADP DET NOUN PUNCT",
    "DET NOUN VERB DET ADJ NOUN PUNCT",
    "DET ADJ NOUN VERB ADJ NOUN PUNCT",
    "NUM NOUN VERB ADP DET NOUN PUNCT",
    "DET NOUN CONJ DET NOUN VERB ADV PUNCT",
    "PRON VERB DET NOUN ADP NOUN PUNCT",
    "DET NOUN VERB PRT VERB DET NOUN PUNCT",
    "DET NOUN ADP DET NOUN VERB PUNCT",
    "DET ADJ ADJ NOUN VERB PUNCT",
    "NOUN VERB ADP DET ADJ NOUN PUNCT",
    "DET NOUN VERB ADV ADP DET NOUN PUNCT",
    "NUM ADJ NOUN VERB DET NOUN PUNCT",
    "DET NOUN VERB NUM NOUN PUNCT",
    "DET NOUN ADP NOUN VERB ADP DET NOUN PUNCT",
    "PRON VERB ADJ PUNCT",
    "DET NOUN VERB CONJ VERB DET NOUN PUNCT",
    "ADV DET NOUN VERB PUNCT",
    "DET ADJ NOUN ADP DET NOUN PUNCT",
    "DET NOUN VERB ADP DET ADJ NOUN ADP DET NOUN PUNCT",
    "NOUN CONJ NOUN VERB ADP NOUN PUNCT",
    "DET NOUN PRON VERB DET NOUN PUNCT",
    "DET NOUN VERB X PUNCT",
    "NUM NOUN CONJ DET NOUN VERB PUNCT",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    pub caps_per_image: usize,
    pub words_per_tag: usize,
    pub templates: Vec<Vec<Tag>>,
    pub feature_dim: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            images: 480,
            caps_per_image: 5,
            words_per_tag: 10,
            templates: default_templates(),
            feature_dim: 16,
            noise: 0.1,
        }
    }
}

pub fn default_templates() -> Vec<Vec<Tag>> {
    DEFAULT_TEMPLATES
        .iter()
        .map(|t| parse_tags(t).expect("built-in templates parse"))
        .collect()
}

/// One template per line; blank lines and `#` comments are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<Vec<Tag>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tags = parse_tags(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(tags);
    }
    if out.is_empty() {
        return Err(Error::Empty("template file".into()));
    }
    Ok(out)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.caps_per_image == 0 || self.words_per_tag == 0 || self.feature_dim == 0 {
            return Err(Error::invalid(
                "images, caps_per_image, words_per_tag and feature_dim must be at least 1",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        if self.templates.is_empty() {
            return Err(Error::Empty("template inventory".into()));
        }
        for t in &self.templates {
            if t.is_empty() || t.contains(&Tag::Pad) {
                return Err(Error::invalid("templates must be non-empty and PAD-free"));
            }
        }
        Ok(())
    }

    pub fn cluster_of(&self, image: usize) -> usize {
        image % self.templates.len()
    }

    pub fn split_of(&self, image: usize) -> Split {
        let t = self.templates.len();
        match (image / t + image % t) % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

pub fn image_id(image: usize) -> String {
    format!("img{image:05}")
}

/// Pool word for the `ordinal`-th occurrence of `tag`, choice `w`.
fn pool_word(tag: Tag, ordinal: usize, w: usize) -> String {
    let letter = (b'a' + (ordinal % 26) as u8) as char;
    format!("{}{letter}{w}", tag.name().to_ascii_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOutput {
    pub corpus: String,
    pub features: String,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids: Vec<Vec<f64>> = spec
        .templates
        .iter()
        .map(|_| {
            let v: Vec<f64> = (0..spec.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut corpus = String::new();
    let mut features = String::new();
    for i in 0..spec.images {
        let c = spec.cluster_of(i);
        let id = image_id(i);
        let split = spec.split_of(i);
        let values: Vec<String> = centroids[c]
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                (m + spec.noise * z).to_string()
            })
            .collect();
        writeln!(features, "{id}\t{}", values.join(" ")).expect("writing to a String");
        for _ in 0..spec.caps_per_image {
            let mut seen: HashMap<Tag, usize> = HashMap::new();
            let pairs: Vec<String> = spec.templates[c]
                .iter()
                .map(|&tag| {
                    let ord = seen.entry(tag).or_insert(0);
                    let w = rng.random_range(0..spec.words_per_tag);
                    let word = pool_word(tag, *ord, w);
                    *ord += 1;
                    format!("{word}_{tag}")
                })
                .collect();
            writeln!(corpus, "{id}\t{split}\t{}", pairs.join(" ")).expect("writing to a String");
        }
    }
    Ok(SynthOutput { corpus, features })
}
