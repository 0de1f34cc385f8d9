//! Tagged caption corpora, image feature files and vocabularies.
//!
//! Corpus lines look like `img1\ttrain\ta_DET dog_NOUN runs_VERB`; feature
//! lines look like `img1\t0.5 0.25`. Vocabularies are built from the train
//! split only and assign ids by descending frequency, ties broken by first
//! appearance.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: u32 = 4;

const RESERVED_WORDS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

// ── Tags ──────────────────────────────────────────────────────────────────

/// Universal part-of-speech tags plus a padding tag at id 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tag {
    Pad = 0,
    Verb,
    Noun,
    Pron,
    Adj,
    Adv,
    Adp,
    Conj,
    Det,
    Num,
    Prt,
    X,
    Punct,
}

impl Tag {
    pub const ALL: [Tag; 13] = [
        Tag::Pad,
        Tag::Verb,
        Tag::Noun,
        Tag::Pron,
        Tag::Adj,
        Tag::Adv,
        Tag::Adp,
        Tag::Conj,
        Tag::Det,
        Tag::Num,
        Tag::Prt,
        Tag::X,
        Tag::Punct,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Tag> {
        Tag::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Pad => "PAD",
            Tag::Verb => "VERB",
            Tag::Noun => "NOUN",
            Tag::Pron => "PRON",
            Tag::Adj => "ADJ",
            Tag::Adv => "ADV",
            Tag::Adp => "ADP",
            Tag::Conj => "CONJ",
            Tag::Det => "DET",
            Tag::Num => "NUM",
            Tag::Prt => "PRT",
            Tag::X => "X",
            Tag::Punct => "PUNCT",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tag {
    type Err = Error;

    /// Parses one of the twelve corpus tags. `PAD` is not accepted.
    fn from_str(s: &str) -> Result<Tag> {
        Tag::ALL[1..]
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown tag {s:?}")))
    }
}

/// The fixed tag inventory: twelve universal tags and `PAD` at id 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagSet;

impl TagSet {
    pub fn len(&self) -> usize {
        Tag::ALL.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, tag: Tag) -> u8 {
        tag.id()
    }

    pub fn tag(&self, id: u8) -> Option<Tag> {
        Tag::from_id(id)
    }

    pub fn parse(&self, name: &str) -> Result<Tag> {
        name.parse()
    }
}

/// Parses a whitespace separated tag string such as `"DET NOUN VERB"`.
pub fn parse_tags(s: &str) -> Result<Vec<Tag>> {
    s.split_whitespace().map(str::parse).collect()
}

// ── Vocabulary ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in corpus order. Words seen fewer than
    /// `min_count` times are left out and will map to `UNK`.
    pub fn build<'a, I>(words: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a str>,
    {
        // (count, first appearance)
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, w) in words.into_iter().enumerate() {
            if w == RESERVED_WORDS[UNK as usize] {
                continue;
            }
            stats.entry(w).or_insert((0, pos)).0 += 1;
        }
        let mut kept: Vec<(&str, usize, usize)> = stats
            .into_iter()
            .filter(|&(_, (count, _))| count >= min_count.max(1))
            .map(|(w, (count, first))| (w, count, first))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut all: Vec<String> = RESERVED_WORDS.iter().map(|s| s.to_string()).collect();
        all.extend(kept.into_iter().map(|(w, _, _)| w.to_string()));
        Vocabulary::from_words(all).expect("reserved prefix is present")
    }

    /// Reconstructs a vocabulary from its id-ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Vocabulary> {
        if words.len() < RESERVED as usize
            || words[..RESERVED as usize]
                .iter()
                .zip(RESERVED_WORDS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::invalid("vocabulary must start with the reserved words"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if index.insert(w.clone(), id as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id of `word`, or `UNK` when the word is not retained.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Space separated caption text; a trailing `EOS` is dropped.
    pub fn render(&self, tokens: &[u32]) -> String {
        let body = match tokens.last() {
            Some(&EOS) => &tokens[..tokens.len() - 1],
            _ => tokens,
        };
        body.iter()
            .map(|&t| self.word(t).unwrap_or(RESERVED_WORDS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Maps caption text back to ids; unknown words become `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Hex SHA-256 over the id-ordered word list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

// ── Captions and datasets ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedCaption {
    pub image_id: String,
    pub split: Split,
    pub tokens: Vec<u32>,
    pub tags: Vec<Tag>,
}

/// Dense image feature vectors keyed by image id, all of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Features {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl Features {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Features> {
        let mut dim = None;
        for (id, v) in &vectors {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("non-finite feature for {id}")));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: v.len(),
                    })
                }
                _ => {}
            }
        }
        Ok(Features {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.vectors.get(image_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for (id, v) in &self.vectors {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{id}\t{}", vals.join(" "))?;
        }
        Ok(())
    }
}

/// Parses the feature format: `<image_id>\t<v1> <v2> ... <vd>`.
pub fn parse_features(text: &str) -> Result<Features> {
    let mut vectors = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected <image_id>\\t<values>"))?;
        if id.is_empty() {
            return Err(Error::parse(lineno, "empty image id"));
        }
        let v = values
            .split_whitespace()
            .map(|f| {
                let x: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("non-numeric value {f:?}")))?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::parse(lineno, format!("non-finite value {f:?}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if v.is_empty() {
            return Err(Error::parse(lineno, "no feature values"));
        }
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::parse(
                    lineno,
                    format!("dimension mismatch: expected {d}, found {}", v.len()),
                ))
            }
            _ => {}
        }
        if vectors.insert(id.to_string(), v).is_some() {
            return Err(Error::parse(lineno, format!("duplicate image id {id:?}")));
        }
    }
    if vectors.is_empty() {
        return Err(Error::Empty("feature file".into()));
    }
    Features::new(vectors)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Features> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<TaggedCaption>,
    features: Features,
}

impl Dataset {
    pub fn new(items: Vec<TaggedCaption>) -> Dataset {
        Dataset {
            items,
            features: Features::default(),
        }
    }

    /// Attaches feature vectors; every item's image must have one.
    pub fn with_features(mut self, features: Features) -> Result<Dataset> {
        if let Some(item) = self
            .items
            .iter()
            .find(|it| features.get(&it.image_id).is_none())
        {
            return Err(Error::invalid(format!(
                "no feature vector for image {:?}",
                item.image_id
            )));
        }
        self.features = features;
        Ok(self)
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaggedCaption> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &TaggedCaption> {
        self.split(Split::Train)
    }

    /// Image ids of a split in first-appearance order.
    pub fn image_ids(&self, split: Split) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.split(split)
            .filter(|it| seen.insert(it.image_id.as_str()))
            .map(|it| it.image_id.as_str())
            .collect()
    }

    /// All captions of each image in a split, keyed by image id.
    pub fn references(&self, split: Split) -> BTreeMap<&str, Vec<&[u32]>> {
        let mut refs: BTreeMap<&str, Vec<&[u32]>> = BTreeMap::new();
        for it in self.split(split) {
            refs.entry(it.image_id.as_str())
                .or_default()
                .push(it.tokens.as_slice());
        }
        refs
    }

    /// Writes items back out in the corpus line format.
    pub fn write_corpus(&self, vocab: &Vocabulary, mut out: impl Write) -> std::io::Result<()> {
        for it in &self.items {
            let pairs: Vec<String> = it
                .tokens
                .iter()
                .zip(&it.tags)
                .map(|(&w, t)| format!("{}_{}", vocab.word(w).unwrap_or("<unk>"), t))
                .collect();
            writeln!(out, "{}\t{}\t{}", it.image_id, it.split, pairs.join(" "))?;
        }
        Ok(())
    }
}

struct RawLine<'a> {
    image_id: &'a str,
    split: Split,
    words: Vec<&'a str>,
    tags: Vec<Tag>,
}

fn parse_line(lineno: usize, line: &str) -> Result<RawLine<'_>> {
    let mut fields = line.split('\t');
    let (Some(image_id), Some(split), Some(caption), None) =
        (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(Error::parse(lineno, "expected <image_id>\\t<split>\\t<caption>"));
    };
    if image_id.is_empty() {
        return Err(Error::parse(lineno, "empty image id"));
    }
    let split: Split = split
        .parse()
        .map_err(|e: Error| Error::parse(lineno, e.to_string()))?;
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for pair in caption.split_whitespace() {
        let mut parts = pair.split('_');
        let (Some(word), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(
                lineno,
                format!("expected exactly one '_' separator in {pair:?}"),
            ));
        };
        if word.is_empty() {
            return Err(Error::parse(lineno, format!("empty word in {pair:?}")));
        }
        if RESERVED_WORDS[..UNK as usize].contains(&word) {
            return Err(Error::parse(lineno, format!("reserved word {word:?}")));
        }
        let tag: Tag = tag
            .parse()
            .map_err(|e: Error| Error::parse(lineno, e.to_string()))?;
        words.push(word);
        tags.push(tag);
    }
    if words.is_empty() {
        return Err(Error::parse(lineno, "empty caption"));
    }
    Ok(RawLine {
        image_id,
        split,
        words,
        tags,
    })
}

/// Parses corpus text, building the vocabulary from train lines.
pub fn parse_corpus(text: &str, min_count: usize) -> Result<(Dataset, Vocabulary, TagSet)> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_line(i + 1, line)?);
    }
    if raw.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let vocab = Vocabulary::build(
        raw.iter()
            .filter(|r| r.split == Split::Train)
            .flat_map(|r| r.words.iter().copied()),
        min_count,
    );
    let items = raw
        .into_iter()
        .map(|r| TaggedCaption {
            image_id: r.image_id.to_string(),
            split: r.split,
            tokens: r.words.iter().map(|w| vocab.id(w)).collect(),
            tags: r.tags,
        })
        .collect();
    Ok((Dataset::new(items), vocab, TagSet))
}

pub fn load_corpus(path: impl AsRef<Path>, min_count: usize) -> Result<(Dataset, Vocabulary, TagSet)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_line() {
        let (ds, vocab, _) = parse_corpus("img1\ttrain\ta_DET dog_NOUN runs_VERB\n", 1).unwrap();
        let it = &ds.items[0];
        assert_eq!(it.image_id, "img1");
        assert_eq!(vocab.render(&it.tokens), "a dog runs");
        assert_eq!(it.tags, vec![Tag::Det, Tag::Noun, Tag::Verb]);
    }

    #[test]
    fn rare_words_map_to_unk() {
        let text = "i1\ttrain\ta_DET dog_NOUN\ni2\ttrain\ta_DET zebra_NOUN\ni3\ttrain\ta_DET dog_NOUN\n";
        let (ds, vocab, _) = parse_corpus(text, 2).unwrap();
        assert_eq!(vocab.get("zebra"), None);
        assert_eq!(ds.items[1].tokens[1], UNK);
        assert_eq!(ds.items[0].tokens[1], vocab.id("dog"));
    }

    #[test]
    fn vocabulary_size_counts_reserved() {
        // two distinct words over three lines
        let text = "i1\ttrain\ta_DET dog_NOUN\ni2\ttrain\tdog_NOUN\ni3\ttrain\ta_DET\n";
        let (_, vocab, _) = parse_corpus(text, 1).unwrap();
        assert_eq!(vocab.len(), 2 + 4);
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_first_appearance() {
        let text = "i1\ttrain\tb_NOUN a_DET c_VERB\ni2\ttrain\tc_VERB a_DET\n";
        let (_, vocab, _) = parse_corpus(text, 1).unwrap();
        assert_eq!(&vocab.words()[4..], ["a", "c", "b"]);
    }

    #[test]
    fn vocabulary_ignores_non_train_lines() {
        let text = "i1\ttrain\ta_DET dog_NOUN\ni2\ttest\ta_DET cat_NOUN\n";
        let (ds, vocab, _) = parse_corpus(text, 1).unwrap();
        assert_eq!(vocab.get("cat"), None);
        assert_eq!(ds.items[1].tokens[1], UNK);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_tag = "i1\ttrain\ta_DET\ni2\ttrain\ta_FOO\n";
        assert!(matches!(parse_corpus(bad_tag, 1), Err(Error::Parse { line: 2, .. })));
        let no_sep = "i1\ttrain\tdog\n";
        assert!(matches!(parse_corpus(no_sep, 1), Err(Error::Parse { line: 1, .. })));
        let underscore = "i1\ttrain\thot_dog_NOUN\n";
        assert!(matches!(parse_corpus(underscore, 1), Err(Error::Parse { line: 1, .. })));
        let bad_split = "i1\tdev\ta_DET\n";
        assert!(matches!(parse_corpus(bad_split, 1), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_corpus("\n\n", 1), Err(Error::Empty(_))));
    }

    #[test]
    fn tagset_has_thirteen_ids_with_pad_first() {
        let ts = TagSet;
        assert_eq!(ts.len(), 13);
        assert_eq!(ts.id(Tag::Pad), 0);
        for (i, t) in Tag::ALL.iter().enumerate() {
            assert_eq!(Tag::from_id(i as u8), Some(*t));
        }
        assert!("PAD".parse::<Tag>().is_err());
        assert_eq!("PUNCT".parse::<Tag>().unwrap(), Tag::Punct);
    }

    #[test]
    fn features_parse_and_validate() {
        let f = parse_features("img1\t0.5 0.25\n").unwrap();
        assert_eq!(f.get("img1").unwrap(), &[0.5, 0.25]);
        assert_eq!(f.dim(), 2);
        assert!(parse_features("a\t1 2\nb\t1 2 3\n").is_err());
        assert!(parse_features("a\tNaN 1\n").is_err());
        assert!(parse_features("a\t1 x\n").is_err());
        assert!(parse_features("a\tinf 1\n").is_err());
    }

    #[test]
    fn with_features_requires_every_image() {
        let (ds, _, _) = parse_corpus("i1\ttrain\ta_DET\ni2\ttrain\tb_DET\n", 1).unwrap();
        let f = parse_features("i1\t1 0\n").unwrap();
        assert!(ds.clone().with_features(f).is_err());
        let f = parse_features("i1\t1 0\ni2\t0 1\n").unwrap();
        assert_eq!(ds.with_features(f).unwrap().features().dim(), 2);
    }

    #[test]
    fn unk_literal_round_trips() {
        let text = "i1\ttrain\ta_DET dog_NOUN\ni2\ttrain\ta_DET zebra_NOUN\n";
        let (ds, vocab, _) = parse_corpus(text, 2).unwrap();
        let mut buf = Vec::new();
        ds.write_corpus(&vocab, &mut buf).unwrap();
        let (ds2, vocab2, _) = parse_corpus(std::str::from_utf8(&buf).unwrap(), 2).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(vocab, vocab2);
    }
}
