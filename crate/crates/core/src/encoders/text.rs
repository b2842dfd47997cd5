use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use sha2::{Digest, Sha256};

use super::projector::TEXT_DIM;

/// Frozen sentence encoder. Implementations must be deterministic and carry
/// no trainable state.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;

    fn embed_batch(&self, texts: &[String]) -> Vec<Vec<f64>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

const SHIPPED_CONCEPTS: &str = include_str!("../../data/concepts.tsv");

const NEGATIONS: &[&str] = &["no", "not", "without", "absent", "negative", "none"];
const NEGATION_REACH: usize = 3;

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "and", "or", "is", "are", "was", "were", "be", "been", "with", "in", "on", "at", "to",
    "for", "this", "that", "these", "there", "it", "its", "as", "by", "from", "eeg", "hz", "seen", "noted", "present",
    "also", "which", "during", "study", "record", "recording",
];

/// Synonym groups used by the stub encoder and the synthetic report writer.
#[derive(Debug, Clone)]
pub struct ConceptLexicon {
    /// Phrase tokens to concept, longest phrases first.
    entries: Vec<(Vec<String>, String)>,
    by_concept: BTreeMap<String, Vec<String>>,
}

fn tokenize(text: &str) -> Vec<String> {
    thread_local! {
        static TOKEN: Regex = Regex::new(r"[0-9]+(?:\.[0-9]+)?|[a-z]+").expect("valid token regex");
    }
    let lower = text.to_lowercase();
    TOKEN.with(|re| re.find_iter(&lower).map(|m| m.as_str().to_string()).collect())
}

impl ConceptLexicon {
    pub fn parse(src: &str) -> Self {
        let mut entries = Vec::new();
        let mut by_concept: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for line in src.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((concept, phrase)) = line.split_once('\t') else { continue };
            entries.push((tokenize(phrase), concept.to_string()));
            by_concept.entry(concept.to_string()).or_default().push(phrase.trim().to_string());
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Self { entries, by_concept }
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_CONCEPTS)
    }

    /// All phrases registered for `concept`.
    pub fn phrases(&self, concept: &str) -> &[String] {
        self.by_concept.get(concept).map_or(&[], |v| v.as_slice())
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.by_concept.keys().map(|s| s.as_str())
    }

    fn match_at(&self, tokens: &[String], i: usize) -> Option<(usize, &str)> {
        self.entries.iter().find_map(|(phrase, concept)| {
            let n = phrase.len();
            (n > 0 && i + n <= tokens.len() && tokens[i..i + n] == phrase[..]).then_some((n, concept.as_str()))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Feature {
    Concept(String),
    Word(String),
    Number(String),
    Bigram(String, String),
}

impl Feature {
    fn key(&self) -> String {
        match self {
            Feature::Concept(c) => format!("C:{c}"),
            Feature::Word(w) => format!("W:{w}"),
            Feature::Number(n) => format!("N:{n}"),
            Feature::Bigram(a, b) => format!("B:{a} {b}"),
        }
    }

    fn weight(&self) -> f64 {
        match self {
            Feature::Concept(_) => 3.0,
            Feature::Number(_) => 2.0,
            Feature::Word(_) => 1.0,
            Feature::Bigram(..) => 0.5,
        }
    }
}

/// Deterministic bag-of-features encoder standing in for a pretrained
/// clinical language model.
///
/// Lexicon phrases collapse to a shared concept feature, so synonyms embed
/// close together; a negation cue shortly before an abnormal finding turns
/// it into the normal concept. Remaining words, numbers and word bigrams are
/// hashed into seeded Gaussian directions.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    seed: u64,
    lexicon: ConceptLexicon,
}

impl StubTextEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed, lexicon: ConceptLexicon::shipped() }
    }

    pub fn with_lexicon(seed: u64, lexicon: ConceptLexicon) -> Self {
        Self { seed, lexicon }
    }

    pub fn lexicon(&self) -> &ConceptLexicon {
        &self.lexicon
    }

    fn features(&self, text: &str) -> Vec<Feature> {
        let tokens = tokenize(text);
        let mut out = Vec::new();
        let mut last_negation: Option<usize> = None;
        let mut prev_word: Option<String> = None;
        let mut i = 0;
        while i < tokens.len() {
            let tok = &tokens[i];
            if NEGATIONS.contains(&tok.as_str()) {
                last_negation = Some(i);
            }
            if let Some((n, concept)) = self.lexicon.match_at(&tokens, i) {
                let negated = last_negation.is_some_and(|p| i > p && i - p <= NEGATION_REACH);
                let c = if negated && concept == "ABNORMAL" { "NORMAL" } else { concept };
                out.push(Feature::Concept(c.to_string()));
                prev_word = None;
                i += n;
                continue;
            }
            if tok.as_bytes()[0].is_ascii_digit() {
                out.push(Feature::Number(tok.clone()));
                prev_word = None;
            } else if !STOPWORDS.contains(&tok.as_str()) && !NEGATIONS.contains(&tok.as_str()) {
                out.push(Feature::Word(tok.clone()));
                if let Some(p) = prev_word.replace(tok.clone()) {
                    out.push(Feature::Bigram(p, tok.clone()));
                }
            }
            i += 1;
        }
        out
    }

    fn direction(&self, key: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(key.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(bytes);
        (0..TEXT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Names of the concepts detected in `text`, in order of appearance.
    pub fn detected_concepts(&self, text: &str) -> Vec<String> {
        self.features(text)
            .into_iter()
            .filter_map(|f| match f {
                Feature::Concept(c) => Some(c),
                _ => None,
            })
            .collect()
    }
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        TEXT_DIM
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; TEXT_DIM];
        for f in self.features(text) {
            let w = f.weight();
            for (a, d) in v.iter_mut().zip(self.direction(&f.key())) {
                *a += w * d;
            }
        }
        let n = crate::linalg::norm(&v);
        if n == 0.0 {
            return vec![1.0 / (TEXT_DIM as f64).sqrt(); TEXT_DIM];
        }
        v.iter().map(|x| x / n).collect()
    }
}
