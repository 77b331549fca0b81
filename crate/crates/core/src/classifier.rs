//! Multinomial naive Bayes over token bags, and the toxicity gate built on
//! top of it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledText;
use crate::error::{Error, Result};
use crate::ngram::{ToxicClass, MODEL_FORMAT, MODEL_VERSION};
use crate::vocab::{log_sum_exp, TokenId, Vocabulary};

/// Gate threshold used unless configured otherwise.
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.005;
/// Score at or above which an evaluated text counts as toxic.
pub const EVAL_TOXIC_CUTOFF: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Topic,
    Toxic,
}

/// Add-one multinomial naive Bayes.
///
/// Likelihoods are smoothed over the whole vocabulary, so each class row
/// sums to one. At scoring time tokens that never occurred in training (in
/// any class) are skipped; they carry no evidence and would otherwise
/// favour whichever class has fewer training tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayes {
    classes: Vec<String>,
    log_priors: Vec<f64>,
    /// `log_likelihoods[c][w] = ln p(w | c)`.
    log_likelihoods: Vec<Vec<f64>>,
    seen: Vec<bool>,
}

impl NaiveBayes {
    /// Trains on `(class index, tokens)` pairs. Classes with no documents
    /// produce `MissingClass`.
    pub fn fit<'a, I>(classes: Vec<String>, docs: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a [TokenId])>,
    {
        let nc = classes.len();
        if nc < 2 {
            return Err(Error::Config("naive Bayes needs at least two classes".into()));
        }
        let mut doc_counts = vec![0usize; nc];
        let mut counts = vec![vec![0u64; vocab_size]; nc];
        for (c, tokens) in docs {
            doc_counts[c] += 1;
            for &t in tokens {
                counts[c][t as usize] += 1;
            }
        }
        if let Some(c) = doc_counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass(classes[c].clone()));
        }
        let total_docs: usize = doc_counts.iter().sum();
        let log_priors = doc_counts
            .iter()
            .map(|&n| (n as f64 / total_docs as f64).ln())
            .collect();
        let log_likelihoods = counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                let denom = (n as f64 + vocab_size as f64).ln();
                row.iter().map(|&c| (c as f64 + 1.0).ln() - denom).collect()
            })
            .collect();
        let seen = (0..vocab_size)
            .map(|w| counts.iter().any(|row| row[w] > 0))
            .collect();
        Ok(NaiveBayes {
            classes,
            log_priors,
            log_likelihoods,
            seen,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn priors(&self) -> Vec<f64> {
        self.log_priors.iter().map(|l| l.exp()).collect()
    }

    pub fn likelihood(&self, class: usize, token: TokenId) -> f64 {
        self.log_likelihoods[class][token as usize].exp()
    }

    pub fn vocab_size(&self) -> usize {
        self.seen.len()
    }

    /// Unnormalized class log-posteriors.
    pub fn log_joint(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut scores = self.log_priors.clone();
        for &t in tokens {
            let t = t as usize;
            if t >= self.seen.len() || !self.seen[t] {
                continue;
            }
            for (c, s) in scores.iter_mut().enumerate() {
                *s += self.log_likelihoods[c][t];
            }
        }
        scores
    }

    /// Posterior class probabilities. An empty text returns the priors.
    pub fn class_prob(&self, tokens: &[TokenId]) -> Vec<f64> {
        let scores = self.log_joint(tokens);
        let lse = log_sum_exp(&scores);
        scores.iter().map(|s| (s - lse).exp()).collect()
    }

    /// Most probable class; ties go to the class listed first.
    pub fn predict(&self, tokens: &[TokenId]) -> usize {
        let scores = self.log_joint(tokens);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        best
    }

    /// `p(toxic | tokens)` for a classifier trained on toxicity labels.
    pub fn toxicity_score(&self, tokens: &[TokenId]) -> f64 {
        let idx = self
            .class_index(ToxicClass::Toxic.name())
            .expect("toxicity classifier has a toxic class");
        self.class_prob(tokens)[idx]
    }
}

/// Trains a classifier on either the topic or the toxicity labels.
///
/// Topic classes are ordered by first appearance in `corpus`; toxicity
/// classes are always `[toxic, nontoxic]`.
pub fn train_naive_bayes(corpus: &[LabeledText], label: LabelKind, vocab_size: usize) -> Result<NaiveBayes> {
    match label {
        LabelKind::Toxic => {
            let classes = ToxicClass::ALL.iter().map(|c| c.name().to_string()).collect();
            NaiveBayes::fit(
                classes,
                corpus
                    .iter()
                    .map(|t| (if t.toxic { 0 } else { 1 }, &t.tokens[..])),
                vocab_size,
            )
        }
        LabelKind::Topic => {
            let mut classes: Vec<String> = Vec::new();
            for t in corpus {
                if !classes.contains(&t.topic) {
                    classes.push(t.topic.clone());
                }
            }
            if classes.len() < 2 {
                return Err(Error::MissingClass(
                    "a second topic".to_string(),
                ));
            }
            let index = |topic: &str| classes.iter().position(|c| c == topic).unwrap();
            let docs: Vec<(usize, &[TokenId])> =
                corpus.iter().map(|t| (index(&t.topic), &t.tokens[..])).collect();
            NaiveBayes::fit(classes.clone(), docs, vocab_size)
        }
    }
}

/// Anything that can decide whether the detoxifier should run on a prefix.
pub trait Gate: Sync {
    fn fires(&self, tokens: &[TokenId]) -> bool;
}

/// Fixed-answer gate, useful for the degenerate cases of the gated process.
#[derive(Clone, Copy, Debug)]
pub struct ConstGate(pub bool);

impl Gate for ConstGate {
    fn fires(&self, _tokens: &[TokenId]) -> bool {
        self.0
    }
}

/// Toxicity classifier plus threshold: fires when `p(toxic) > threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateModel {
    classifier: NaiveBayes,
    threshold: f64,
}

impl GateModel {
    pub fn new(classifier: NaiveBayes, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("gate threshold {threshold} not in (0, 1)")));
        }
        if classifier.class_index(ToxicClass::Toxic.name()).is_none() {
            return Err(Error::Config("gate classifier has no toxic class".into()));
        }
        Ok(GateModel {
            classifier,
            threshold,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn classifier(&self) -> &NaiveBayes {
        &self.classifier
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        GateModel::new(self.classifier.clone(), threshold)
    }

    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        self.classifier.toxicity_score(tokens)
    }

    pub fn gate(&self, tokens: &[TokenId]) -> u8 {
        u8::from(self.score(tokens) > self.threshold)
    }

    /// Text-level entry point: whitespace tokenization against `vocab`.
    pub fn gate_text(&self, vocab: &Vocabulary, text: &str) -> Result<u8> {
        Ok(self.gate(&vocab.encode(text)?))
    }
}

impl Gate for GateModel {
    fn fires(&self, tokens: &[TokenId]) -> bool {
        self.gate(tokens) == 1
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NaiveBayesFile {
    format: String,
    version: u32,
    kind: String,
    vocab_hash: String,
    model: NaiveBayes,
}

impl NaiveBayes {
    pub fn to_json(&self, vocab: &Vocabulary) -> String {
        let file = NaiveBayesFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: "naive_bayes".into(),
            vocab_hash: vocab.fingerprint(),
            model: self.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let file: NaiveBayesFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION || file.kind != "naive_bayes" {
            return Err(Error::Config("not a naive Bayes model file".into()));
        }
        let actual = vocab.fingerprint();
        if file.vocab_hash != actual || file.model.vocab_size() != vocab.len() {
            return Err(Error::VocabularyMismatch {
                expected: file.vocab_hash,
                actual,
            });
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_json(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, vocab)
    }
}
