//! Interpolated add-k n-gram language models.
//!
//! For order `n` and context `h` (the last `n-1` tokens, BOS-padded),
//!
//! ```text
//! p(x | h) = Σ_{j=1..n} λ_j · (c(h_j, x) + k) / (c(h_j) + k·V)
//! ```
//!
//! where `h_j` is the last `j-1` tokens of `h` and `V` is the full
//! vocabulary size. Orders whose context `h_j` never occurred in training
//! drop out and the remaining `λ` are rescaled to sum to one, so an unseen
//! long context backs off to the shorter ones instead of to uniform. A model
//! with no counts at all is uniform. Every token, EOS included, keeps
//! positive mass.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledText;
use crate::error::{Error, Result};
use crate::vocab::{Distribution, TokenId, Vocabulary, BOS, EOS};

pub const DEFAULT_ADD_K: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub add_k: f64,
    /// Interpolation weights, lowest order first. Length must equal the
    /// model order.
    pub weights: Vec<f64>,
}

impl Smoothing {
    /// Add-k with equal weight on every order.
    pub fn uniform(order: usize, add_k: f64) -> Self {
        Smoothing {
            add_k,
            weights: vec![1.0 / order as f64; order],
        }
    }

    fn validate(&self, order: usize) -> Result<()> {
        if !(self.add_k.is_finite() && self.add_k > 0.0) {
            return Err(Error::Config(format!("add_k must be > 0, got {}", self.add_k)));
        }
        if self.weights.len() != order {
            return Err(Error::Config(format!(
                "{} interpolation weights for an order-{order} model",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("interpolation weights must be nonnegative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("interpolation weights sum to {sum}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    smoothing: Smoothing,
    vocab_size: usize,
    vocab_hash: String,
    /// `tables[j]` maps a context of `j` tokens to its continuation counts.
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

impl NGramLM {
    /// A model with no counts. Its distributions are uniform.
    pub fn empty(vocab: &Vocabulary, order: usize, smoothing: Smoothing) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("order must be at least 1".into()));
        }
        smoothing.validate(order)?;
        Ok(NGramLM {
            order,
            smoothing,
            vocab_size: vocab.len(),
            vocab_hash: vocab.fingerprint(),
            tables: vec![HashMap::new(); order],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> &Smoothing {
        &self.smoothing
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    /// Adds one sequence. It is padded with `order-1` BOS tokens and an EOS
    /// is appended unless already present.
    pub fn observe(&mut self, tokens: &[TokenId]) {
        let mut padded = vec![BOS; self.order - 1];
        padded.extend_from_slice(tokens);
        if tokens.last() != Some(&EOS) {
            padded.push(EOS);
        }
        for i in self.order - 1..padded.len() {
            let x = padded[i];
            for j in 0..self.order {
                let ctx = padded[i - j..i].to_vec();
                let entry = self.tables[j].entry(ctx).or_default();
                entry.total += 1;
                *entry.next.entry(x).or_default() += 1;
            }
        }
    }

    /// The last `order-1` tokens of `context`, BOS-padded on the left.
    fn padded_context(&self, context: &[TokenId]) -> Vec<TokenId> {
        let want = self.order - 1;
        let mut full = vec![BOS; want.saturating_sub(context.len())];
        full.extend_from_slice(&context[context.len().saturating_sub(want)..]);
        full
    }

    /// Orders whose context suffix was observed, with renormalized weights.
    /// Empty when nothing was observed at all.
    fn active_orders(&self, context: &[TokenId]) -> Vec<(f64, &ContextCounts)> {
        let full = self.padded_context(context);
        let mut active = Vec::with_capacity(self.order);
        let mut mass = 0.0;
        for (j, &lambda) in self.smoothing.weights.iter().enumerate() {
            if lambda == 0.0 {
                continue;
            }
            if let Some(c) = self.tables[j].get(&full[full.len() - j..]) {
                active.push((lambda, c));
                mass += lambda;
            }
        }
        for a in &mut active {
            a.0 /= mass;
        }
        active
    }

    /// Next-token distribution after `context`. Only the last `order-1`
    /// tokens of the context are read.
    pub fn next_token_dist(&self, context: &[TokenId]) -> Distribution {
        let v = self.vocab_size;
        let k = self.smoothing.add_k;
        let active = self.active_orders(context);
        if active.is_empty() {
            return Distribution::uniform(v);
        }
        let mut probs = vec![0.0; v];
        for (lambda, c) in active {
            let denom = c.total as f64 + k * v as f64;
            let floor = lambda * k / denom;
            probs.iter_mut().for_each(|p| *p += floor);
            for (&x, &n) in &c.next {
                probs[x as usize] += lambda * n as f64 / denom;
            }
        }
        Distribution::new(probs).expect("interpolated add-k is a distribution")
    }

    /// `p(x | context)` without materializing the full distribution.
    pub fn prob(&self, context: &[TokenId], x: TokenId) -> f64 {
        let v = self.vocab_size as f64;
        let k = self.smoothing.add_k;
        let active = self.active_orders(context);
        if active.is_empty() {
            return 1.0 / v;
        }
        active
            .into_iter()
            .map(|(lambda, c)| {
                let n = c.next.get(&x).copied().unwrap_or(0) as f64;
                lambda * (n + k) / (c.total as f64 + k * v)
            })
            .sum()
    }

    /// `Σ ln p(continuation_i | context ++ continuation_<i)`.
    pub fn conditional_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> f64 {
        let mut history = context.to_vec();
        let mut total = 0.0;
        for &x in continuation {
            total += self.prob(&history, x).ln();
            history.push(x);
        }
        total
    }

    /// Log-probability of a whole sequence from sequence start. No EOS is
    /// appended; include it in `tokens` to score termination.
    pub fn sequence_logprob(&self, tokens: &[TokenId]) -> f64 {
        self.conditional_logprob(&[], tokens)
    }

    /// `exp(-logprob / len)`; the length counts EOS if present.
    pub fn perplexity(&self, tokens: &[TokenId]) -> f64 {
        self.conditional_perplexity(&[], tokens)
    }

    pub fn conditional_perplexity(&self, context: &[TokenId], continuation: &[TokenId]) -> f64 {
        assert!(!continuation.is_empty(), "perplexity of an empty sequence");
        let lp = self.conditional_logprob(context, continuation);
        (-lp / continuation.len() as f64).exp()
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let actual = vocab.fingerprint();
        if actual != self.vocab_hash || vocab.len() != self.vocab_size {
            return Err(Error::VocabularyMismatch {
                expected: self.vocab_hash.clone(),
                actual,
            });
        }
        Ok(())
    }
}

pub fn train_ngram<'a, I>(
    corpus: I,
    vocab: &Vocabulary,
    order: usize,
    smoothing: Smoothing,
) -> Result<NGramLM>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    let mut lm = NGramLM::empty(vocab, order, smoothing)?;
    let mut seen = 0usize;
    for seq in corpus {
        lm.observe(seq);
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(lm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToxicClass {
    Toxic,
    Nontoxic,
}

impl ToxicClass {
    pub const ALL: [ToxicClass; 2] = [ToxicClass::Toxic, ToxicClass::Nontoxic];

    pub fn name(self) -> &'static str {
        match self {
            ToxicClass::Toxic => "toxic",
            ToxicClass::Nontoxic => "nontoxic",
        }
    }

    pub fn of(toxic: bool) -> Self {
        if toxic {
            ToxicClass::Toxic
        } else {
            ToxicClass::Nontoxic
        }
    }
}

/// One LM per toxicity class plus the class priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConditionalLM {
    pub toxic: NGramLM,
    pub nontoxic: NGramLM,
    pub prior_toxic: f64,
}

impl ClassConditionalLM {
    pub fn lm(&self, class: ToxicClass) -> &NGramLM {
        match class {
            ToxicClass::Toxic => &self.toxic,
            ToxicClass::Nontoxic => &self.nontoxic,
        }
    }

    pub fn prior(&self, class: ToxicClass) -> f64 {
        match class {
            ToxicClass::Toxic => self.prior_toxic,
            ToxicClass::Nontoxic => 1.0 - self.prior_toxic,
        }
    }
}

pub fn train_class_conditional(
    corpus: &[LabeledText],
    vocab: &Vocabulary,
    order: usize,
    smoothing: Smoothing,
) -> Result<ClassConditionalLM> {
    let toxic: Vec<&[TokenId]> = corpus.iter().filter(|t| t.toxic).map(|t| &t.tokens[..]).collect();
    let clean: Vec<&[TokenId]> = corpus.iter().filter(|t| !t.toxic).map(|t| &t.tokens[..]).collect();
    if toxic.is_empty() {
        return Err(Error::MissingClass(ToxicClass::Toxic.name().into()));
    }
    if clean.is_empty() {
        return Err(Error::MissingClass(ToxicClass::Nontoxic.name().into()));
    }
    let prior_toxic = toxic.len() as f64 / corpus.len() as f64;
    Ok(ClassConditionalLM {
        toxic: train_ngram(toxic, vocab, order, smoothing.clone())?,
        nontoxic: train_ngram(clean, vocab, order, smoothing)?,
        prior_toxic,
    })
}

// ---------------------------------------------------------------------------
// JSON container

pub(crate) const MODEL_FORMAT: &str = "gta-model";
pub(crate) const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry {
    context: Vec<TokenId>,
    total: u64,
    next: Vec<(TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NGramFile {
    format: String,
    version: u32,
    kind: String,
    vocab_hash: String,
    vocab_size: usize,
    order: usize,
    smoothing: Smoothing,
    tables: Vec<Vec<TableEntry>>,
}

impl NGramLM {
    pub fn to_json(&self) -> String {
        let tables = self
            .tables
            .iter()
            .map(|table| {
                let mut entries: Vec<TableEntry> = table
                    .iter()
                    .map(|(ctx, c)| {
                        let mut next: Vec<(TokenId, u64)> =
                            c.next.iter().map(|(&x, &n)| (x, n)).collect();
                        next.sort_unstable();
                        TableEntry {
                            context: ctx.clone(),
                            total: c.total,
                            next,
                        }
                    })
                    .collect();
                entries.sort_by(|a, b| a.context.cmp(&b.context));
                entries
            })
            .collect();
        let file = NGramFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: "ngram".into(),
            vocab_hash: self.vocab_hash.clone(),
            vocab_size: self.vocab_size,
            order: self.order,
            smoothing: self.smoothing.clone(),
            tables,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    /// Parses a model and checks it against `vocab`.
    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let file: NGramFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION || file.kind != "ngram" {
            return Err(Error::Config(format!(
                "not an n-gram model file (format {:?} v{} kind {:?})",
                file.format, file.version, file.kind
            )));
        }
        if file.tables.len() != file.order {
            return Err(Error::Config("table count does not match order".into()));
        }
        let mut lm = NGramLM::empty(vocab, file.order, file.smoothing)?;
        lm.vocab_hash = file.vocab_hash;
        lm.vocab_size = file.vocab_size;
        lm.check_vocab(vocab)?;
        for (j, entries) in file.tables.into_iter().enumerate() {
            for e in entries {
                if e.context.len() != j {
                    return Err(Error::Config(format!("context of wrong length in table {j}")));
                }
                lm.tables[j].insert(
                    e.context,
                    ContextCounts {
                        total: e.total,
                        next: e.next.into_iter().collect(),
                    },
                );
            }
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, vocab)
    }
}
