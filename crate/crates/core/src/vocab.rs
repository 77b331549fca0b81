//! Vocabulary, token sequences, probability vectors and the sampling RNG.
//!
//! Every model in the engine shares one [`Vocabulary`], so distributions
//! produced by different models can be combined elementwise without any
//! re-tokenization.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Tolerance on `Σ probs = 1` for a valid [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Ordered set of token strings with dense ids. Ids 0 and 1 are always
/// `<s>` and `</s>`.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("size", &self.tokens.len())
            .finish()
    }
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary tokens; BOS and EOS are prepended.
    /// Duplicates are dropped, keeping first occurrence order.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        let mut index: HashMap<String, TokenId> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for token in tokens {
            let token = token.as_ref();
            check_token(token)?;
            if index.contains_key(token) {
                continue;
            }
            index.insert(token.to_string(), all.len() as TokenId);
            all.push(token.to_string());
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace and maps every piece to its id.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let ids = text
            .split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect::<Result<Vec<_>>>()?;
        TokenSeq::new(ids, self)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 over the newline-joined token list. Model files record it
    /// so they cannot be loaded against a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next();
        let second = lines.next();
        if first != Some(BOS_TOKEN) || second != Some(EOS_TOKEN) {
            return Err(Error::Vocabulary(format!(
                "first two lines must be {BOS_TOKEN:?} and {EOS_TOKEN:?}"
            )));
        }
        let rest: Vec<&str> = lines.collect();
        let vocab = Vocabulary::new(rest.iter().copied())?;
        if vocab.len() != rest.len() + 2 {
            return Err(Error::Vocabulary("duplicate token in vocabulary file".into()));
        }
        Ok(vocab)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn check_token(token: &str) -> Result<()> {
    if token.is_empty() || token.chars().any(char::is_whitespace) {
        return Err(Error::Vocabulary(format!(
            "token {token:?} is empty or contains whitespace"
        )));
    }
    Ok(())
}

/// A validated sequence of token ids: every id is in range and EOS, if
/// present, occurs once and last.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        validate_ids(&ids, vocab.len())?;
        Ok(TokenSeq(ids))
    }

    /// Wraps ids without checking them against a vocabulary. The EOS
    /// placement rule is still enforced.
    pub fn from_ids(ids: Vec<TokenId>) -> Result<Self> {
        validate_ids(&ids, usize::MAX)?;
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// The sequence with a trailing EOS removed, if any.
    pub fn without_eos(&self) -> &[TokenId] {
        strip_eos(&self.0)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

pub(crate) fn strip_eos(ids: &[TokenId]) -> &[TokenId] {
    match ids.split_last() {
        Some((&EOS, rest)) => rest,
        _ => ids,
    }
}

fn validate_ids(ids: &[TokenId], size: usize) -> Result<()> {
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
        return Err(Error::TokenOutOfRange { id, size });
    }
    if let Some(pos) = ids.iter().position(|&id| id == EOS) {
        if pos + 1 != ids.len() {
            return Err(Error::InvalidSequence(format!(
                "EOS at position {pos} is not the last token"
            )));
        }
    }
    Ok(())
}

/// Normalized probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("bad entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(size: usize) -> Self {
        Distribution {
            probs: vec![1.0 / size as f64; size],
        }
    }

    /// Normalizes log-space weights with a single exponentiation pass.
    /// Entries of `-inf` become exact zeros.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::InvalidWeights("NaN or +inf log weight".into()));
        }
        let lse = log_sum_exp(log_weights);
        if lse == f64::NEG_INFINITY {
            return Err(Error::AllZeroWeights);
        }
        normalize(log_weights.iter().map(|w| (w - lse).exp()).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    /// Highest-probability id; ties go to the lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

/// Scales nonnegative weights to sum to one.
pub fn normalize(weights: Vec<f64>) -> Result<Distribution> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("empty weight vector".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("entry {w}")));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    let mut probs: Vec<f64> = weights.into_iter().map(|w| w / sum).collect();
    // A second pass absorbs the rounding left by the first division.
    let resum: f64 = probs.iter().sum();
    if resum != 1.0 {
        probs.iter_mut().for_each(|p| *p /= resum);
    }
    Ok(Distribution { probs })
}

/// `ln Σ exp(v)` with a max shift. All `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Deterministic random source: ChaCha8 keyed by a 64-bit seed through
/// `SeedableRng::seed_from_u64`. The stream is identical on every platform.
///
/// Each uniform draw consumes exactly one `u64` from the stream and maps
/// its top 53 bits onto `[0, 1)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for text number `index` of a batch.
    pub fn for_text(base_seed: u64, index: u64) -> Self {
        Rng::new(base_seed ^ index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Inverse-CDF draw. Consumes exactly one uniform from `rng`.
pub fn sample_index(dist: &Distribution, rng: &mut Rng) -> TokenId {
    let u = rng.uniform();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = i;
        if u < cumulative {
            return i as TokenId;
        }
    }
    // u landed in the rounding gap above the final cumulative sum.
    last_positive as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(vec![2.0, 2.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(normalize(vec![1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
        assert!(matches!(
            normalize(vec![0.0, 0.0]),
            Err(Error::AllZeroWeights)
        ));
        assert!(matches!(
            normalize(vec![1.0, -1.0]),
            Err(Error::InvalidWeights(_))
        ));
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert!(log_sum_exp(&[0.2f64.ln(), 0.8f64.ln()]).abs() < 1e-15);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        // Finite even where a direct sum would overflow.
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn from_log_weights_handles_large_offsets() {
        let d = Distribution::from_log_weights(&[-800.0, -800.0 + 3f64.ln()]).unwrap();
        assert!(close(d.probs(), &[0.25, 0.75], 1e-12));
        assert!(matches!(
            Distribution::from_log_weights(&[f64::NEG_INFINITY; 3]),
            Err(Error::AllZeroWeights)
        ));
    }

    #[test]
    fn point_mass_always_sampled() {
        let d = Distribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        for seed in 0..50 {
            assert_eq!(sample_index(&d, &mut Rng::new(seed)), 0);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = Distribution::new(vec![0.5, 0.5]).unwrap();
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            (sample_index(&d, &mut rng), sample_index(&d, &mut rng))
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn sample_consumes_one_draw() {
        let d = Distribution::new(vec![0.25, 0.75]).unwrap();
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        sample_index(&d, &mut a);
        b.uniform();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn empirical_frequency_within_three_sigma() {
        let d = Distribution::new(vec![0.25, 0.75]).unwrap();
        let mut rng = Rng::new(7);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_index(&d, &mut rng) == 1).count();
        let freq = hits as f64 / n as f64;
        let sigma = (0.75 * 0.25 / n as f64).sqrt();
        assert!((freq - 0.75).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn vocabulary_round_trips_through_text() {
        let v = Vocabulary::new(["a", "b", "c"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert!(Vocabulary::from_text("<s>\n</s>\na\na\n").is_err());
    }

    #[test]
    fn token_seq_rejects_misplaced_eos() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert!(TokenSeq::new(vec![2, 3, EOS], &v).is_ok());
        assert!(TokenSeq::new(vec![2, EOS, 3], &v).is_err());
        assert!(TokenSeq::new(vec![7], &v).is_err());
        assert!(v.encode("a zzz").is_err());
        assert_eq!(v.decode(v.encode("a b </s>").unwrap().ids()), "a b </s>");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use super::Rng;

        proptest! {
            #[test]
            fn normalize_is_idempotent(w in prop::collection::vec(0.0f64..10.0, 1..20)) {
                prop_assume!(w.iter().any(|x| *x > 0.0));
                let once = normalize(w).unwrap();
                let twice = normalize(once.probs().to_vec()).unwrap();
                for (a, b) in once.probs().iter().zip(twice.probs()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
                let s: f64 = once.probs().iter().sum();
                prop_assert!((s - 1.0).abs() <= SUM_TOLERANCE);
            }

            #[test]
            fn log_sum_exp_matches_direct_sum(
                v in prop::collection::vec((1e-6f64).ln()..0.0, 1..30)
            ) {
                let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
                prop_assert!((log_sum_exp(&v) - direct).abs() <= 1e-12);
            }
        }

        #[test]
        fn sampling_matches_distribution_per_entry() {
            let probs = [0.05, 0.1, 0.15, 0.2, 0.3, 0.12, 0.05, 0.03];
            let d = Distribution::new(probs.to_vec()).unwrap();
            let mut rng = Rng::new(2024);
            let n = 100_000;
            let mut counts = [0usize; 8];
            for _ in 0..n {
                counts[sample_index(&d, &mut rng) as usize] += 1;
            }
            for (k, &p) in probs.iter().enumerate() {
                let f = counts[k] as f64 / n as f64;
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                assert!((f - p).abs() <= 3.0 * sigma, "entry {k}: {f} vs {p}");
            }
        }
    }
}
