//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls the engine's composition or posterior code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use gta_core::classifier::Gate;
use gta_core::corpus::LabeledText;
use gta_core::ngram::{train_class_conditional, ClassConditionalLM, NGramLM, Smoothing, ToxicClass};
use gta_core::vocab::{Distribution, Rng, TokenId, TokenSeq, Vocabulary, EOS};

/// A distribution with strictly positive entries.
pub fn random_dist(rng: &mut Rng, n: usize) -> Distribution {
    let w: Vec<f64> = (0..n).map(|_| 0.01 + rng.uniform()).collect();
    let s: f64 = w.iter().sum();
    Distribution::new(w.into_iter().map(|x| x / s).collect()).unwrap()
}

/// Positive multiplicative factor spanning a few orders of magnitude.
pub fn random_factor(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| (8.0 * rng.uniform() - 4.0).exp()).collect()
}

pub fn random_tokens(rng: &mut Rng, words: &[TokenId], len: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| words[(rng.next_u64() % words.len() as u64) as usize])
        .collect()
}

/// Vocabulary of `n` plain words after BOS and EOS.
pub fn word_vocab(n: usize) -> (Vocabulary, Vec<TokenId>) {
    let names: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let v = Vocabulary::new(&names).unwrap();
    let ids = names.iter().map(|w| v.id(w).unwrap()).collect();
    (v, ids)
}

/// A small labeled corpus in which toxic texts favour `words[0]`.
pub fn labeled_corpus(rng: &mut Rng, vocab: &Vocabulary, words: &[TokenId], n: usize) -> Vec<LabeledText> {
    (0..n)
        .map(|i| {
            let toxic = i % 3 == 0;
            let len = 1 + (rng.next_u64() % 4) as usize;
            let mut toks = random_tokens(rng, words, len);
            if toxic {
                toks[0] = words[0];
            } else if toks[0] == words[0] {
                toks[0] = words[1];
            }
            LabeledText {
                tokens: TokenSeq::new(toks, vocab).unwrap(),
                topic: "t".into(),
                toxic,
            }
        })
        .collect()
}

pub fn tiny_cclm(rng: &mut Rng, vocab: &Vocabulary, words: &[TokenId], order: usize) -> ClassConditionalLM {
    let corpus = labeled_corpus(rng, vocab, words, 40);
    train_class_conditional(&corpus, vocab, order, Smoothing::uniform(order, 0.5)).unwrap()
}

/// `p(nontoxic | prefix·x)` recomputed from full sequence likelihoods:
/// `L_c = Σ_j ln p_c(s_j | s_<j)` over `s = prefix·x`, scaled by `1/|s|`,
/// then Bayes with `priors = [toxic, nontoxic]`.
pub fn scratch_gedi_posterior(cclm: &ClassConditionalLM, prefix: &[TokenId], x: TokenId, priors: [f64; 2]) -> f64 {
    let mut s = prefix.to_vec();
    s.push(x);
    let ll = |lm: &NGramLM| -> f64 { (0..s.len()).map(|j| lm.prob(&s[..j], s[j]).ln()).sum() };
    let n = s.len() as f64;
    let a_t = priors[0].ln() + ll(cclm.lm(ToxicClass::Toxic)) / n;
    let a_n = priors[1].ln() + ll(cclm.lm(ToxicClass::Nontoxic)) / n;
    1.0 / (1.0 + (a_t - a_n).exp())
}

/// Zeroes EOS and renormalizes, by hand.
pub fn without_eos(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().enumerate().filter(|(i, _)| *i != EOS as usize).map(|(_, x)| x).sum();
    p.iter()
        .enumerate()
        .map(|(i, x)| if i == EOS as usize { 0.0 } else { x / s })
        .collect()
}

/// Composed (unfiltered) distribution given the full history and base.
pub type Compose<'a> = &'a dyn Fn(&[TokenId], &[f64]) -> Vec<f64>;

/// Exact probability of every generated sequence under the gated process:
/// draw a candidate from the base step distribution, ask the gate about
/// `history·candidate`, and on firing draw from the composed distribution,
/// re-asking the gate up to `max_regate - 1` more times. EOS is unavailable
/// until `min_new` tokens exist. No top-k/top-p filtering.
pub struct GatedProcess<'a> {
    pub lm: &'a NGramLM,
    pub gate: &'a dyn Gate,
    pub compose: Compose<'a>,
    pub min_new: usize,
    pub max_new: usize,
    pub max_regate: usize,
}

impl GatedProcess<'_> {
    pub fn enumerate(&self, prompt: &[TokenId]) -> BTreeMap<Vec<TokenId>, f64> {
        let mut out = BTreeMap::new();
        self.walk(prompt, prompt.len(), 1.0, &mut out);
        out
    }

    fn walk(&self, history: &[TokenId], plen: usize, p: f64, out: &mut BTreeMap<Vec<TokenId>, f64>) {
        let generated = history.len() - plen;
        if generated == self.max_new || history.last() == Some(&EOS) && generated > 0 {
            *out.entry(history[plen..].to_vec()).or_default() += p;
            return;
        }
        let raw = self.lm.next_token_dist(history).probs().to_vec();
        let suppress = generated < self.min_new;
        let fix = |d: Vec<f64>| if suppress { without_eos(&d) } else { d };
        let base = fix(raw.clone());
        let composed = fix(normalized((self.compose)(history, &raw)));
        let fires = |x: TokenId| {
            let mut h = history.to_vec();
            h.push(x);
            self.gate.fires(&h)
        };
        let v = base.len();
        let mut next = vec![0.0; v];
        for (c, &pc) in base.iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            if !fires(c as TokenId) {
                next[c] += pc;
                continue;
            }
            // Fired: draw from the composed distribution, then re-gate.
            let mut pending = pc;
            for round in 0..self.max_regate {
                let last = round + 1 == self.max_regate;
                let mut carry = 0.0;
                for (y, &qy) in composed.iter().enumerate() {
                    if qy == 0.0 {
                        continue;
                    }
                    if last || !fires(y as TokenId) {
                        next[y] += pending * qy;
                    } else {
                        carry += pending * qy;
                    }
                }
                pending = carry;
                if pending == 0.0 {
                    break;
                }
            }
        }
        for (y, &py) in next.iter().enumerate() {
            if py > 0.0 {
                let mut h = history.to_vec();
                h.push(y as TokenId);
                self.walk(&h, plen, p * py, out);
            }
        }
    }
}

pub fn normalized(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Counts of each sequence, compared to exact probabilities with a
/// `k`-sigma binomial band. Returns the worst offender's z-score.
pub fn max_z(counts: &BTreeMap<Vec<TokenId>, u64>, exact: &BTreeMap<Vec<TokenId>, f64>, runs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seq in counts.keys() {
        if !exact.contains_key(seq) {
            return f64::INFINITY;
        }
    }
    for (seq, &p) in exact {
        let n = counts.get(seq).copied().unwrap_or(0) as f64;
        let sd = (p * (1.0 - p) / runs as f64).sqrt();
        let diff = (n / runs as f64 - p).abs();
        let z = if sd > 0.0 { diff / sd } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    worst
}

/// Like [`max_z`], but sequences expected fewer than five times are merged
/// into one bucket, where the normal approximation is still sound.
pub fn pooled_max_z(counts: &BTreeMap<Vec<TokenId>, u64>, exact: &BTreeMap<Vec<TokenId>, f64>, runs: u64) -> f64 {
    let rare = |p: f64| p * (runs as f64) < 5.0;
    let mut c2 = BTreeMap::new();
    let mut e2 = BTreeMap::new();
    let pool: Vec<TokenId> = Vec::new();
    for (seq, &p) in exact {
        let key = if rare(p) { pool.clone() } else { seq.clone() };
        *e2.entry(key.clone()).or_insert(0.0) += p;
        *c2.entry(key).or_insert(0) += counts.get(seq).copied().unwrap_or(0);
    }
    for (seq, &n) in counts {
        if !exact.contains_key(seq) {
            return if n == 0 { 0.0 } else { f64::INFINITY };
        }
    }
    max_z(&c2, &e2, runs)
}
