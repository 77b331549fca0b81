//! Sampling filters and the three decoding modes.
//!
//! At each step the base LM proposes a distribution. `Base` samples from it,
//! `Ctg` always composes it with the operator first, and `Gated` samples a
//! candidate from the base, asks the gate about `prefix·candidate`, and only
//! on a positive answer composes the same step's base distribution with the
//! operator and resamples.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::classifier::Gate;
use crate::ctg::{CtgOperator, CtgState};
use crate::error::{Error, Result};
use crate::ngram::NGramLM;
use crate::vocab::{normalize, sample_index, Distribution, Rng, TokenId, EOS};

pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_MIN_NEW_TOKENS: usize = 5;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

/// Slack when comparing a cumulative sum against `top_p`.
const TOP_P_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub min_new_tokens: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Gate evaluations allowed per step. 1 means the resampled token is
    /// emitted without asking the gate again.
    pub max_regate: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: DEFAULT_TOP_K,
            top_p: DEFAULT_TOP_P,
            temperature: 1.0,
            min_new_tokens: DEFAULT_MIN_NEW_TOKENS,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
            max_regate: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.top_k == 0 || self.top_k > vocab_size {
            return bad(format!("top_k {} not in [1, {vocab_size}]", self.top_k));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} not in (0, 1]", self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.max_new_tokens == 0 || self.min_new_tokens > self.max_new_tokens {
            return bad(format!(
                "need 0 <= min_new_tokens ({}) <= max_new_tokens ({}) and max_new_tokens >= 1",
                self.min_new_tokens, self.max_new_tokens
            ));
        }
        if self.max_regate == 0 {
            return bad("max_regate must be at least 1".into());
        }
        Ok(())
    }
}

/// `softmax(ln p / T)`. `T = 1` returns the input unchanged.
pub fn apply_temperature(dist: &Distribution, temperature: f64) -> Result<Distribution> {
    if temperature == 1.0 {
        return Ok(dist.clone());
    }
    let scaled: Vec<f64> = dist.probs().iter().map(|p| p.ln() / temperature).collect();
    Distribution::from_log_weights(&scaled)
}

/// Token ids by descending probability, ties broken toward the lower id.
fn ranked(dist: &Distribution) -> Vec<usize> {
    let p = dist.probs();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

fn keep_only(dist: &Distribution, keep: &[usize]) -> Result<Distribution> {
    let mut w = vec![0.0; dist.len()];
    for &i in keep {
        w[i] = dist.probs()[i];
    }
    normalize(w)
}

/// Keeps the `k` most probable tokens.
pub fn filter_top_k(dist: &Distribution, k: usize) -> Result<Distribution> {
    assert!(k >= 1, "top_k must be at least 1");
    if k >= dist.len() {
        return Ok(dist.clone());
    }
    let order = ranked(dist);
    keep_only(dist, &order[..k])
}

/// Keeps the smallest high-probability prefix whose mass reaches `p`.
pub fn filter_top_p(dist: &Distribution, p: f64) -> Result<Distribution> {
    assert!(p > 0.0 && p <= 1.0, "top_p must be in (0, 1]");
    if p >= 1.0 {
        return Ok(dist.clone());
    }
    let order = ranked(dist);
    let mut mass = 0.0;
    let mut n = 0;
    for &i in &order {
        let q = dist.probs()[i];
        if q <= 0.0 {
            break;
        }
        mass += q;
        n += 1;
        if mass >= p - TOP_P_SLACK {
            break;
        }
    }
    keep_only(dist, &order[..n.max(1)])
}

/// Temperature, then top-k, then top-p.
pub fn apply_filters(dist: &Distribution, cfg: &SamplerConfig) -> Result<Distribution> {
    let d = apply_temperature(dist, cfg.temperature)?;
    let d = filter_top_k(&d, cfg.top_k)?;
    filter_top_p(&d, cfg.top_p)
}

fn suppress_eos(dist: &Distribution) -> Result<Distribution> {
    let mut w = dist.probs().to_vec();
    if let Some(e) = w.get_mut(EOS as usize) {
        *e = 0.0;
    }
    normalize(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    Ctg,
    Gated,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Base, Mode::Ctg, Mode::Gated];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Ctg => "ctg",
            Mode::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub lm_calls: u64,
    pub ctg_calls: u64,
    pub gate_calls: u64,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.lm_calls += o.lm_calls;
        self.ctg_calls += o.ctg_calls;
        self.gate_calls += o.gate_calls;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Base-sampled candidate, present in gated mode only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub candidate: Option<TokenId>,
    pub gate_fired: bool,
    pub token: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub mode: Mode,
    pub seed: u64,
    pub prompt: Vec<TokenId>,
    /// Generated tokens, including a final EOS when one was sampled.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub counters: Counters,
    pub seconds: f64,
}

impl GenerationRecord {
    pub fn fires(&self) -> usize {
        self.steps.iter().filter(|s| s.gate_fired).count()
    }

    pub fn text_tokens(&self) -> &[TokenId] {
        crate::vocab::strip_eos(&self.tokens)
    }
}

/// Artificial per-call latency, spent busy-waiting so that it shows up in
/// wall-clock measurements the way real model calls would.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostModel {
    pub gate: Duration,
    pub ctg: Duration,
}

fn spin(d: Duration) {
    if d.is_zero() {
        return;
    }
    let start = Instant::now();
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
}

/// Everything a generation needs besides the prompt and seed.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub lm: &'a NGramLM,
    pub ctg: Option<&'a CtgOperator>,
    pub gate: Option<&'a dyn Gate>,
    pub cfg: &'a SamplerConfig,
    pub cost: CostModel,
}

impl<'a> Decoder<'a> {
    pub fn new(lm: &'a NGramLM, cfg: &'a SamplerConfig) -> Self {
        Decoder {
            lm,
            ctg: None,
            gate: None,
            cfg,
            cost: CostModel::default(),
        }
    }

    pub fn with_ctg(mut self, op: &'a CtgOperator) -> Self {
        self.ctg = Some(op);
        self
    }

    pub fn with_gate(mut self, gate: &'a dyn Gate) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    /// Generates from `prompt` with the configured seed.
    pub fn generate(&self, prompt: &[TokenId], mode: Mode) -> Result<GenerationRecord> {
        self.generate_with(prompt, mode, &mut Rng::new(self.cfg.seed))
    }

    pub fn generate_with(&self, prompt: &[TokenId], mode: Mode, rng: &mut Rng) -> Result<GenerationRecord> {
        let started = Instant::now();
        let op = match mode {
            Mode::Base => None,
            Mode::Ctg | Mode::Gated => Some(self.ctg.ok_or_else(|| {
                Error::Config(format!("{} decoding needs a detoxification operator", mode.name()))
            })?),
        };
        let gate = match mode {
            Mode::Gated => Some(
                self.gate
                    .ok_or_else(|| Error::Config("gated decoding needs a gate".into()))?,
            ),
            _ => None,
        };
        let mut state = op.map(|o| o.new_state()).unwrap_or_default();
        let mut history = prompt.to_vec();
        let mut steps = Vec::new();
        let mut counters = Counters::default();

        for step in 0..self.cfg.max_new_tokens {
            let suppress = steps.len() < self.cfg.min_new_tokens;
            let prepare = |d: &Distribution| -> Result<Distribution> {
                let d = if suppress { suppress_eos(d)? } else { d.clone() };
                apply_filters(&d, self.cfg)
            };
            let wrap = |e: Error| Error::Generation {
                step,
                source: Box::new(e),
            };
            let base = self.lm.next_token_dist(&history);
            counters.lm_calls += 1;

            let record = match (mode, op) {
                (Mode::Base, _) => StepRecord {
                    candidate: None,
                    gate_fired: false,
                    token: sample_index(&prepare(&base).map_err(wrap)?, rng),
                },
                (Mode::Ctg, Some(op)) => {
                    let composed = self.compose(op, &base, &mut state, &history, &mut counters);
                    let q = composed.and_then(|d| prepare(&d)).map_err(wrap)?;
                    StepRecord {
                        candidate: None,
                        gate_fired: false,
                        token: sample_index(&q, rng),
                    }
                }
                (Mode::Gated, Some(op)) => {
                    let gate = gate.expect("checked above");
                    let candidate = sample_index(&prepare(&base).map_err(wrap)?, rng);
                    history.push(candidate);
                    let fired = self.ask(gate, &history, &mut counters);
                    history.pop();
                    let mut token = candidate;
                    if fired {
                        let composed = self.compose(op, &base, &mut state, &history, &mut counters);
                        let q = composed.and_then(|d| prepare(&d)).map_err(wrap)?;
                        token = sample_index(&q, rng);
                        for _ in 1..self.cfg.max_regate {
                            history.push(token);
                            let again = self.ask(gate, &history, &mut counters);
                            history.pop();
                            if !again {
                                break;
                            }
                            token = sample_index(&q, rng);
                        }
                    }
                    StepRecord {
                        candidate: Some(candidate),
                        gate_fired: fired,
                        token,
                    }
                }
                _ => unreachable!("operator presence checked above"),
            };
            let token = record.token;
            history.push(token);
            steps.push(record);
            if token == EOS {
                break;
            }
        }

        Ok(GenerationRecord {
            mode,
            seed: rng.seed(),
            prompt: prompt.to_vec(),
            tokens: history[prompt.len()..].to_vec(),
            steps,
            counters,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn compose(
        &self,
        op: &CtgOperator,
        base: &Distribution,
        state: &mut CtgState,
        history: &[TokenId],
        counters: &mut Counters,
    ) -> Result<Distribution> {
        counters.ctg_calls += 1;
        spin(self.cost.ctg);
        op.compose(base, state, history)
    }

    fn ask(&self, gate: &dyn Gate, tokens: &[TokenId], counters: &mut Counters) -> bool {
        counters.gate_calls += 1;
        spin(self.cost.gate);
        gate.fires(tokens)
    }
}
