//! Decoding-time detoxification operators and the gated composition rule.
//!
//! Every operator is expressed as a strictly positive per-token factor `f`
//! applied to the base next-token distribution `p`:
//!
//! * GeDi: `f(x) = p(nontoxic | prefix·x)^ω`, the class posterior from the
//!   class-conditional LMs via Bayes' rule.
//! * DExperts: `f(x) = (p_expert(x) / p_anti(x))^α`.
//! * Prompt-tuned (DisCup stand-in): `f(x) = p_source(x)`, a source LM
//!   trained on nontoxic text only.
//!
//! The gated form multiplies by `f^g` with `g ∈ {0, 1}` from the gate. All
//! products are taken in log space and exponentiated once.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ngram::{ClassConditionalLM, NGramLM, ToxicClass};
use crate::vocab::{normalize, Distribution, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gedi,
    Dexperts,
    Discup,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gedi, Method::Dexperts, Method::Discup];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gedi => "gedi",
            Method::Dexperts => "dexperts",
            Method::Discup => "discup",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Running per-class log-likelihoods of the prefix seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GediState {
    /// Indexed like [`ToxicClass::ALL`]: `[toxic, nontoxic]`.
    loglik: [f64; 2],
    len: usize,
}

impl GediState {
    pub fn new() -> Self {
        Self::default()
    }

    /// State after scoring all of `prefix` from scratch.
    pub fn from_prefix(cclm: &ClassConditionalLM, prefix: &[TokenId]) -> Self {
        let mut s = Self::new();
        s.sync(cclm, prefix);
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn loglik(&self, class: ToxicClass) -> f64 {
        match class {
            ToxicClass::Toxic => self.loglik[0],
            ToxicClass::Nontoxic => self.loglik[1],
        }
    }

    /// Scores one more token given the tokens before it.
    pub fn push(&mut self, cclm: &ClassConditionalLM, context: &[TokenId], token: TokenId) {
        for (i, class) in ToxicClass::ALL.into_iter().enumerate() {
            self.loglik[i] += cclm.lm(class).prob(context, token).ln();
        }
        self.len += 1;
    }

    /// Absorbs the tokens of `history` not yet scored. `history` must extend
    /// the prefix this state was built from.
    pub fn sync(&mut self, cclm: &ClassConditionalLM, history: &[TokenId]) {
        debug_assert!(self.len <= history.len());
        for i in self.len..history.len() {
            self.push(cclm, &history[..i], history[i]);
        }
    }
}

/// Which class priors enter the Bayes rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GediPrior {
    /// The class-conditional model's training frequencies.
    Empirical,
    /// Equal priors.
    Uniform,
}

/// `ln σ(d) = -ln(1 + e^{-d})`, stable for large `|d|`.
fn log_sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        -(-d).exp().ln_1p()
    } else {
        d - d.exp().ln_1p()
    }
}

/// `ln p(nontoxic | context·x)` for every candidate `x`.
///
/// Per class `c`, `a_c(x) = ln p(c) + (L_c + ln p_c(x | context)) / (t + 1)`
/// where `L_c` is the class log-likelihood of `context` and `t` its length;
/// the posterior is the softmax of `a` over the two classes.
pub fn gedi_log_posterior(
    state: &GediState,
    cclm: &ClassConditionalLM,
    context: &[TokenId],
    priors: [f64; 2],
) -> Vec<f64> {
    let scale = 1.0 / (state.len() as f64 + 1.0);
    let toxic = cclm.toxic.next_token_dist(context);
    let clean = cclm.nontoxic.next_token_dist(context);
    let base_t = priors[0].ln() + state.loglik(ToxicClass::Toxic) * scale;
    let base_n = priors[1].ln() + state.loglik(ToxicClass::Nontoxic) * scale;
    toxic
        .probs()
        .iter()
        .zip(clean.probs())
        .map(|(pt, pn)| {
            let a_t = base_t + pt.ln() * scale;
            let a_n = base_n + pn.ln() * scale;
            log_sigmoid(a_n - a_t)
        })
        .collect()
}

/// `p(nontoxic | context·x)` for every candidate `x`.
pub fn gedi_class_posterior(
    state: &GediState,
    cclm: &ClassConditionalLM,
    context: &[TokenId],
    priors: [f64; 2],
) -> Vec<f64> {
    gedi_log_posterior(state, cclm, context, priors)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// `normalize(base · posterior^ω)`. `ω = 0` returns `base` unchanged.
pub fn apply_gedi(base: &Distribution, posterior: &[f64], omega: f64) -> Result<Distribution> {
    let log_post: Vec<f64> = posterior.iter().map(|p| p.ln()).collect();
    apply_gedi_log(base, &log_post, omega)
}

pub fn apply_gedi_log(base: &Distribution, log_posterior: &[f64], omega: f64) -> Result<Distribution> {
    if omega == 0.0 {
        return Ok(base.clone());
    }
    let factor: Vec<f64> = log_posterior.iter().map(|l| omega * l).collect();
    compose_log(base, &factor)
}

/// `normalize(exp(base + α·(expert − anti)))`.
pub fn apply_dexperts(
    base_logp: &[f64],
    expert_logp: &[f64],
    anti_logp: &[f64],
    alpha: f64,
) -> Result<Distribution> {
    assert_eq!(base_logp.len(), expert_logp.len());
    assert_eq!(base_logp.len(), anti_logp.len());
    let logits: Vec<f64> = base_logp
        .iter()
        .zip(expert_logp.iter().zip(anti_logp))
        .map(|(b, (e, a))| b + alpha * (e - a))
        .collect();
    Distribution::from_log_weights(&logits)
}

/// The nontoxic-conditioned source standing in for a prompt-tuned model.
pub fn prompt_source_dist(source: &NGramLM, context: &[TokenId]) -> Distribution {
    source.next_token_dist(context)
}

/// Gated composition with a plain positive factor: `g = 0` returns `base`
/// itself, `g = 1` returns `normalize(base ⊙ factor)`.
pub fn apply_gated(base: &Distribution, factor: &[f64], g: u8) -> Result<Distribution> {
    assert!(g <= 1, "gate value must be 0 or 1");
    assert_eq!(base.len(), factor.len());
    if g == 0 {
        return Ok(base.clone());
    }
    normalize(base.probs().iter().zip(factor).map(|(p, f)| p * f).collect())
}

/// Gated composition with a log-space factor.
pub fn apply_gated_log(base: &Distribution, log_factor: &[f64], g: u8) -> Result<Distribution> {
    assert!(g <= 1, "gate value must be 0 or 1");
    if g == 0 {
        return Ok(base.clone());
    }
    compose_log(base, log_factor)
}

fn compose_log(base: &Distribution, log_factor: &[f64]) -> Result<Distribution> {
    assert_eq!(base.len(), log_factor.len());
    let logits: Vec<f64> = base
        .probs()
        .iter()
        .zip(log_factor)
        .map(|(p, f)| p.ln() + f)
        .collect();
    Distribution::from_log_weights(&logits)
}

/// A configured detoxification operator. Models are shared read-only.
#[derive(Clone, Debug)]
pub enum CtgOperator {
    Gedi {
        cclm: Arc<ClassConditionalLM>,
        omega: f64,
        prior: GediPrior,
    },
    Dexperts {
        expert: Arc<NGramLM>,
        anti: Arc<NGramLM>,
        alpha: f64,
    },
    PromptTuned {
        source: Arc<NGramLM>,
    },
}

/// Per-generation mutable state of an operator.
#[derive(Clone, Debug, Default)]
pub struct CtgState {
    gedi: Option<GediState>,
}

impl CtgOperator {
    pub fn method(&self) -> Method {
        match self {
            CtgOperator::Gedi { .. } => Method::Gedi,
            CtgOperator::Dexperts { .. } => Method::Dexperts,
            CtgOperator::PromptTuned { .. } => Method::Discup,
        }
    }

    /// ω for GeDi, α for DExperts, and 1 for the prompt source (its factor
    /// enters with unit exponent).
    pub fn strength(&self) -> f64 {
        match self {
            CtgOperator::Gedi { omega, .. } => *omega,
            CtgOperator::Dexperts { alpha, .. } => *alpha,
            CtgOperator::PromptTuned { .. } => 1.0,
        }
    }

    pub fn new_state(&self) -> CtgState {
        match self {
            CtgOperator::Gedi { .. } => CtgState {
                gedi: Some(GediState::new()),
            },
            _ => CtgState::default(),
        }
    }

    fn gedi_priors(cclm: &ClassConditionalLM, prior: GediPrior) -> [f64; 2] {
        match prior {
            GediPrior::Empirical => [cclm.prior(ToxicClass::Toxic), cclm.prior(ToxicClass::Nontoxic)],
            GediPrior::Uniform => [0.5, 0.5],
        }
    }

    /// Log of the per-token factor after `history`. GeDi state is brought
    /// up to date with `history` first.
    pub fn log_factor(&self, state: &mut CtgState, history: &[TokenId]) -> Vec<f64> {
        match self {
            CtgOperator::Gedi { cclm, omega, prior } => {
                let s = state.gedi.get_or_insert_with(GediState::new);
                s.sync(cclm, history);
                gedi_log_posterior(s, cclm, history, Self::gedi_priors(cclm, *prior))
                    .into_iter()
                    .map(|l| omega * l)
                    .collect()
            }
            CtgOperator::Dexperts { expert, anti, alpha } => {
                let e = expert.next_token_dist(history);
                let a = anti.next_token_dist(history);
                e.probs()
                    .iter()
                    .zip(a.probs())
                    .map(|(pe, pa)| alpha * (pe.ln() - pa.ln()))
                    .collect()
            }
            CtgOperator::PromptTuned { source } => prompt_source_dist(source, history).log_probs(),
        }
    }

    /// The always-on composition of `base` after `history`.
    pub fn compose(&self, base: &Distribution, state: &mut CtgState, history: &[TokenId]) -> Result<Distribution> {
        if self.strength() == 0.0 {
            if let CtgOperator::Gedi { cclm, .. } = self {
                // Keep the state aligned even though the factor is trivial.
                state.gedi.get_or_insert_with(GediState::new).sync(cclm, history);
            }
            return Ok(base.clone());
        }
        let factor = self.log_factor(state, history);
        apply_gated_log(base, &factor, 1)
    }
}
