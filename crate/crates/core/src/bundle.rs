//! The trained model bundle: every model the pipeline needs, trained from
//! one corpus, saved as a directory with a hashed manifest.
//!
//! The corpus is split per topic into three disjoint parts:
//!
//! * LM part: base LM (with topic prompts), class-conditional LMs and the
//!   DExperts pair (bare sentences), prompt source (nontoxic, with prompts).
//! * gate part: the gate's toxicity classifier.
//! * eval part: the evaluation toxicity and topic classifiers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{train_naive_bayes, GateModel, LabelKind, NaiveBayes};
use crate::config::EngineConfig;
use crate::corpus::{topic_prompt, LabeledText};
use crate::ctg::{CtgOperator, GediPrior, Method};
use crate::error::{Error, Result};
use crate::grammar::Cfg;
use crate::ngram::{train_ngram, ClassConditionalLM, NGramLM, Smoothing};
use crate::vocab::{Rng, TokenId, Vocabulary};

const MANIFEST: &str = "manifest.json";
const BUNDLE_FORMAT: &str = "gta-bundle";
const BUNDLE_VERSION: u32 = 1;

const VOCAB_FILE: &str = "vocab.txt";
const GRAMMAR_FILE: &str = "grammar.cfg";
const BASE_FILE: &str = "base_lm.json";
const TOXIC_FILE: &str = "cc_toxic.json";
const NONTOXIC_FILE: &str = "cc_nontoxic.json";
const SOURCE_FILE: &str = "prompt_source.json";
const GATE_FILE: &str = "gate_nb.json";
const EVAL_TOXIC_FILE: &str = "eval_toxicity_nb.json";
const EVAL_TOPIC_FILE: &str = "eval_topic_nb.json";

const MODEL_FILES: [&str; 9] = [
    VOCAB_FILE,
    GRAMMAR_FILE,
    BASE_FILE,
    TOXIC_FILE,
    NONTOXIC_FILE,
    SOURCE_FILE,
    GATE_FILE,
    EVAL_TOXIC_FILE,
    EVAL_TOPIC_FILE,
];

/// Disjoint partition of a corpus.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub lm: Vec<LabeledText>,
    pub gate: Vec<LabeledText>,
    pub eval: Vec<LabeledText>,
}

/// Splits each topic's texts by `fractions` after a seeded shuffle, so every
/// part has every topic in proportion.
pub fn split_corpus(corpus: &[LabeledText], fractions: [f64; 3], seed: u64) -> Splits {
    let mut by_topic: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, t) in corpus.iter().enumerate() {
        by_topic
            .entry(t.topic.as_str())
            .or_insert_with(|| {
                order.push(t.topic.as_str());
                Vec::new()
            })
            .push(i);
    }
    let mut rng = Rng::new(seed);
    let mut out = Splits::default();
    for topic in order {
        let mut idx = by_topic.remove(topic).unwrap_or_default();
        for i in (1..idx.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        let n = idx.len();
        let a = (n as f64 * fractions[0]).round() as usize;
        let b = ((n as f64 * (fractions[0] + fractions[1])).round() as usize).max(a);
        for (k, &i) in idx.iter().enumerate() {
            let part = if k < a {
                &mut out.lm
            } else if k < b {
                &mut out.gate
            } else {
                &mut out.eval
            };
            part.push(corpus[i].clone());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub lm: usize,
    pub gate: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub corpus_seed: u64,
    pub split_fractions: [f64; 3],
    pub split_sizes: SplitSizes,
    pub topics: Vec<String>,
    pub vocab_hash: String,
    pub prior_toxic: f64,
    /// File name to lowercase hex SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub vocab: Vocabulary,
    pub grammar: Cfg,
    pub topics: Vec<String>,
    pub base: Arc<NGramLM>,
    pub cclm: Arc<ClassConditionalLM>,
    pub expert: Arc<NGramLM>,
    pub anti: Arc<NGramLM>,
    pub source: Arc<NGramLM>,
    pub gate_nb: NaiveBayes,
    pub eval_toxicity: NaiveBayes,
    pub eval_topic: NaiveBayes,
    pub split_sizes: SplitSizes,
    pub prior_toxic: f64,
}

fn with_prompt(vocab: &Vocabulary, text: &LabeledText) -> Result<Vec<TokenId>> {
    let mut ids = topic_prompt(vocab, &text.topic)?.into_ids();
    ids.extend_from_slice(&text.tokens);
    Ok(ids)
}

impl Bundle {
    /// Trains every model from `corpus`.
    pub fn train(
        corpus: &[LabeledText],
        vocab: Vocabulary,
        grammar: Cfg,
        order: usize,
        smoothing: Smoothing,
        fractions: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let splits = split_corpus(corpus, fractions, seed);
        let mut topics: Vec<String> = Vec::new();
        for t in corpus {
            if !topics.contains(&t.topic) {
                topics.push(t.topic.clone());
            }
        }

        let prompted: Vec<Vec<TokenId>> = splits
            .lm
            .iter()
            .map(|t| with_prompt(&vocab, t))
            .collect::<Result<_>>()?;
        let base = train_ngram(prompted.iter().map(|v| &v[..]), &vocab, order, smoothing.clone())?;
        let clean_prompted = splits
            .lm
            .iter()
            .zip(&prompted)
            .filter(|(t, _)| !t.toxic)
            .map(|(_, p)| &p[..]);
        let source = train_ngram(clean_prompted, &vocab, order, smoothing.clone())?;
        let cclm = crate::ngram::train_class_conditional(&splits.lm, &vocab, order, smoothing)?;

        let v = vocab.len();
        let gate_nb = train_naive_bayes(&splits.gate, LabelKind::Toxic, v)?;
        let eval_toxicity = train_naive_bayes(&splits.eval, LabelKind::Toxic, v)?;
        let eval_topic = train_naive_bayes(&splits.eval, LabelKind::Topic, v)?;

        Ok(Bundle {
            split_sizes: SplitSizes {
                lm: splits.lm.len(),
                gate: splits.gate.len(),
                eval: splits.eval.len(),
            },
            prior_toxic: cclm.prior_toxic,
            expert: Arc::new(cclm.nontoxic.clone()),
            anti: Arc::new(cclm.toxic.clone()),
            cclm: Arc::new(cclm),
            base: Arc::new(base),
            source: Arc::new(source),
            gate_nb,
            eval_toxicity,
            eval_topic,
            vocab,
            grammar,
            topics,
        })
    }

    /// Trains with the model settings of `cfg`.
    pub fn train_with(cfg: &EngineConfig, corpus: &[LabeledText], vocab: Vocabulary, grammar: Cfg) -> Result<Self> {
        Bundle::train(
            corpus,
            vocab,
            grammar,
            cfg.lm.order,
            cfg.lm.smoothing(),
            cfg.gate.split,
            cfg.seed,
        )
    }

    pub fn gedi(&self, omega: f64, prior: GediPrior) -> CtgOperator {
        CtgOperator::Gedi {
            cclm: Arc::clone(&self.cclm),
            omega,
            prior,
        }
    }

    pub fn dexperts(&self, alpha: f64) -> CtgOperator {
        CtgOperator::Dexperts {
            expert: Arc::clone(&self.expert),
            anti: Arc::clone(&self.anti),
            alpha,
        }
    }

    pub fn prompt_tuned(&self) -> CtgOperator {
        CtgOperator::PromptTuned {
            source: Arc::clone(&self.source),
        }
    }

    /// The operator for `method` with the strengths from `cfg`.
    pub fn operator(&self, method: Method, cfg: &EngineConfig) -> CtgOperator {
        match method {
            Method::Gedi => self.gedi(cfg.ctg.omega, cfg.ctg.gedi_prior),
            Method::Dexperts => self.dexperts(cfg.ctg.alpha),
            Method::Discup => self.prompt_tuned(),
        }
    }

    pub fn gate(&self, threshold: f64) -> Result<GateModel> {
        GateModel::new(self.gate_nb.clone(), threshold)
    }

    pub fn prompt(&self, topic: &str) -> Result<Vec<TokenId>> {
        if !self.topics.iter().any(|t| t == topic) {
            return Err(Error::Config(format!("unknown topic {topic:?}")));
        }
        Ok(topic_prompt(&self.vocab, topic)?.into_ids())
    }

    /// Writes every model file plus the manifest into `dir`.
    pub fn save(&self, dir: &Path, seed: u64, corpus_seed: u64, fractions: [f64; 3]) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let v = &self.vocab;
        let contents: [(&str, String); 9] = [
            (VOCAB_FILE, v.to_text()),
            (GRAMMAR_FILE, self.grammar.to_text(v)),
            (BASE_FILE, self.base.to_json()),
            (TOXIC_FILE, self.cclm.toxic.to_json()),
            (NONTOXIC_FILE, self.cclm.nontoxic.to_json()),
            (SOURCE_FILE, self.source.to_json()),
            (GATE_FILE, self.gate_nb.to_json(v)),
            (EVAL_TOXIC_FILE, self.eval_toxicity.to_json(v)),
            (EVAL_TOPIC_FILE, self.eval_topic.to_json(v)),
        ];
        let mut files = BTreeMap::new();
        for (name, text) in contents {
            let path = dir.join(name);
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            files.insert(name.to_string(), sha256_hex(text.as_bytes()));
        }
        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            seed,
            corpus_seed,
            split_fractions: fractions,
            split_sizes: self.split_sizes.clone(),
            topics: self.topics.clone(),
            vocab_hash: v.fingerprint(),
            prior_toxic: self.prior_toxic,
            files,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a bundle, verifying every file against the manifest hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            let expected = manifest
                .files
                .get(name)
                .ok_or_else(|| Error::MissingModel(format!("{} (not in manifest)", path.display())))?;
            if !path.exists() {
                return Err(Error::MissingModel(path.display().to_string()));
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(Error::StaleArtifact {
                    path: path.display().to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
            String::from_utf8(bytes).map_err(|e| Error::Config(format!("{name}: {e}")))
        };
        let vocab = Vocabulary::from_text(&read(VOCAB_FILE)?)?;
        if vocab.fingerprint() != manifest.vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: manifest.vocab_hash.clone(),
                actual: vocab.fingerprint(),
            });
        }
        let grammar = Cfg::from_text(&read(GRAMMAR_FILE)?, &vocab)?;
        let base = NGramLM::from_json(&read(BASE_FILE)?, &vocab)?;
        let toxic = NGramLM::from_json(&read(TOXIC_FILE)?, &vocab)?;
        let nontoxic = NGramLM::from_json(&read(NONTOXIC_FILE)?, &vocab)?;
        let source = NGramLM::from_json(&read(SOURCE_FILE)?, &vocab)?;
        let gate_nb = NaiveBayes::from_json(&read(GATE_FILE)?, &vocab)?;
        let eval_toxicity = NaiveBayes::from_json(&read(EVAL_TOXIC_FILE)?, &vocab)?;
        let eval_topic = NaiveBayes::from_json(&read(EVAL_TOPIC_FILE)?, &vocab)?;
        let cclm = ClassConditionalLM {
            toxic,
            nontoxic,
            prior_toxic: manifest.prior_toxic,
        };
        Ok(Bundle {
            expert: Arc::new(cclm.nontoxic.clone()),
            anti: Arc::new(cclm.toxic.clone()),
            cclm: Arc::new(cclm),
            base: Arc::new(base),
            source: Arc::new(source),
            gate_nb,
            eval_toxicity,
            eval_topic,
            vocab,
            grammar,
            topics: manifest.topics.clone(),
            split_sizes: manifest.split_sizes.clone(),
            prior_toxic: manifest.prior_toxic,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingModel(path.display().to_string()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported bundle {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    for name in MODEL_FILES {
        if !manifest.files.contains_key(name) {
            return Err(Error::MissingModel(format!("{} (not in manifest)", dir.join(name).display())));
        }
    }
    Ok(manifest)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Paths of every file a saved bundle consists of.
pub fn bundle_files(dir: &Path) -> Vec<PathBuf> {
    std::iter::once(MANIFEST)
        .chain(MODEL_FILES)
        .map(|f| dir.join(f))
        .collect()
}
