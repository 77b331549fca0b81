//! Synthetic topic × toxicity corpus.
//!
//! Sentences come from a weighted grammar with one clean root `S_<topic>`
//! and one toxic root `X_<topic>` per topic. Each text independently picks
//! the toxic root with the topic's planted rate; the label is then read off
//! the tokens, so `toxic` is true exactly when a lexicon token is present.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{terminal_strings, Cfg, DEFAULT_DEPTH_CAP};
use crate::vocab::{Rng, TokenId, TokenSeq, Vocabulary};

/// First prompt token; the second is the topic name.
pub const PROMPT_MARKER: &str = "topic:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicRate {
    pub name: String,
    pub toxic_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub topics: Vec<TopicRate>,
    pub toxic_lexicon: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// (topic, toxic rate). Anger and sadness carry the planted bias; the
/// remaining topics are near zero, with the other negative-leaning topics
/// slightly above the rest.
const DEFAULT_TOPICS: [(&str, f64); 13] = [
    ("positive", 0.003),
    ("negative", 0.03),
    ("anger", 0.131),
    ("sadness", 0.078),
    ("joy", 0.003),
    ("love", 0.003),
    ("fear", 0.02),
    ("surprise", 0.005),
    ("tech", 0.003),
    ("sport", 0.005),
    ("politics", 0.01),
    ("business", 0.003),
    ("entertainment", 0.005),
];

const TOXIC_LEXICON: [&str; 8] = [
    "idiot", "moron", "stupid", "trash", "loser", "jerk", "dumb", "scum",
];

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            topics: DEFAULT_TOPICS
                .iter()
                .map(|(name, rate)| TopicRate {
                    name: name.to_string(),
                    toxic_rate: *rate,
                })
                .collect(),
            toxic_lexicon: TOXIC_LEXICON.iter().map(|s| s.to_string()).collect(),
            min_len: 4,
            max_len: 10,
            seed: 17,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.topics {
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("duplicate topic {:?}", t.name)));
            }
            if !(0.0..=1.0).contains(&t.toxic_rate) {
                return Err(Error::Config(format!(
                    "toxic rate {} for {:?} outside [0, 1]",
                    t.toxic_rate, t.name
                )));
            }
        }
        if self.topics.is_empty() {
            return Err(Error::Config("no topics".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("sentence length bounds are invalid".into()));
        }
        Ok(())
    }

    pub fn topic_names(&self) -> Vec<String> {
        self.topics.iter().map(|t| t.name.clone()).collect()
    }

    pub fn rate(&self, topic: &str) -> Option<f64> {
        self.topics
            .iter()
            .find(|t| t.name == topic)
            .map(|t| t.toxic_rate)
    }

    pub fn lexicon_ids(&self, vocab: &Vocabulary) -> HashSet<TokenId> {
        self.toxic_lexicon
            .iter()
            .filter_map(|t| vocab.id(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub tokens: TokenSeq,
    pub topic: String,
    pub toxic: bool,
}

/// Word lists per topic: (nouns, adjectives). Verbs are shared within a
/// topic family. A few words deliberately belong to two topics.
const TOPIC_WORDS: [(&str, &[&str], &[&str]); 13] = [
    ("positive", &["meal", "service", "staff", "visit"], &["great", "excellent", "lovely", "superb"]),
    ("negative", &["refund", "service", "staff", "delay"], &["awful", "terrible", "rude", "broken"]),
    ("anger", &["boss", "neighbor", "driver", "landlord"], &["furious", "outraged", "livid", "mad"]),
    ("sadness", &["loss", "funeral", "goodbye", "tears"], &["heartbroken", "lonely", "gloomy", "down"]),
    ("joy", &["party", "holiday", "promotion", "sunshine"], &["thrilled", "delighted", "cheerful", "happy"]),
    ("love", &["partner", "wedding", "darling", "hug"], &["adored", "cherished", "devoted", "happy"]),
    ("fear", &["storm", "exam", "darkness", "stranger"], &["terrified", "scared", "nervous", "shocked"]),
    ("surprise", &["gift", "news", "twist", "visitor"], &["amazed", "astonished", "stunned", "shocked"]),
    ("tech", &["laptop", "software", "startup", "chip"], &["faster", "buggy", "wireless", "digital"]),
    ("sport", &["match", "striker", "season", "coach"], &["unbeaten", "injured", "winning", "relegated"]),
    ("politics", &["election", "minister", "policy", "news"], &["partisan", "elected", "federal", "corrupt"]),
    ("business", &["market", "startup", "profits", "merger"], &["profitable", "bullish", "quarterly", "listed"]),
    ("entertainment", &["movie", "album", "season", "celebrity"], &["hilarious", "animated", "starring", "popular"]),
];

fn family_verbs(topic: &str) -> &'static str {
    match topic {
        "positive" | "negative" => "was | seemed | felt",
        "anger" | "sadness" | "joy" | "love" | "fear" | "surprise" => "makes | leaves | keeps",
        _ => "looks | sounds | stays",
    }
}

/// The shipped grammar: `S_t -> Opener P_t Closer`, and the toxic variant
/// `X_t -> Tox P_t Closer` in which a lexicon token replaces the two-word
/// opener phrase.
pub fn default_grammar_text() -> String {
    let mut g = String::new();
    let roots: Vec<String> = TOPIC_WORDS
        .iter()
        .flat_map(|(t, _, _)| [format!("S_{t}"), format!("X_{t}")])
        .collect();
    writeln!(g, "S -> {}", roots.join(" | ")).unwrap();
    writeln!(g, "Opener -> honestly speaking | well then | so yeah | lately though | you know").unwrap();
    writeln!(g, "Tox -> {}", TOXIC_LEXICON.join(" | ")).unwrap();
    writeln!(g, "Closer -> . @3 | again . | for real .").unwrap();
    for (topic, nouns, adjs) in TOPIC_WORDS {
        writeln!(g, "S_{topic} -> Opener P_{topic} Closer").unwrap();
        writeln!(g, "X_{topic} -> Tox P_{topic} Closer").unwrap();
        writeln!(g, "P_{topic} -> N_{topic} V_{topic} A_{topic} @3 | N_{topic} V_{topic} A_{topic} A_{topic}").unwrap();
        writeln!(g, "N_{topic} -> {}", nouns.join(" | ")).unwrap();
        writeln!(g, "V_{topic} -> {}", family_verbs(topic)).unwrap();
        writeln!(g, "A_{topic} -> {}", adjs.join(" | ")).unwrap();
    }
    g
}

/// Vocabulary covering a grammar, the toxic lexicon, and the topic prompts.
pub fn build_vocabulary(grammar_text: &str, spec: &CorpusSpec) -> Result<Vocabulary> {
    let mut tokens = terminal_strings(grammar_text)?;
    tokens.extend(spec.toxic_lexicon.iter().cloned());
    tokens.push(PROMPT_MARKER.to_string());
    tokens.extend(spec.topic_names());
    Vocabulary::new(tokens)
}

/// The generation prompt for a topic: `topic: <name>`.
pub fn topic_prompt(vocab: &Vocabulary, topic: &str) -> Result<TokenSeq> {
    vocab.encode(&format!("{PROMPT_MARKER} {topic}"))
}

fn topic_seed(seed: u64, topic_index: usize) -> u64 {
    seed ^ (topic_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `n_per_topic` texts for every topic, in spec topic order.
pub fn generate_corpus(
    spec: &CorpusSpec,
    grammar: &Cfg,
    vocab: &Vocabulary,
    n_per_topic: usize,
) -> Result<Vec<LabeledText>> {
    spec.validate()?;
    if n_per_topic == 0 {
        return Err(Error::Config("n_per_topic must be at least 1".into()));
    }
    let lexicon = spec.lexicon_ids(vocab);
    let shards: Vec<Vec<LabeledText>> = spec
        .topics
        .par_iter()
        .enumerate()
        .map(|(ti, topic)| {
            let clean = grammar
                .nonterminal(&format!("S_{}", topic.name))
                .ok_or_else(|| Error::Grammar(format!("no root S_{}", topic.name)))?;
            let toxic = grammar.nonterminal(&format!("X_{}", topic.name));
            if topic.toxic_rate > 0.0 && toxic.is_none() {
                return Err(Error::Grammar(format!("no root X_{}", topic.name)));
            }
            let mut rng = Rng::new(topic_seed(spec.seed, ti));
            let mut out = Vec::with_capacity(n_per_topic);
            while out.len() < n_per_topic {
                let root = match toxic {
                    Some(x) if rng.uniform() < topic.toxic_rate => x,
                    _ => clean,
                };
                let ids = sentence(grammar, root, &mut rng, spec)?;
                let is_toxic = ids.iter().any(|id| lexicon.contains(id));
                out.push(LabeledText {
                    tokens: TokenSeq::new(ids, vocab)?,
                    topic: topic.name.clone(),
                    toxic: is_toxic,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(shards.into_iter().flatten().collect())
}

fn sentence(grammar: &Cfg, root: usize, rng: &mut Rng, spec: &CorpusSpec) -> Result<Vec<TokenId>> {
    for _ in 0..1000 {
        let ids = grammar.expand(root, rng, DEFAULT_DEPTH_CAP)?;
        if (spec.min_len..=spec.max_len).contains(&ids.len()) {
            return Ok(ids);
        }
    }
    Err(Error::Grammar(format!(
        "{} never produced a sentence of {}..={} tokens",
        grammar.name(root),
        spec.min_len,
        spec.max_len
    )))
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    topic: String,
    toxic: bool,
}

pub fn to_jsonl(texts: &[LabeledText], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for t in texts {
        let rec = Record {
            text: vocab.decode(&t.tokens),
            topic: t.topic.clone(),
            toxic: t.toxic,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str, vocab: &Vocabulary) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord { line: i + 1, reason };
        let rec: Record = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let tokens = vocab.encode(&rec.text).map_err(|e| malformed(e.to_string()))?;
        out.push(LabeledText {
            tokens,
            topic: rec.topic,
            toxic: rec.toxic,
        });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, texts: &[LabeledText], vocab: &Vocabulary) -> Result<()> {
    fs::write(path, to_jsonl(texts, vocab)).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabeledText>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text, vocab)
}

/// The shipped grammar, spec and vocabulary together.
pub struct DefaultSetup {
    pub spec: CorpusSpec,
    pub grammar_text: String,
    pub vocab: Vocabulary,
    pub grammar: Cfg,
}

pub fn default_setup() -> DefaultSetup {
    let spec = CorpusSpec::default();
    let grammar_text = default_grammar_text();
    let vocab = build_vocabulary(&grammar_text, &spec).expect("default vocabulary builds");
    let grammar = Cfg::from_text(&grammar_text, &vocab).expect("default grammar compiles");
    DefaultSetup {
        spec,
        grammar_text,
        vocab,
        grammar,
    }
}
