//! Engine configuration file (TOML).
//!
//! Every section has defaults, so an empty file is valid. Unknown keys are
//! rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::DEFAULT_GATE_THRESHOLD;
use crate::corpus::{CorpusSpec, TopicRate};
use crate::ctg::{GediPrior, Method};
use crate::decoder::SamplerConfig;
use crate::error::{Error, Result};
use crate::ngram::Smoothing;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub ctg: CtgConfig,
    pub gate: GateConfig,
    pub sampler: SamplerConfig,
    pub experiment: ExperimentConfig,
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Grammar file. When absent the built-in grammar is used.
    pub grammar: Option<PathBuf>,
    /// The artifact paths below are relative to `out` unless absolute.
    pub vocabulary: PathBuf,
    pub corpus: PathBuf,
    pub bundle: PathBuf,
    pub out: PathBuf,
}

impl PathsConfig {
    pub fn vocabulary(&self) -> PathBuf {
        self.out.join(&self.vocabulary)
    }

    pub fn corpus(&self) -> PathBuf {
        self.out.join(&self.corpus)
    }

    pub fn bundle(&self) -> PathBuf {
        self.out.join(&self.bundle)
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            grammar: None,
            vocabulary: "vocab.txt".into(),
            corpus: "corpus.jsonl".into(),
            bundle: "bundle".into(),
            out: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub texts_per_topic: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub toxic_lexicon: Vec<String>,
    pub topics: Vec<TopicRate>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig::from_spec(&CorpusSpec::default(), 10_000)
    }
}

impl CorpusConfig {
    pub fn from_spec(spec: &CorpusSpec, texts_per_topic: usize) -> Self {
        CorpusConfig {
            texts_per_topic,
            min_len: spec.min_len,
            max_len: spec.max_len,
            seed: spec.seed,
            toxic_lexicon: spec.toxic_lexicon.clone(),
            topics: spec.topics.clone(),
        }
    }

    pub fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            topics: self.topics.clone(),
            toxic_lexicon: self.toxic_lexicon.clone(),
            min_len: self.min_len,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub order: usize,
    pub add_k: f64,
    /// Interpolation weights, lowest order first. Equal weights if absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: 4,
            add_k: 0.01,
            weights: Some(vec![0.02, 0.03, 0.05, 0.9]),
        }
    }
}

impl LmConfig {
    pub fn smoothing(&self) -> Smoothing {
        match &self.weights {
            Some(w) => Smoothing {
                add_k: self.add_k,
                weights: w.clone(),
            },
            None => Smoothing::uniform(self.order.max(1), self.add_k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtgConfig {
    pub method: Method,
    pub omega: f64,
    pub alpha: f64,
    pub gedi_prior: GediPrior,
}

impl Default for CtgConfig {
    fn default() -> Self {
        CtgConfig {
            method: Method::Gedi,
            omega: 30.0,
            alpha: 1.0,
            gedi_prior: GediPrior::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub threshold: f64,
    /// Fractions for (LM and detoxifier training, gate training, evaluation).
    pub split: [f64; 3],
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            threshold: DEFAULT_GATE_THRESHOLD,
            split: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub texts_per_topic: usize,
    /// One full experiment per seed; reports give mean and spread.
    pub seeds: Vec<u64>,
    pub thetas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            texts_per_topic: 1000,
            seeds: vec![1, 2, 3, 4, 5],
            thetas: vec![0.5, 0.1, 0.01, 0.005],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub texts: usize,
    pub tokens: usize,
    pub topic: String,
    /// Artificial latency per gate call, in microseconds (costed mode).
    pub gate_delay_us: u64,
    /// Artificial latency per detoxifier call, in microseconds.
    pub ctg_delay_us: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            texts: 100,
            tokens: 100,
            topic: "anger".into(),
            gate_delay_us: 0,
            ctg_delay_us: 0,
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.spec().validate()?;
        if self.corpus.texts_per_topic == 0 {
            return Err(Error::Config("corpus.texts_per_topic must be at least 1".into()));
        }
        if self.lm.order == 0 {
            return Err(Error::Config("lm.order must be at least 1".into()));
        }
        if let Some(w) = &self.lm.weights {
            if w.len() != self.lm.order {
                return Err(Error::Config(format!(
                    "lm.weights has {} entries for order {}",
                    w.len(),
                    self.lm.order
                )));
            }
        }
        if !(self.lm.add_k > 0.0 && self.lm.add_k.is_finite()) {
            return Err(Error::Config("lm.add_k must be positive".into()));
        }
        for (name, v) in [("ctg.omega", self.ctg.omega), ("ctg.alpha", self.ctg.alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        check_theta(self.gate.threshold)?;
        for &t in &self.experiment.thetas {
            check_theta(t)?;
        }
        let s = self.gate.split;
        if s.iter().any(|f| !(*f > 0.0)) || ((s[0] + s[1] + s[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("gate.split {s:?} must be positive and sum to 1")));
        }
        if self.sampler.top_k == 0 {
            return Err(Error::Config("sampler.top_k must be at least 1".into()));
        }
        // The remaining sampler checks need the vocabulary size.
        let probe = SamplerConfig {
            top_k: 1,
            ..self.sampler.clone()
        };
        probe.validate(1)?;
        if self.experiment.texts_per_topic == 0 || self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment needs texts and at least one seed".into()));
        }
        if self.bench.texts == 0 || self.bench.tokens == 0 {
            return Err(Error::Config("bench.texts and bench.tokens must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_theta(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("gate threshold {t} not in (0, 1)")))
    }
}
