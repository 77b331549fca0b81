//! Automatic metrics over generated texts and the canned experiments.
//!
//! Metrics look at the generated continuation only, never the prompt:
//! topic accuracy and toxicity rate come from the evaluation classifiers,
//! grammar rate from the corpus grammar, perplexity from the base LM.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::classifier::{GateModel, NaiveBayes, EVAL_TOXIC_CUTOFF};
use crate::config::EngineConfig;
use crate::ctg::Method;
use crate::decoder::{Decoder, GenerationRecord, Mode};
use crate::error::{Error, Result};
use crate::grammar::Cfg;
use crate::ngram::NGramLM;
use crate::vocab::{strip_eos, Rng, TokenId};

/// Fraction of texts whose most probable class is `topic`. Ties go to the
/// class listed first.
pub fn topic_accuracy<T: AsRef<[TokenId]>>(texts: &[T], topic: &str, nb: &NaiveBayes) -> Result<f64> {
    let want = nb
        .class_index(topic)
        .ok_or_else(|| Error::MissingClass(topic.to_string()))?;
    rate(texts, |t| nb.predict(strip_eos(t)) == want)
}

/// Fraction of texts scored at or above the evaluation cutoff.
pub fn toxicity_rate<T: AsRef<[TokenId]>>(texts: &[T], nb: &NaiveBayes) -> Result<f64> {
    rate(texts, |t| nb.toxicity_score(strip_eos(t)) >= EVAL_TOXIC_CUTOFF)
}

/// Fraction of texts the grammar accepts.
pub fn grammar_rate<T: AsRef<[TokenId]>>(texts: &[T], grammar: &Cfg) -> Result<f64> {
    rate(texts, |t| grammar.recognizes(t))
}

/// Mean over texts of the continuation's perplexity given its prompt.
pub fn mean_perplexity<P, T>(items: &[(P, T)], lm: &NGramLM) -> Result<f64>
where
    P: AsRef<[TokenId]>,
    T: AsRef<[TokenId]>,
{
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = items
        .iter()
        .map(|(p, t)| {
            let t = t.as_ref();
            if t.is_empty() {
                return Err(Error::InvalidSequence("empty continuation".into()));
            }
            Ok(lm.conditional_perplexity(p.as_ref(), t))
        })
        .sum::<Result<f64>>()?;
    Ok(total / items.len() as f64)
}

fn rate<T: AsRef<[TokenId]>>(texts: &[T], hit: impl Fn(&[TokenId]) -> bool) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = texts.iter().filter(|t| hit(t.as_ref())).count();
    Ok(n as f64 / texts.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub toxicity: f64,
    pub grammar: f64,
    pub ppl: f64,
    pub n: usize,
}

impl Metrics {
    fn values(&self) -> [f64; 4] {
        [self.accuracy, self.toxicity, self.grammar, self.ppl]
    }

    fn from_values(v: [f64; 4], n: usize) -> Self {
        Metrics {
            accuracy: v[0],
            toxicity: v[1],
            grammar: v[2],
            ppl: v[3],
            n,
        }
    }
}

/// Per-topic metrics plus their unweighted mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub topics: Vec<(String, Metrics)>,
    pub average: Metrics,
}

impl EvalReport {
    pub fn topic(&self, name: &str) -> Option<&Metrics> {
        self.topics.iter().find(|(t, _)| t == name).map(|(_, m)| m)
    }

    /// One row per topic plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("topic,accuracy,toxicity,grammar,ppl,n\n");
        let rows = self
            .topics
            .iter()
            .map(|(t, m)| (t.as_str(), m))
            .chain(std::iter::once(("average", &self.average)));
        for (topic, m) in rows {
            writeln!(
                out,
                "{topic},{:.6},{:.6},{:.6},{:.6},{}",
                m.accuracy, m.toxicity, m.grammar, m.ppl, m.n
            )
            .unwrap();
        }
        out
    }

    pub fn from_topics(topics: Vec<(String, Metrics)>) -> Self {
        let k = topics.len().max(1) as f64;
        let mut sum = [0.0; 4];
        for (_, m) in &topics {
            for (s, v) in sum.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        let n = topics.iter().map(|(_, m)| m.n).sum();
        let average = Metrics::from_values(sum.map(|s| s / k), n);
        EvalReport { topics, average }
    }
}

/// Generated texts grouped by prompted topic.
pub struct TopicBatch<'a> {
    pub topic: &'a str,
    pub records: &'a [GenerationRecord],
}

/// Scores generations with the bundle's evaluation models.
pub fn evaluate(bundle: &Bundle, batches: &[TopicBatch<'_>]) -> Result<EvalReport> {
    let mut topics = Vec::with_capacity(batches.len());
    for b in batches {
        let texts: Vec<&[TokenId]> = b.records.iter().map(|r| r.text_tokens()).collect();
        let pairs: Vec<(&[TokenId], &[TokenId])> = b
            .records
            .iter()
            .map(|r| (&r.prompt[..], &r.tokens[..]))
            .collect();
        let m = Metrics {
            accuracy: topic_accuracy(&texts, b.topic, &bundle.eval_topic)?,
            toxicity: toxicity_rate(&texts, &bundle.eval_toxicity)?,
            grammar: grammar_rate(&texts, &bundle.grammar)?,
            ppl: mean_perplexity(&pairs, &bundle.base)?,
            n: texts.len(),
        };
        topics.push((b.topic.to_string(), m));
    }
    Ok(EvalReport::from_topics(topics))
}

/// One experiment cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub mode: Mode,
    pub method: Option<Method>,
    pub theta: Option<f64>,
}

impl CellSpec {
    pub fn base() -> Self {
        CellSpec {
            mode: Mode::Base,
            method: None,
            theta: None,
        }
    }

    pub fn ctg(method: Method) -> Self {
        CellSpec {
            mode: Mode::Ctg,
            method: Some(method),
            theta: None,
        }
    }

    pub fn gated(method: Method, theta: f64) -> Self {
        CellSpec {
            mode: Mode::Gated,
            method: Some(method),
            theta: Some(theta),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub per_seed: Vec<EvalReport>,
    pub mean: EvalReport,
    /// Sample standard deviation across seeds (zero with one seed).
    pub std: EvalReport,
    pub fire_rate: Option<f64>,
}

impl CellResult {
    fn from_seeds(spec: CellSpec, per_seed: Vec<EvalReport>, fire_rate: Option<f64>) -> Self {
        let first = &per_seed[0];
        let stat = |pick: &dyn Fn(&EvalReport) -> Metrics| -> (Metrics, Metrics) {
            let vals: Vec<[f64; 4]> = per_seed.iter().map(|r| pick(r).values()).collect();
            let n: usize = per_seed.iter().map(|r| pick(r).n).sum();
            let k = vals.len() as f64;
            let mut mean = [0.0; 4];
            let mut sd = [0.0; 4];
            for i in 0..4 {
                mean[i] = vals.iter().map(|v| v[i]).sum::<f64>() / k;
                if vals.len() > 1 {
                    let ss: f64 = vals.iter().map(|v| (v[i] - mean[i]).powi(2)).sum();
                    sd[i] = (ss / (k - 1.0)).sqrt();
                }
            }
            (Metrics::from_values(mean, n), Metrics::from_values(sd, n))
        };
        let mut mean_topics = Vec::new();
        let mut std_topics = Vec::new();
        for (i, (name, _)) in first.topics.iter().enumerate() {
            let (m, s) = stat(&|r: &EvalReport| r.topics[i].1);
            mean_topics.push((name.clone(), m));
            std_topics.push((name.clone(), s));
        }
        let (avg_m, avg_s) = stat(&|r: &EvalReport| r.average);
        CellResult {
            spec,
            mean: EvalReport {
                topics: mean_topics,
                average: avg_m,
            },
            std: EvalReport {
                topics: std_topics,
                average: avg_s,
            },
            per_seed,
            fire_rate,
        }
    }
}

/// Seed of text `index` of `topic_index` in experiment replicate `seed`.
/// Every cell uses the same schedule, so cells compare text by text.
pub fn text_rng(seed: u64, topic_index: usize, index: usize) -> Rng {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((topic_index as u64) << 40);
    Rng::for_text(base, index as u64)
}

/// Generates `n` texts for every topic of the bundle, in topic order.
pub fn generate_topics(
    bundle: &Bundle,
    decoder: &Decoder<'_>,
    mode: Mode,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<GenerationRecord>>> {
    let prompts: Vec<Vec<TokenId>> = bundle
        .topics
        .iter()
        .map(|t| bundle.prompt(t))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .collect();
    let records: Vec<GenerationRecord> = jobs
        .par_iter()
        .map(|&(t, i)| decoder.generate_with(&prompts[t], mode, &mut text_rng(seed, t, i)))
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<GenerationRecord>> = vec![Vec::with_capacity(n); prompts.len()];
    for ((t, _), r) in jobs.into_iter().zip(records) {
        out[t].push(r);
    }
    Ok(out)
}

/// Runs `cells` for every configured seed.
pub fn run_cells(bundle: &Bundle, cfg: &EngineConfig, cells: &[CellSpec]) -> Result<Vec<CellResult>> {
    let sampler = &cfg.sampler;
    sampler.validate(bundle.vocab.len())?;
    let n = cfg.experiment.texts_per_topic;
    let mut results = Vec::with_capacity(cells.len());
    for &spec in cells {
        let op = spec.method.map(|m| bundle.operator(m, cfg));
        let gate: Option<GateModel> = spec.theta.map(|t| bundle.gate(t)).transpose()?;
        let mut decoder = Decoder::new(&bundle.base, sampler);
        if let Some(op) = &op {
            decoder = decoder.with_ctg(op);
        }
        if let Some(g) = &gate {
            decoder = decoder.with_gate(g);
        }
        let mut per_seed = Vec::new();
        let (mut fires, mut gate_calls) = (0u64, 0u64);
        for &seed in &cfg.experiment.seeds {
            let generated = generate_topics(bundle, &decoder, spec.mode, n, seed)?;
            for r in generated.iter().flatten() {
                fires += r.counters.ctg_calls;
                gate_calls += r.counters.gate_calls;
            }
            let batches: Vec<TopicBatch<'_>> = bundle
                .topics
                .iter()
                .zip(&generated)
                .map(|(t, recs)| TopicBatch { topic: t, records: recs })
                .collect();
            per_seed.push(evaluate(bundle, &batches)?);
        }
        let fire_rate = (spec.mode == Mode::Gated).then(|| fires as f64 / gate_calls.max(1) as f64);
        results.push(CellResult::from_seeds(spec, per_seed, fire_rate));
    }
    Ok(results)
}

/// Which experiment to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Base, always-on and gated decoding for every method.
    Main,
    /// Gated decoding for every method at every configured threshold.
    ThetaSweep,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "main" => Some(Preset::Main),
            "theta-sweep" => Some(Preset::ThetaSweep),
            _ => None,
        }
    }

    pub fn cells(self, cfg: &EngineConfig) -> Vec<CellSpec> {
        match self {
            Preset::Main => {
                let mut cells = vec![CellSpec::base()];
                for m in Method::ALL {
                    cells.push(CellSpec::ctg(m));
                    cells.push(CellSpec::gated(m, cfg.gate.threshold));
                }
                cells
            }
            Preset::ThetaSweep => Method::ALL
                .into_iter()
                .flat_map(|m| cfg.experiment.thetas.iter().map(move |&t| CellSpec::gated(m, t)))
                .collect(),
        }
    }
}

pub const CSV_HEADER: &str = "mode,method,strength,theta,topic,accuracy,toxicity,grammar,ppl,n";

/// Results of one experiment preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub preset: Preset,
    pub cells: Vec<CellResult>,
    /// Configured strength per method, for reporting.
    pub strengths: Vec<(Method, f64)>,
}

pub fn run_experiment(bundle: &Bundle, cfg: &EngineConfig, preset: Preset) -> Result<Experiment> {
    let cells = run_cells(bundle, cfg, &preset.cells(cfg))?;
    let strengths = Method::ALL
        .into_iter()
        .map(|m| (m, bundle.operator(m, cfg).strength()))
        .collect();
    Ok(Experiment {
        preset,
        cells,
        strengths,
    })
}

impl Experiment {
    pub fn cell(&self, mode: Mode, method: Option<Method>, theta: Option<f64>) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.spec.mode == mode
                && (mode == Mode::Base || c.spec.method == method)
                && (theta.is_none() || c.spec.theta == theta)
        })
    }

    fn strength(&self, m: Method) -> f64 {
        self.strengths.iter().find(|(x, _)| *x == m).map_or(0.0, |(_, s)| *s)
    }

    /// Rows in report order. Base rows are repeated under every method so
    /// that each method reads as a complete block.
    fn rows(&self) -> Vec<(Mode, Method, f64, Option<f64>, &CellResult)> {
        let mut rows = Vec::new();
        for m in Method::ALL {
            for c in &self.cells {
                match c.spec.mode {
                    Mode::Base => rows.push((Mode::Base, m, 0.0, None, c)),
                    _ if c.spec.method == Some(m) => {
                        rows.push((c.spec.mode, m, self.strength(m), c.spec.theta, c))
                    }
                    _ => {}
                }
            }
        }
        rows
    }

    fn csv(&self, pick: impl Fn(&CellResult) -> &EvalReport) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (mode, method, strength, theta, cell) in self.rows() {
            let report = pick(cell);
            let theta = theta.map(|t| t.to_string()).unwrap_or_default();
            let lines = report
                .topics
                .iter()
                .map(|(t, m)| (t.as_str(), m))
                .chain(std::iter::once(("average", &report.average)));
            for (topic, m) in lines {
                writeln!(
                    out,
                    "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    mode.name(),
                    method.name(),
                    strength,
                    theta,
                    topic,
                    m.accuracy,
                    m.toxicity,
                    m.grammar,
                    m.ppl,
                    m.n
                )
                .unwrap();
            }
        }
        out
    }

    /// Across-seed means.
    pub fn to_csv(&self) -> String {
        self.csv(|c| &c.mean)
    }

    /// Across-seed standard deviations, same layout as [`Experiment::to_csv`].
    pub fn std_csv(&self) -> String {
        self.csv(|c| &c.std)
    }

    /// Human-readable summary: one line per row, averages over topics.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<6} {:<9} {:>8} {:>6} | {:>15} {:>15} {:>8} {:>8} {:>6}",
            "mode", "method", "strength", "theta", "accuracy", "toxicity", "grammar", "ppl", "fire"
        )
        .unwrap();
        for (mode, method, strength, theta, cell) in self.rows() {
            let (m, s) = (&cell.mean.average, &cell.std.average);
            writeln!(
                out,
                "{:<6} {:<9} {:>8} {:>6} | {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>8.4} {:>8.3} {:>6}",
                mode.name(),
                method.name(),
                strength,
                theta.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
                m.accuracy,
                s.accuracy,
                m.toxicity,
                s.toxicity,
                m.grammar,
                m.ppl,
                cell.fire_rate.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into()),
            )
            .unwrap();
        }
        out
    }
}
