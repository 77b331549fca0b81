//! Generation cost benchmark.
//!
//! Invocation counters are exact and deterministic; wall-clock is
//! informational unless a cost model injects per-call latency.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::config::EngineConfig;
use crate::ctg::Method;
use crate::decoder::{CostModel, Counters, Decoder, GenerationRecord, Mode, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::text_rng;

pub const BENCH_CSV_HEADER: &str =
    "mode,method,texts,tokens,lm_calls,ctg_calls,gate_calls,fire_rate,seconds,tokens_per_sec";

/// Latency injected by `--costed` when the config leaves both delays at zero.
pub const COSTED_GATE_DELAY: Duration = Duration::from_micros(20);
pub const COSTED_CTG_DELAY: Duration = Duration::from_micros(200);

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub texts: usize,
    pub tokens: usize,
    pub topic: String,
    pub seed: u64,
    pub cost: CostModel,
    /// Spread texts over the rayon pool. Counters are unaffected, timings are.
    pub parallel: bool,
}

impl BenchOptions {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        BenchOptions {
            texts: cfg.bench.texts,
            tokens: cfg.bench.tokens,
            topic: cfg.bench.topic.clone(),
            seed: cfg.seed,
            cost: CostModel {
                gate: Duration::from_micros(cfg.bench.gate_delay_us),
                ctg: Duration::from_micros(cfg.bench.ctg_delay_us),
            },
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub method: Option<Method>,
    pub texts: usize,
    pub tokens: u64,
    pub counters: Counters,
    pub seconds: f64,
}

impl BenchRow {
    /// Share of gate calls that fired. Only defined for gated rows.
    pub fn fire_rate(&self) -> Option<f64> {
        (self.mode == Mode::Gated)
            .then(|| self.counters.ctg_calls as f64 / self.counters.gate_calls.max(1) as f64)
    }

    pub fn tokens_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.tokens as f64 / self.seconds
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, mode: Mode, method: Option<Method>) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6},{:.1}",
                r.mode.name(),
                r.method.map(Method::name).unwrap_or(""),
                r.texts,
                r.tokens,
                r.counters.lm_calls,
                r.counters.ctg_calls,
                r.counters.gate_calls,
                r.fire_rate().map(|f| f.to_string()).unwrap_or_default(),
                r.seconds,
                r.tokens_per_sec(),
            );
        }
        out
    }
}

/// Base, then always-on and gated decoding for every method.
pub fn default_cells() -> Vec<(Mode, Option<Method>)> {
    let mut cells = vec![(Mode::Base, None)];
    cells.extend(Method::ALL.iter().map(|&m| (Mode::Ctg, Some(m))));
    cells.extend(Method::ALL.iter().map(|&m| (Mode::Gated, Some(m))));
    cells
}

/// Generates `opts.texts` texts of exactly `opts.tokens` tokens per cell.
pub fn run_bench(
    bundle: &Bundle,
    cfg: &EngineConfig,
    cells: &[(Mode, Option<Method>)],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.texts == 0 || opts.tokens == 0 {
        return Err(Error::Config("bench needs at least one text and one token".into()));
    }
    let sampler = SamplerConfig {
        min_new_tokens: opts.tokens,
        max_new_tokens: opts.tokens,
        ..cfg.sampler.clone()
    };
    sampler.validate(bundle.vocab.len())?;
    let prompt = bundle.prompt(&opts.topic)?;
    let gate = bundle.gate(cfg.gate.threshold)?;

    let mut rows = Vec::with_capacity(cells.len());
    for &(mode, method) in cells {
        if mode != Mode::Base && method.is_none() {
            return Err(Error::Config(format!("{} bench cell needs a method", mode.name())));
        }
        let op = method.map(|m| bundle.operator(m, cfg));
        let mut decoder = Decoder::new(&bundle.base, &sampler).with_cost(opts.cost);
        if let Some(op) = &op {
            decoder = decoder.with_ctg(op);
        }
        if mode == Mode::Gated {
            decoder = decoder.with_gate(&gate);
        }
        let one = |i: usize| decoder.generate_with(&prompt, mode, &mut text_rng(opts.seed, 0, i));
        let started = Instant::now();
        let records: Vec<GenerationRecord> = if opts.parallel {
            (0..opts.texts).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..opts.texts).map(one).collect::<Result<_>>()?
        };
        let seconds = started.elapsed().as_secs_f64();
        let mut counters = Counters::default();
        let mut tokens = 0;
        for r in &records {
            counters += r.counters;
            tokens += r.tokens.len() as u64;
        }
        rows.push(BenchRow {
            mode,
            method: if mode == Mode::Base { None } else { method },
            texts: records.len(),
            tokens,
            counters,
            seconds,
        });
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_setup, generate_corpus};

    fn bundle() -> (EngineConfig, Bundle) {
        let cfg = EngineConfig::default();
        let setup = default_setup();
        let corpus = generate_corpus(&cfg.corpus.spec(), &setup.grammar, &setup.vocab, 300).unwrap();
        let b = Bundle::train_with(&cfg, &corpus, setup.vocab, setup.grammar).unwrap();
        (cfg, b)
    }

    #[test]
    fn counter_identities() {
        let (cfg, b) = bundle();
        let mut opts = BenchOptions::from_config(&cfg);
        opts.texts = 10;
        opts.tokens = 20;
        let report = run_bench(&b, &cfg, &default_cells(), &opts).unwrap();
        assert_eq!(report.rows.len(), 7);
        for r in &report.rows {
            assert_eq!(r.tokens, 200);
            assert_eq!(r.counters.lm_calls, 200);
            match r.mode {
                Mode::Base => assert_eq!((r.counters.ctg_calls, r.counters.gate_calls), (0, 0)),
                Mode::Ctg => assert_eq!((r.counters.ctg_calls, r.counters.gate_calls), (200, 0)),
                Mode::Gated => {
                    assert_eq!(r.counters.gate_calls, 200);
                    assert!(r.counters.ctg_calls <= 200);
                    assert_eq!(r.fire_rate().unwrap(), r.counters.ctg_calls as f64 / 200.0);
                }
            }
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with(BENCH_CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("base,,10,200,200,0,0,,"));
    }

    #[test]
    fn parallel_counters_match_serial() {
        let (cfg, b) = bundle();
        let mut opts = BenchOptions::from_config(&cfg);
        opts.texts = 8;
        opts.tokens = 15;
        let cells = [(Mode::Gated, Some(Method::Gedi))];
        let serial = run_bench(&b, &cfg, &cells, &opts).unwrap();
        opts.parallel = true;
        let par = run_bench(&b, &cfg, &cells, &opts).unwrap();
        assert_eq!(serial.rows[0].counters, par.rows[0].counters);
    }

    #[test]
    fn bad_cells_and_options() {
        let (cfg, b) = bundle();
        let mut opts = BenchOptions::from_config(&cfg);
        opts.texts = 1;
        assert!(run_bench(&b, &cfg, &[(Mode::Ctg, None)], &opts).is_err());
        opts.topic = "nope".into();
        assert!(run_bench(&b, &cfg, &[(Mode::Base, None)], &opts).is_err());
        opts.topic = "anger".into();
        opts.tokens = 0;
        assert!(run_bench(&b, &cfg, &[(Mode::Base, None)], &opts).is_err());
    }
}
