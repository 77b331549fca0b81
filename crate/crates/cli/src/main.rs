use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use gta_core::bench::{default_cells, run_bench, BenchOptions, COSTED_CTG_DELAY, COSTED_GATE_DELAY};
use gta_core::bundle::Bundle;
use gta_core::config::EngineConfig;
use gta_core::corpus::{build_vocabulary, default_grammar_text, generate_corpus, read_jsonl, write_jsonl};
use gta_core::ctg::Method;
use gta_core::decoder::{CostModel, Decoder, GenerationRecord, Mode};
use gta_core::eval::{evaluate, run_experiment, text_rng, EvalReport, Preset, TopicBatch};
use gta_core::grammar::Cfg;
use gta_core::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "gta", version, about = "Gated toxicity avoidance decoding on n-gram models")]
struct Cli {
    /// Engine config (TOML). Built-in defaults are used when absent.
    #[arg(long, global = true, env = "GTA_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for generation. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary and a labeled synthetic corpus.
    MakeCorpus,
    /// Train every model and write the bundle with its manifest.
    Train,
    /// Generate texts as JSON lines.
    Generate(GenerateArgs),
    /// Score generated texts, or run a canned experiment.
    Eval(EvalArgs),
    /// Count model calls and time generation for each decoding mode.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Topic to prompt with. Every topic when absent.
    #[arg(long)]
    topic: Option<String>,
    /// base, ctg or gated.
    #[arg(long, default_value = "gated")]
    mode: String,
    /// gedi, dexperts or discup. Defaults to the config method.
    #[arg(long)]
    method: Option<String>,
    /// Gate threshold. Defaults to the config threshold.
    #[arg(long)]
    theta: Option<f64>,
    /// Texts per topic.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Output file. Standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON lines written by `generate`. Runs the experiment preset when absent.
    #[arg(long)]
    records: Option<PathBuf>,
    /// main or theta-sweep.
    #[arg(long, default_value = "main")]
    preset: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Inject per-call latency (gate and detoxifier) to model expensive models.
    #[arg(long)]
    costed: bool,
    /// Spread texts over the worker pool. Timings become noisy.
    #[arg(long)]
    parallel: bool,
}

fn load_config(cli: &Cli) -> Result<EngineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn grammar_text(cfg: &EngineConfig) -> Result<String> {
    match &cfg.paths.grammar {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading grammar {}", p.display())),
        None => Ok(default_grammar_text()),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn make_corpus(cfg: &EngineConfig) -> Result<()> {
    let spec = cfg.corpus.spec();
    let text = grammar_text(cfg)?;
    let vocab = build_vocabulary(&text, &spec)?;
    let grammar = Cfg::from_text(&text, &vocab)?;
    let corpus = generate_corpus(&spec, &grammar, &vocab, cfg.corpus.texts_per_topic)?;
    let (vpath, cpath) = (cfg.paths.vocabulary(), cfg.paths.corpus());
    write_file(&vpath, &vocab.to_text())?;
    ensure_parent(&cpath)?;
    write_jsonl(&cpath, &corpus, &vocab)?;
    eprintln!("wrote {} texts to {}", corpus.len(), cpath.display());
    Ok(())
}

fn train(cfg: &EngineConfig) -> Result<()> {
    let vocab = Vocabulary::read(&cfg.paths.vocabulary())?;
    let grammar = Cfg::from_text(&grammar_text(cfg)?, &vocab)?;
    let corpus = read_jsonl(&cfg.paths.corpus(), &vocab)?;
    let bundle = Bundle::train_with(cfg, &corpus, vocab, grammar)?;
    let dir = cfg.paths.bundle();
    let manifest = bundle.save(&dir, cfg.seed, cfg.corpus.seed, cfg.gate.split)?;
    eprintln!(
        "trained on {} texts (lm {}, gate {}, eval {}); bundle in {}",
        corpus.len(),
        manifest.split_sizes.lm,
        manifest.split_sizes.gate,
        manifest.split_sizes.eval,
        dir.display()
    );
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode> {
    Mode::parse(s).with_context(|| format!("unknown mode {s:?} (expected base, ctg or gated)"))
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).with_context(|| format!("unknown method {s:?} (expected gedi, dexperts or discup)"))
}

fn generate(cfg: &EngineConfig, args: &GenerateArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let method = match &args.method {
        Some(m) => parse_method(m)?,
        None => cfg.ctg.method,
    };
    let bundle = Bundle::load(&cfg.paths.bundle())?;
    cfg.sampler.validate(bundle.vocab.len())?;
    let topics: Vec<(usize, &String)> = match &args.topic {
        Some(t) => {
            let i = bundle
                .topics
                .iter()
                .position(|x| x == t)
                .with_context(|| format!("unknown topic {t:?}"))?;
            vec![(i, &bundle.topics[i])]
        }
        None => bundle.topics.iter().enumerate().collect(),
    };
    let op = bundle.operator(method, cfg);
    let gate = bundle.gate(args.theta.unwrap_or(cfg.gate.threshold))?;
    let decoder = Decoder::new(&bundle.base, &cfg.sampler).with_ctg(&op).with_gate(&gate);

    let mut out = String::new();
    for (ti, topic) in topics {
        let prompt = bundle.prompt(topic)?;
        // Index-ordered, so the output does not depend on the pool size.
        let records: Vec<GenerationRecord> = (0..args.count)
            .into_par_iter()
            .map(|i| decoder.generate_with(&prompt, mode, &mut text_rng(cfg.seed, ti, i)))
            .collect::<gta_core::Result<_>>()?;
        for r in records {
            let mut v = serde_json::to_value(&r)?;
            let obj = v.as_object_mut().expect("record is an object");
            obj.insert("topic".into(), json!(topic));
            obj.insert("method".into(), json!((mode != Mode::Base).then(|| method.name())));
            obj.insert("text".into(), json!(bundle.vocab.decode(r.text_tokens())));
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
    }
    match &args.output {
        Some(p) => write_file(p, &out),
        None => io::stdout().write_all(out.as_bytes()).context("writing output"),
    }
}

fn read_records(path: &Path) -> Result<Vec<(String, GenerationRecord)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let topic = v
            .get("topic")
            .and_then(Value::as_str)
            .with_context(|| format!("{}:{}: record has no topic", path.display(), i + 1))?
            .to_string();
        let r: GenerationRecord =
            serde_json::from_value(v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push((topic, r));
    }
    if out.is_empty() {
        bail!("{} has no records", path.display());
    }
    Ok(out)
}

fn eval(cfg: &EngineConfig, args: &EvalArgs) -> Result<()> {
    let bundle = Bundle::load(&cfg.paths.bundle())?;
    let out_dir = &cfg.paths.out;
    if let Some(path) = &args.records {
        let records = read_records(path)?;
        let mut grouped: Vec<(&str, Vec<GenerationRecord>)> = Vec::new();
        for (topic, r) in records {
            if !bundle.topics.contains(&topic) {
                bail!("record topic {topic:?} is not in the bundle");
            }
            match grouped.iter_mut().find(|(t, _)| *t == topic) {
                Some((_, rs)) => rs.push(r),
                None => {
                    let t = bundle.topics.iter().find(|t| **t == topic).unwrap();
                    grouped.push((t, vec![r]));
                }
            }
        }
        grouped.sort_by_key(|(t, _)| bundle.topics.iter().position(|x| x == t));
        let batches: Vec<TopicBatch<'_>> = grouped
            .iter()
            .map(|(t, rs)| TopicBatch { topic: t, records: rs })
            .collect();
        let report: EvalReport = evaluate(&bundle, &batches)?;
        let csv = report.to_csv();
        write_file(&out_dir.join("eval_records.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }

    let preset = Preset::parse(&args.preset)
        .with_context(|| format!("unknown preset {:?} (expected main or theta-sweep)", args.preset))?;
    let exp = run_experiment(&bundle, cfg, preset)?;
    let stem = format!("eval_{}", args.preset);
    write_file(&out_dir.join(format!("{stem}.csv")), &exp.to_csv())?;
    write_file(&out_dir.join(format!("{stem}_std.csv")), &exp.std_csv())?;
    print!("{}", exp.table());
    eprintln!("wrote {}/{stem}.csv and {stem}_std.csv", out_dir.display());
    Ok(())
}

fn bench(cfg: &EngineConfig, args: &BenchArgs) -> Result<()> {
    let bundle = Bundle::load(&cfg.paths.bundle())?;
    let mut opts = BenchOptions::from_config(cfg);
    opts.parallel = args.parallel;
    if args.costed && opts.cost == CostModel::default() {
        opts.cost = CostModel {
            gate: COSTED_GATE_DELAY,
            ctg: COSTED_CTG_DELAY,
        };
    }
    let report = run_bench(&bundle, cfg, &default_cells(), &opts)?;
    let csv = report.to_csv();
    write_file(&cfg.paths.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    match &cli.command {
        Command::MakeCorpus => make_corpus(&cfg),
        Command::Train => train(&cfg),
        Command::Generate(a) => generate(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Bench(a) => bench(&cfg, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
