use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gta_core::config::EngineConfig;

const SMALL: &str = r#"
seed = 3
[corpus]
texts_per_topic = 300
[experiment]
texts_per_topic = 8
seeds = [1, 2]
thetas = [0.5, 0.005]
[bench]
texts = 5
tokens = 12
"#;

fn gta(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gta"))
        .current_dir(dir)
        .env_remove("GTA_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gta(dir, args);
    assert!(
        out.status.success(),
        "gta {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn trained() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    ok(dir.path(), &["--config", "small.toml", "make-corpus"]);
    ok(dir.path(), &["--config", "small.toml", "train"]);
    (dir, cfg)
}

/// Drops the wall-clock field so runs can be compared.
fn without_seconds(jsonl: &str) -> Vec<serde_json::Value> {
    jsonl
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        })
        .collect()
}

#[test]
fn example_config_spells_out_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg = EngineConfig::load(&path).unwrap();
    assert_eq!(cfg, EngineConfig::default());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let (dir, _) = trained();
    let d = dir.path();
    for f in ["out/vocab.txt", "out/corpus.jsonl", "out/bundle/manifest.json", "out/bundle/gate_nb.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let stdout = ok(d, &["--config", "small.toml", "generate", "--topic", "anger", "--count", "4"]);
    let lines: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for v in &lines {
        assert_eq!(v["topic"], "anger");
        assert_eq!(v["mode"], "gated");
        assert!(v["text"].as_str().unwrap().split(' ').count() >= 5);
    }

    ok(d, &["--config", "small.toml", "generate", "--count", "3", "--mode", "base", "--output", "out/g.jsonl"]);
    let csv = ok(d, &["--config", "small.toml", "eval", "--records", "out/g.jsonl"]);
    assert_eq!(csv.lines().count(), 1 + 13 + 1);
    assert!(csv.lines().last().unwrap().starts_with("average,"));

    let table = ok(d, &["--config", "small.toml", "eval"]);
    assert_eq!(table.lines().count(), 1 + 9);
    let main = fs::read_to_string(d.join("out/eval_main.csv")).unwrap();
    let topic_rows = main.lines().skip(1).filter(|l| !l.contains(",average,")).count();
    assert_eq!(topic_rows, 3 * 3 * 13);
    assert!(d.join("out/eval_main_std.csv").exists());

    ok(d, &["--config", "small.toml", "eval", "--preset", "theta-sweep"]);
    let sweep = fs::read_to_string(d.join("out/eval_theta-sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count() - 1, 3 * 2 * 14);

    let bench = ok(d, &["--config", "small.toml", "bench"]);
    let rows: Vec<&str> = bench.lines().collect();
    assert_eq!(rows[0], "mode,method,texts,tokens,lm_calls,ctg_calls,gate_calls,fire_rate,seconds,tokens_per_sec");
    assert_eq!(rows.len(), 8);
    assert!(rows[2].starts_with("ctg,gedi,5,60,60,60,0,"));
}

#[test]
fn outputs_do_not_depend_on_workers_or_reruns() {
    let (dir, _) = trained();
    let d = dir.path();
    let gen = |w: &str| ok(d, &["--config", "small.toml", "--workers", w, "generate", "--count", "6"]);
    let one = gen("1");
    assert_eq!(without_seconds(&one), without_seconds(&gen("3")));
    assert_eq!(without_seconds(&one), without_seconds(&gen("1")));

    ok(d, &["--config", "small.toml", "--workers", "1", "eval"]);
    let first = fs::read(d.join("out/eval_main.csv")).unwrap();
    ok(d, &["--config", "small.toml", "--workers", "2", "eval"]);
    assert_eq!(first, fs::read(d.join("out/eval_main.csv")).unwrap());

    // A different seed changes the generations.
    let other = ok(d, &["--config", "small.toml", "--seed", "4", "generate", "--count", "6"]);
    assert_ne!(without_seconds(&one), without_seconds(&other));
}

#[test]
fn out_flag_relocates_artifacts() {
    let (dir, _) = trained();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "--out", "elsewhere", "make-corpus"]);
    assert!(d.join("elsewhere/corpus.jsonl").exists());
    assert_eq!(
        fs::read(d.join("elsewhere/corpus.jsonl")).unwrap(),
        fs::read(d.join("out/corpus.jsonl")).unwrap()
    );
}

#[test]
fn config_env_var_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "nonsense = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gta"))
        .current_dir(dir.path())
        .env("GTA_CONFIG", "bad.toml")
        .arg("make-corpus")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[sampler]\ntop_p = 2.0\n").unwrap();
    for args in [
        vec!["train"],
        vec!["generate"],
        vec!["bench"],
        vec!["--config", "missing.toml", "make-corpus"],
        vec!["--config", "bad.toml", "make-corpus"],
        vec!["--workers", "0", "make-corpus"],
    ] {
        let out = gta(d, &args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{args:?}");
    }
}

#[test]
fn bad_arguments_and_stale_bundles_are_rejected() {
    let (dir, _) = trained();
    let d = dir.path();
    for args in [
        vec!["--config", "small.toml", "generate", "--mode", "sideways"],
        vec!["--config", "small.toml", "generate", "--method", "nope"],
        vec!["--config", "small.toml", "generate", "--topic", "cooking"],
        vec!["--config", "small.toml", "generate", "--theta", "1.5"],
        vec!["--config", "small.toml", "eval", "--preset", "nope"],
    ] {
        assert!(!gta(d, &args).status.success(), "{args:?}");
    }

    let nb = d.join("out/bundle/gate_nb.json");
    let mut text = fs::read_to_string(&nb).unwrap();
    text.push(' ');
    fs::write(&nb, text).unwrap();
    let out = gta(d, &["--config", "small.toml", "generate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale"));
}
