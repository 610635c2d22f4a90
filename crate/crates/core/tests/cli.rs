use std::path::Path;
use std::process::{Command, Output};

fn pathlm(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pathlm"));
    cmd.current_dir(dir)
        .args(args)
        .env_remove("PATHLM_SEED")
        .env_remove("RUST_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pathlm(dir, args, &[]);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn corpus(dir: &Path) {
    ok(dir, &["-q", "synth", "--n-reports", "200", "--output", "reports.jsonl"]);
    ok(
        dir,
        &[
            "-q",
            "preprocess",
            "--input",
            "reports.jsonl",
            "--output",
            "el.jsonl",
            "--split-dir",
            "split",
        ],
    );
    ok(
        dir,
        &[
            "-q",
            "train-vocab",
            "--input",
            "split/train.jsonl",
            "--output",
            "vocab.txt",
            "--vocab-size",
            "500",
        ],
    );
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for sub in [
        "preprocess",
        "train-vocab",
        "coverage",
        "pretrain",
        "finetune",
        "eval-mlm",
        "eval-cls",
        "dump",
        "synth",
    ] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = pathlm(d, &["train-vocab", "--input", "nope.jsonl", "--output", "v.txt"], &[]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.jsonl"));
    assert!(!d.join("v.txt").exists());
    assert_eq!(pathlm(d, &["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(pathlm(d, &["synth"], &[]).status.code(), Some(2));

    std::fs::write(d.join("bad.json"), r#"{"pretrain": {"learning_rate": 1}}"#).unwrap();
    let bad = pathlm(
        d,
        &[
            "--config",
            "bad.json",
            "synth",
            "--n-reports",
            "3",
            "--output",
            "r.jsonl",
        ],
        &[],
    );
    assert_eq!(bad.status.code(), Some(2));
    let bad_env = pathlm(
        d,
        &["synth", "--n-reports", "3", "--output", "r.jsonl"],
        &[("PATHLM_SEED", "x")],
    );
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = |name: &str, extra: &[&str], env: &[(&str, &str)]| -> Vec<u8> {
        let mut args = extra.to_vec();
        args.extend(["-q", "synth", "--n-reports", "20", "--output", name]);
        let out = pathlm(d, &args, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(d.join(name)).unwrap()
    };
    std::fs::write(d.join("seed3.json"), r#"{"seed": 3}"#).unwrap();
    let flag = synth("a.jsonl", &["--seed", "3"], &[]);
    assert_eq!(flag, synth("b.jsonl", &[], &[("PATHLM_SEED", "3")]));
    assert_eq!(flag, synth("c.jsonl", &["--config", "seed3.json"], &[]));
    assert_eq!(
        flag,
        synth(
            "d.jsonl",
            &["--seed", "3", "--config", "seed3.json"],
            &[("PATHLM_SEED", "3")]
        )
    );
    let four = synth("e.jsonl", &["--seed", "4"], &[]);
    assert_ne!(flag, four);
    assert_eq!(
        four,
        synth(
            "f.jsonl",
            &["--seed", "4", "--config", "seed3.json"],
            &[("PATHLM_SEED", "3")]
        )
    );
    assert_ne!(flag, synth("g.jsonl", &[], &[]));
}

#[test]
fn manifest_records_config_inputs_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    std::fs::write(
        d.join("run.json"),
        r#"{"pretrain": {"batch_size": 8}, "model": {"hidden_dim": 16, "ff_dim": 32}}"#,
    )
    .unwrap();
    let summary = ok(
        d,
        &[
            "-q",
            "--config",
            "run.json",
            "--manifest",
            "m.json",
            "pretrain",
            "--train",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--output",
            "p.plmc",
            "--steps",
            "3",
            "--lr",
            "1e-3",
            "--eval-every",
            "0",
        ],
    );
    assert_eq!(summary.lines().count(), 1, "{summary}");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["config"]["seed"], 42);
    assert_eq!(m["config"]["pretrain"]["batch_size"], 8);
    assert_eq!(m["config"]["pretrain"]["total_steps"], 3);
    assert_eq!(m["config"]["pretrain"]["lr"], 1e-3);
    assert_eq!(m["config"]["model"]["hidden_dim"], 16);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["details"]["vocab_hash"].as_str().unwrap().len(), 64);
    assert!(m["timing"]["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let out = pathlm(
        d,
        &[
            "-q",
            "pretrain",
            "--train",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--output",
            "p.plmc",
            "--steps",
            "40",
            "--lr",
            "1e30",
            "--hidden",
            "16",
            "--ff",
            "32",
            "--eval-every",
            "0",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverge"));
    assert!(!d.join("p.plmc").exists());
}

#[test]
fn wrong_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    ok(
        d,
        &[
            "-q",
            "pretrain",
            "--train",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--output",
            "p.plmc",
            "--steps",
            "0",
            "--hidden",
            "16",
            "--ff",
            "32",
        ],
    );
    ok(
        d,
        &[
            "-q",
            "train-vocab",
            "--input",
            "split/train.jsonl",
            "--output",
            "other.txt",
            "--vocab-size",
            "400",
        ],
    );
    let out = pathlm(
        d,
        &[
            "eval-mlm",
            "--checkpoint",
            "p.plmc",
            "--vocab",
            "other.txt",
            "--input",
            "split/test.jsonl",
            "--output-dir",
            "mlm",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}
