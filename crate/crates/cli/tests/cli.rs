use std::path::Path;
use std::process::{Command, Output};

fn dmwp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmwp"))
        .args(args)
        .current_dir(dir)
        .env_remove("DMWP_EPOCHS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] =
    &["--epochs", "3", "--embed-dim", "8", "--hidden-dim", "8", "--batch-size", "8", "--refresh-period", "2"];

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth", "wda", "augment", "train", "eval", "kfold", "ablate", "inspect-buffer", "convert"] {
        let o = dmwp(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(stdout(&o).contains("Usage: dmwp"), "{sub}");
    }
    assert_eq!(code(&dmwp(dir.path(), &["--version"])), 0);
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dmwp(dir.path(), &[])), 1);
    assert_eq!(code(&dmwp(dir.path(), &["train", "--input", "x.jsonl"])), 1);
    assert_eq!(code(&dmwp(dir.path(), &["synth", "--out", "c.jsonl", "--n", "not-a-number"])), 1);
    assert_eq!(code(&dmwp(dir.path(), &["synth", "--out", "c.jsonl", "--templates", "nope"])), 1);
    assert_eq!(code(&dmwp(dir.path(), &["train", "--input", "missing.jsonl", "--out", "run"])), 2);

    std::fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&dmwp(dir.path(), &["train", "--input", "bad.jsonl", "--out", "run"])), 2);

    assert_eq!(code(&dmwp(dir.path(), &["synth", "--n", "30", "--out", "c.jsonl"])), 0);
    // Invalid values and inconsistent schedules are usage errors.
    let o = dmwp(dir.path(), &["train", "--input", "c.jsonl", "--out", "run", "--mode", "banana"]);
    assert_eq!(code(&o), 1);
    let o = dmwp(dir.path(), &["train", "--input", "c.jsonl", "--out", "run", "--epochs", "2", "--stage-switch", "5"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_train_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dmwp(d, &["--seed", "4", "synth", "--n", "40", "--answer-only", "0.5", "--out", "c.jsonl"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("semi-weak"), "{}", stdout(&o));

    let mut args = vec!["--seed", "4", "train", "--input", "c.jsonl", "--test", "c.jsonl", "--use-wda", "--out", "run"];
    args.extend_from_slice(SMALL);
    let o = dmwp(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.json", "metrics.csv", "events.jsonl", "buffers.jsonl", "solver.ckpt", "disc.ckpt", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["mode"], "semi-weak");
    assert_eq!(cfg["use_wda"], true);

    let o = dmwp(d, &["eval", "--model", "run", "--input", "c.jsonl", "--out", "eval.json"]);
    assert_eq!(code(&o), 0);
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(eval, metrics["eval"]);

    let first = std::fs::read_to_string(d.join("c.jsonl")).unwrap();
    let id = serde_json::from_str::<serde_json::Value>(first.lines().next().unwrap()).unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string();
    let o = dmwp(d, &["inspect-buffer", "--buffers", "run/buffers.jsonl", "--id", &id, "--input", "c.jsonl"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("weight"));
    let o = dmwp(d, &["inspect-buffer", "--buffers", "run/buffers.jsonl", "--id", "no-such-problem"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn flags_override_environment_which_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&dmwp(d, &["synth", "--n", "16", "--out", "c.jsonl"])), 0);
    std::fs::write(
        d.join("cfg.json"),
        r#"{"epochs": 5, "stage_switch": 1, "batch_size": 8, "solver": {"embed_dim": 8, "hidden_dim": 8, "num_constants": 2}}"#,
    )
    .unwrap();
    let epochs = |run: &str| {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(run).join("config.json")).unwrap()).unwrap();
        m["epochs"].as_u64().unwrap()
    };
    let base = ["--config", "cfg.json", "train", "--input", "c.jsonl"];

    let o = dmwp(d, &[&base[..], &["--out", "a"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(epochs("a"), 5);

    let with_env = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_dmwp")).args(args).current_dir(d).env("DMWP_EPOCHS", "2").output().unwrap()
    };
    assert_eq!(code(&with_env(&[&base[..], &["--out", "b"]].concat())), 0);
    assert_eq!(epochs("b"), 2);
    assert_eq!(code(&with_env(&[&base[..], &["--out", "c", "--epochs", "3"]].concat())), 0);
    assert_eq!(epochs("c"), 3);

    std::fs::write(d.join("typo.json"), r#"{"epoch": 5}"#).unwrap();
    let o = dmwp(d, &["--config", "typo.json", "train", "--input", "c.jsonl", "--out", "t"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn wda_and_augment_write_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&dmwp(d, &["synth", "--n", "12", "--out", "c.jsonl"])), 0);
    let o = dmwp(d, &["wda", "--input", "c.jsonl", "--all", "--out", "w.jsonl"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(d.join("w.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().all(|l| l["status"] == "found"));

    let o = dmwp(d, &["augment", "--input", "c.jsonl", "--lambda", "0.5", "--out", "a.jsonl"]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(d.join("a.jsonl")).unwrap();
    assert!(text.lines().count() > 0);
    assert_eq!(code(&dmwp(d, &["augment", "--input", "c.jsonl", "--lambda", "2", "--out", "a.jsonl"])), 1);
}

#[test]
fn convert_keeps_verified_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("legacy.json"),
        r#"[{"id": 7, "original_text": "A bag holds 12 pens and 30 pencils.", "equation": "x=12+30", "ans": "42"},
            {"id": 8, "original_text": "A box holds 5 cups.", "equation": "x=5*2", "ans": "11"}]"#,
    )
    .unwrap();
    let o = dmwp(d, &["convert", "--input", "legacy.json", "--out", "out.jsonl"]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(d.join("out.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(rec["id"], "7");
    assert_eq!(rec["equation"], "12+30");
}

#[test]
fn kfold_and_ablate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&dmwp(d, &["synth", "--n", "20", "--out", "c.jsonl"])), 0);
    let mut args = vec!["kfold", "--input", "c.jsonl", "--folds", "2", "--out", "kf"];
    args.extend_from_slice(SMALL);
    let o = dmwp(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("kf/kfold.csv").exists());
    assert!(stdout(&o).contains("mean"));

    let mut args = vec!["ablate", "--input", "c.jsonl", "--folds", "4", "--variants", "full_method,gold_only", "--out", "ab"];
    args.extend_from_slice(SMALL);
    let o = dmwp(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ab/ablate.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["mean"]["gold_only"].is_array());
    let mut bad = vec!["ablate", "--input", "c.jsonl", "--variants", "bogus", "--out", "ab"];
    bad.extend_from_slice(SMALL);
    assert_eq!(code(&dmwp(d, &bad)), 1);
}
