use std::path::Path;
use std::process::{Command, Output};

fn slu(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slu"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn param_count_prints_one_integer() {
    let dir = tempfile::tempdir().unwrap();
    let out = slu(&["param-count", "--mode", "classification"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let n: usize = stdout(&out).trim().parse().unwrap();
    assert_eq!(n, slu_core::model::parameter_count(&slu_core::model::ModelConfig::default().with_mode(
        slu_core::model::Mode::Classification
    ))
    .unwrap());
}

#[test]
fn grad_check_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = slu(&["grad-check"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let line = stdout(&out);
    let x: f64 = line.trim().strip_prefix("PASS max_rel_err=").expect(&line).parse().unwrap();
    assert!(x < 1e-5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(slu(&["--bogus", "param-count"], p).status.code(), Some(1));
    assert_eq!(slu(&["param-count", "--mode", "neither"], p).status.code(), Some(1));
    assert_eq!(slu(&[], p).status.code(), Some(1));
    assert_eq!(slu(&["--help"], p).status.code(), Some(0));
    let missing = slu(&["eval", "--checkpoint", "nope.slum", "--manifest", "m.csv", "--features", "f", "--out", "o"], p);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.slum"));
    std::fs::write(p.join("bad.json"), "{").unwrap();
    assert_eq!(slu(&["--config", "bad.json", "param-count"], p).status.code(), Some(2));
    // An unreachable tolerance is a numeric failure, not a usage error.
    let strict = slu(&["grad-check", "--tolerance", "1e-300"], p);
    assert_eq!(strict.status.code(), Some(3));
    assert!(stdout(&strict).starts_with("FAIL max_rel_err="));
}

#[test]
fn generate_featurize_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("cfg.json"),
        r#"{"model":{"model_dim":8,"head_dim":4,"num_heads":2,"enc_layers":1,"dec_layers":1,"ffn_inner":8},
            "train":{"epochs":2,"warmup":20},
            "synthetic":{"domains":2,"intents":2,"slots":[2],"train":16,"eval":4,"test":4,
                         "min_duration_s":0.3,"max_duration_s":0.4,"speakers_per_split":[2,1,1]}}"#,
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let o = slu(args, p);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["--config", "cfg.json", "gen-data", "--out", "data"]);
    for split in ["train", "eval"] {
        ok(&[
            "featurize",
            "--manifest",
            &format!("data/{split}.csv"),
            "--labels",
            "data/labels.json",
            "--out",
            &format!("{split}.sluf"),
        ]);
    }
    let train = [
        "--config", "cfg.json", "train", "--train", "data/train.csv", "--eval", "data/eval.csv", "--labels",
        "data/labels.json", "--features", "train.sluf", "eval.sluf", "--out", "run",
    ];
    ok(&train);
    let metrics = std::fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ev = ok(&[
        "eval", "--checkpoint", "run/model.slum", "--manifest", "data/eval.csv", "--features", "eval.sluf", "--out",
        "ev",
    ]);
    let report: serde_json::Value = serde_json::from_str(stdout(&ev).trim()).unwrap();
    for key in ["n", "domain_acc", "intent_acc", "slot_acc", "exact_match", "violations"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["n"], 4);
    for f in ["report.json", "predictions.jsonl", "confusion_domain.csv", "confusion_intent.csv", "confusion_slot_1.csv"] {
        assert!(p.join("ev").join(f).exists(), "{f}");
    }

    let id = "eval-00000";
    let pred = ok(&["predict", "--checkpoint", "run/model.slum", "--features", "eval.sluf", "--id", id, "--attention-dir", "att"]);
    let line: serde_json::Value = serde_json::from_str(stdout(&pred).trim()).unwrap();
    assert_eq!(line["id"], id);
    assert!(p.join("att/encoder.0.self_attn.head.0.alpha.csv").exists());
    let by_wav = ok(&["predict", "--checkpoint", "run/model.slum", "--wav", &format!("data/wav/{id}.wav")]);
    let wav_line: serde_json::Value = serde_json::from_str(stdout(&by_wav).trim()).unwrap();
    assert_eq!(wav_line["tokens"], line["tokens"]);

    // Same seed, same metrics, byte for byte.
    let mut again = train;
    again[train.len() - 1] = "run2";
    ok(&again);
    assert_eq!(std::fs::read(p.join("run2/metrics.csv")).unwrap(), metrics.into_bytes());
}
