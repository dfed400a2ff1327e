use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_peft-forge")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(args: &[&str]) -> String {
    String::from_utf8(run(args).stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn count_params_reports_reference_roster() {
    let text = stdout(&["count-params"]);
    for needle in ["0.007", "0.306", "0.824", "0.096", "0.045"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let json: serde_json::Value = serde_json::from_str(&stdout(&["count-params", "--model", "tiny", "--config", r#"{"method":"LoRA","rank":2}"#, "--json"])).unwrap();
    assert!(json.to_string().contains("LoRA"));
}

#[test]
fn synth_linearize_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.json");
    run(&["synth", "--kind", "restaurant", "--train", "30", "--dev", "5", "--test", "5", "--seed", "2", "--out", p(&corpus)]);

    let lines = stdout(&["linearize", "--input", p(&corpus), "--split", "dev"]);
    assert_eq!(lines.lines().count(), 5);
    assert!(lines.lines().all(|l| l.contains("\t<S> name <V> ")));

    let sample = dir.path().join("sample.json");
    run(&["sample", "--input", p(&corpus), "--scheme", "slot_count", "--shots", "2", "--seed", "1", "--out", p(&sample)]);
    let again = dir.path().join("again.json");
    run(&["sample", "--input", p(&corpus), "--scheme", "slot_count", "--shots", "2", "--seed", "1", "--out", p(&again)]);
    assert_eq!(std::fs::read(&sample).unwrap(), std::fs::read(&again).unwrap());

    let cands = dir.path().join("cands.txt");
    let refs = dir.path().join("refs.txt");
    std::fs::write(&cands, "the cat sat on the mat\na dog ran home today\n").unwrap();
    std::fs::write(&refs, "the cat sat on the mat\na dog ran home today\n").unwrap();
    let report: serde_json::Value = serde_json::from_str(&stdout(&["eval", "--cands", p(&cands), "--refs", p(&refs)])).unwrap();
    assert_eq!(report["scores"]["BLEU"]["value"].as_f64().unwrap().round(), 100.0);
    assert_eq!(report["scores"]["TER"]["value"].as_f64().unwrap(), 0.0);
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.json");
    run(&["synth", "--kind", "knowledge-graph", "--train", "20", "--dev", "4", "--test", "4", "--out", p(&corpus)]);
    let spec = dir.path().join("spec.json");
    let spec_json = serde_json::json!({
        "dataset": corpus, "scheme": "category", "shots": 2, "peft": {"method": "IA3"},
        "model": "tiny", "max_steps": 4, "eval_every": 2, "dev_cap": 4, "max_decode_len": 8,
        "sampling_reps": 1, "seeds": 1, "output_dir": dir.path().join("out"),
    });
    std::fs::write(&spec, spec_json.to_string()).unwrap();
    let ckpt = dir.path().join("ckpt");
    let result: serde_json::Value = serde_json::from_str(&stdout(&["train", "--spec", p(&spec), "--checkpoint", p(&ckpt)])).unwrap();
    assert_eq!(result["status"]["state"], "completed");
    assert!(ckpt.join("manifest.json").exists());

    let grid = stdout(&["grid", "--spec", p(&spec)]);
    assert!(grid.contains("dev_BLEU"), "{grid}");
    let results = dir.path().join("out/grid/results.jsonl");
    let report: serde_json::Value = serde_json::from_str(&stdout(&["report", "--in", p(&results), "--json"])).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_peft-forge")).args(["linearize", "--input", "/nonexistent.json"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
