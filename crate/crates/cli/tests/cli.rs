use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn thor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thor"))
        .args(args)
        .current_dir(dir)
        .env_remove("THOR_CONFIG")
        .env_remove("THOR_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn thor")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn runner() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/runner.py")
        .canonicalize()
        .expect("runner fixture")
        .display()
        .to_string()
}

fn write_config(dir: &Path, name: &str, script: &Value, extra: &str) -> String {
    let script_path = dir.join(format!("{name}.json"));
    fs::write(&script_path, script.to_string()).unwrap();
    let cfg = format!(
        "seed = 3\njobs = 1\n{extra}\n[client]\nkind = \"scripted\"\nscript = {script:?}\n\n\
         [sandbox]\ncmd = [\"python3\", {runner:?}]\n",
        script = script_path.display().to_string(),
        runner = runner(),
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

fn write_questions(dir: &Path) -> String {
    let path = dir.join("questions.jsonl");
    fs::write(&path, "{\"id\":\"q1\",\"question\":\"What is 2 plus 3?\",\"answer\":\"5\"}\n").unwrap();
    path.display().to_string()
}

#[test]
fn config_check_prints_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = thor(dir.path(), &["--seed", "9", "config-check"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let parsed: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(parsed["seed"].as_integer(), Some(9));
    assert_eq!(parsed["rl"]["group_size"].as_integer(), Some(16));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[rollout]\ngroup_sise = 4\n").unwrap();
    let o = thor(dir.path(), &["--config", path.to_str().unwrap(), "config-check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("group_sise"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(thor(dir.path(), &["rl-prepare"]).status.code(), Some(2));
    assert_eq!(thor(dir.path(), &["analyze", "--table", "1,2"]).status.code(), Some(2));
    assert_eq!(thor(dir.path(), &["bogus"]).status.code(), Some(2));
}

#[test]
fn analyze_reproduces_table_statistic() {
    let dir = tempfile::tempdir().unwrap();
    let o = thor(dir.path(), &["analyze", "--chi2", "--table", "3950,139,1549,318", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let chi2 = v["chi2"]["chi2"].as_f64().or_else(|| v["chi2"].as_f64()).expect("chi2 field");
    assert!((chi2 - 336.3).abs() < 0.1, "{v}");
}

#[test]
fn dry_runs_make_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    // An empty script: any client call would fail the run.
    let cfg = write_config(dir.path(), "empty", &json!({}), "");
    let q = write_questions(dir.path());
    let o = thor(dir.path(), &["--config", &cfg, "tirgen", "--questions", &q, "--out", "o", "--report", "r", "--dry-run"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1 questions"));
    let o = thor(dir.path(), &["--config", &cfg, "rollout", "--questions", &q, "--out", "o", "--dry-run"]);
    assert!(o.status.success());
    assert!(!dir.path().join("o").exists());
}

fn tirgen_script() -> Value {
    json!({
        "rules": [
            {"contains": "without using code", "reply": "Guess \\boxed{7}."},
            {"contains": "Original step", "reply": "```python\ntotal = 0\nfor v in [2, 3]:\n    total += v\nprint(total)\n```"},
            {"contains": "yes or no", "reply": "yes"},
            {"contains": "Rewrite the step", "reply": "We add the two numbers."},
            {"contains": ["Separate steps", "```output"], "reply": "So the answer is \\boxed{5}."},
            {"contains": "Separate steps", "reply": "We add 2 and 3 to get the total.\n\n"}
        ]
    })
}

fn rollout_script() -> Value {
    json!({"replies": [
        "We compute.\n```python\nprint(2 + 3)\n```\n", "So \\boxed{5}.",
        "We try.\n```python\nprint(1/0)\n```\n", "Then \\boxed{4}.",
        "Guess \\boxed{4}."
    ]})
}

fn step_script() -> Value {
    json!({"replies": [
        "Directly.\n```python\nprint(5)\n```\n",
        "Oops.\n```python\nprint(1/0)\n```\n"
    ]})
}

/// tirgen -> rollout -> rl-prepare in `dir`; returns every output file's bytes.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let q = write_questions(dir);
    let t = write_config(dir, "tirgen", &tirgen_script(), "");
    let o = thor(dir, &["--config", &t, "tirgen", "--questions", &q, "--out", "sft.jsonl", "--report", "report.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report: Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kept_count"], 1, "{report}");
    let sft = fs::read_to_string(dir.join("sft.jsonl")).unwrap();
    assert!(sft.contains("for v in [2, 3]"));

    let r = write_config(dir, "rollout", &rollout_script(), "");
    let o = thor(dir, &["--config", &r, "rollout", "--questions", &q, "--out", "groups.jsonl", "--group-size", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1 of 3 trajectories correct"), "{}", stdout(&o));

    let s = write_config(dir, "step", &step_script(), "[rl]\ngroup_size = 2\n");
    let o = thor(
        dir,
        &["--config", &s, "rl-prepare", "--rollouts", "groups.jsonl", "--out", "records.jsonl", "--step-dataset", "steps.jsonl"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["trajectory_groups"], 1, "{summary}");
    assert_eq!(summary["step_samples"], 1, "{summary}");
    assert_eq!(summary["step_groups"], 1, "{summary}");

    let records: Vec<Value> = fs::read_to_string(dir.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    for r in &records {
        let adv = r["advantage"].as_f64().unwrap();
        assert_eq!(r["in_nll_set"].as_bool().unwrap(), adv > 0.0);
    }
    ["sft.jsonl", "report.json", "groups.jsonl", "steps.jsonl", "records.jsonl"]
        .iter()
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn scripted_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn analyze_reads_group_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let q = write_questions(dir.path());
    let r = write_config(dir.path(), "rollout", &rollout_script(), "");
    let o = thor(dir.path(), &["--config", &r, "rollout", "--questions", &q, "--out", "g.jsonl", "--group-size", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = thor(dir.path(), &["analyze", "--trajectories", "g.jsonl", "--pass-at-k", "1", "--rounds", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let text = v.to_string();
    assert!(text.contains("0.333"), "{v}");
}

#[test]
fn infer_with_self_correction() {
    let dir = tempfile::tempdir().unwrap();
    let script = json!({"replies": [
        "We divide the total by two now.\n```python\nprint(10 / 0)\n```\n",
        "carefully.\n```python\nprint(10 // 2)\n```\n",
        "The answer is \\boxed{5}."
    ]});
    let cfg = write_config(dir.path(), "infer", &script, "");
    let o = thor(dir.path(), &["--config", &cfg, "infer", "--question", "Half of 10?", "--self-correct", "2", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["trajectory"]["final_answer"], "5", "{v}");
    assert_eq!(v["scores"][0]["successes"], 1, "{v}");
    assert_eq!(v["scores"][0]["calls"], 2, "{v}");
}
