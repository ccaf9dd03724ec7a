//! End-to-end runs of the `ccrt` binary on small toy configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ccrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccrt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("ccrt runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BASE: &str = r#"
seed = 3

[backend]
kind = "toy"
toy = { init_seed = 1 }

[gateway]
provider = "mock"

[ga]
k = 4
generations = 2
parents = 4
md_samples = 2

[[steps]]
concept = "zorblax"
lambda = 0.5
iterations = 15
warmup_iterations = 5
optimizer = "adam"
learning_rate = 5e-3

[[steps]]
concept = "quintrel"
lambda = 0.5
iterations = 15
warmup_iterations = 5
optimizer = "adam"
learning_rate = 5e-3
"#;

const EVAL: &str = r#"
[eval]
metrics = ["rr-cls", "align:mock"]
images_per_prompt = 2
classifier_images = 3

[[eval.concepts]]
concept = "zorblax"
prompts = ["a painting in the style of zorblax", "a portrait of a woman by zorblax"]
absent_prompts = ["a painting in the style of valdrin", "a portrait of a woman by moskel"]
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = ccrt(args);
    assert_eq!(o.status.code(), Some(0), "{args:?} failed: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn calibrate_writes_a_reproducible_calibration_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", BASE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["--config", s(&cfg), "--out", s(&a), "calibrate"]);
    run_ok(&["--config", s(&cfg), "--out", s(&b), "calibrate"]);

    let file = |root: &Path| root.join("calibration").join("step-1-zorblax.jsonl");
    let text = fs::read_to_string(file(&a)).unwrap();
    assert!(!text.trim().is_empty());
    assert_eq!(text.lines().count(), 4, "k prompts expected");
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(!v["prompt"].as_str().unwrap().is_empty());
        assert!(v["md"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(fs::read(file(&a)).unwrap(), fs::read(file(&b)).unwrap());
    assert!(a.join("calibration").join("step-1-zorblax.ga.json").is_file());
    let m = json(&a.join("manifests").join("calibrate.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_digest"], json(&b.join("manifests").join("calibrate.json"))["config_digest"]);
}

#[test]
fn invalid_config_exits_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &BASE.replacen("lambda = 0.5", "lambda = -1.0", 1));
    let out = dir.path().join("out");
    let o = ccrt(&["--config", s(&cfg), "--out", s(&out), "calibrate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("steps[0].lambda"), "{err}");
    assert!(err.contains("bad.toml:"), "{err}");
    // nothing ran, so nothing was created
    assert!(!out.join("checkpoints").exists());

    let typo = write_config(dir.path(), "typo.toml", &BASE.replacen("md_samples", "md_sample", 1));
    let o = ccrt(&["--config", s(&typo), "--out", s(&out), "remove"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    assert_eq!(ccrt(&["remove"]).status.code(), Some(2));
    assert_eq!(ccrt(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn remove_records_lineage_and_resumes_to_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", BASE);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    run_ok(&["--config", s(&cfg), "--out", s(&full), "remove"]);

    let manifest = |root: &Path, id: &str| json(&root.join("checkpoints").join(id).join("manifest.json"));
    let m1 = manifest(&full, "step-1-zorblax");
    let m2 = manifest(&full, "step-2-quintrel");
    assert_eq!(m1["parent_id"], "teacher");
    assert_eq!(m2["parent_id"], "step-1-zorblax");
    assert_eq!(m2["removed_concepts"], serde_json::json!(["zorblax", "quintrel"]));
    assert_eq!(manifest(&full, "teacher")["role"], "teacher-frozen");
    assert_eq!(fs::read_to_string(full.join("logs").join("step-2-quintrel.jsonl")).unwrap().lines().count(), 15);

    run_ok(&["--config", s(&cfg), "--out", s(&split), "remove", "--stop-after", "1"]);
    assert!(!split.join("checkpoints").join("step-2-quintrel").exists());
    run_ok(&["--config", s(&cfg), "--out", s(&split), "remove", "--resume"]);
    assert_eq!(manifest(&split, "step-2-quintrel")["content_hash"], m2["content_hash"]);
    assert_eq!(json(&split.join("manifests").join("remove.json"))["status"], "ok");
}

#[test]
fn missing_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let text = BASE.replacen("kind = \"toy\"", &format!("kind = \"checkpoint\"\nrun = {:?}", s(&empty)), 1);
    let cfg = write_config(dir.path(), "ckpt.toml", &text);
    let o = ccrt(&["--config", s(&cfg), "--out", s(&dir.path().join("out")), "remove"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("backend.run"));

    let with_eval = write_config(dir.path(), "eval.toml", &format!("{BASE}{EVAL}"));
    let o = ccrt(&["--config", s(&with_eval), "--out", s(&empty), "eval"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(json(&empty.join("manifests").join("eval.json"))["status"], "failed");
}

fn tail_mean(values: &[f64]) -> f64 {
    let tail = &values[values.len().saturating_sub(10)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
fn report_matches_a_recomputation_from_the_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &format!("{BASE}{EVAL}"));
    let out = dir.path().join("run");
    run_ok(&["--config", s(&cfg), "--out", s(&out), "remove"]);

    // before evaluation: no metric columns at all
    run_ok(&["report", s(&out)]);
    let md = fs::read_to_string(out.join("reports").join("summary.md")).unwrap();
    let header = md.lines().next().unwrap();
    assert_eq!(header.matches('|').count(), 8, "{header}");
    assert!(!out.join("reports").join("plots").join("metrics.svg").exists());

    run_ok(&["--config", s(&cfg), "--out", s(&out), "eval"]);
    let printed = run_ok(&["--out", s(&out), "report"]);
    assert!(String::from_utf8_lossy(&printed.stdout).contains("zorblax/rr-cls"));

    let summary = json(&out.join("reports").join("summary.json"));
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3, "teacher plus two steps");
    for row in rows {
        let id = row["checkpoint"].as_str().unwrap();
        let report = json(&out.join("reports").join(id).join("zorblax.json"));
        for m in report["metrics"].as_array().unwrap() {
            let key = format!("zorblax/{}", m["name"].as_str().unwrap());
            assert_eq!(row["metrics"][&key], m["value"], "{id} {key}");
            // the stored value is the mean of the raw per-image records
            let raw = m["raw"].as_array().unwrap();
            let field = if m["name"] == "rr-cls" { "prediction" } else { "score" };
            let mean = raw.iter().map(|r| r[field].as_f64().unwrap()).sum::<f64>() / raw.len() as f64;
            assert!((mean - m["value"].as_f64().unwrap()).abs() < 1e-12);
        }
        if id == "teacher" {
            assert_eq!(row["iterations"], 0);
            continue;
        }
        let log = fs::read_to_string(out.join("logs").join(format!("{id}.jsonl"))).unwrap();
        let entries: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(row["iterations"], entries.len());
        for (col, field) in [("final_loss_rm", "loss_rm"), ("final_loss_reg", "loss_reg"), ("final_loss_total", "loss_total")] {
            let values: Vec<f64> = entries.iter().map(|e| e[field].as_f64().unwrap()).collect();
            let got = row[col].as_f64().unwrap();
            assert!((got - tail_mean(&values)).abs() < 1e-12, "{id} {col}: {got}");
        }
    }
    let plots = out.join("reports").join("plots");
    for f in ["step-1-zorblax-loss.svg", "step-2-quintrel-loss.svg", "metrics.svg"] {
        let svg = fs::read_to_string(plots.join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"), "{f}");
    }
}

#[test]
fn report_on_an_empty_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccrt(&["report", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no loss logs"));
}

#[test]
fn eval_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "job.cfg", &format!("{BASE}{EVAL}"));
    let out = dir.path().join("run");
    run_ok(&["--job", s(&cfg), "--out", s(&out), "remove", "--stop-after", "1"]);

    let prompts = write_config(dir.path(), "prompts.txt", "a castle painted by zorblax\n\na zorblax sunset\n");
    run_ok(&[
        "--job", s(&cfg), "--out", s(&out), "eval",
        "--checkpoint", "step-1-zorblax",
        "--prompts", s(&prompts),
        "--metrics", "rr-cls, align:mock",
    ]);
    let reports = out.join("reports");
    assert!(!reports.join("teacher").exists(), "only the named checkpoint is evaluated");
    let report = json(&reports.join("step-1-zorblax").join("zorblax.json"));
    let names: Vec<&str> = report["metrics"].as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["rr-cls", "align:mock"]);
    // two prompts from the file, two images each
    assert_eq!(report["metrics"][0]["n"], 4);

    let o = ccrt(&["--job", s(&cfg), "--out", s(&out), "eval", "--metrics", "rr-bogus"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
