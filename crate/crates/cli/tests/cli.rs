use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use cfsched::{generate_counterfactuals, FeaturePolicy, Forest, TaskSpec};
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_cfsched");

const SLOW_TASK: &str =
    r#"{"task_id":"golden","task_type":"bpa","cpu_cores":2,"mem_alloc":8,"replicas":1,"deadline_s":60}"#;
const GENEROUS_TASK: &str =
    r#"{"task_id":"roomy","task_type":"bpa","cpu_cores":16,"mem_alloc":64,"replicas":8,"deadline_s":600}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn cfsched")
}

fn run_with_stdin(args: &[&str], stdin: &[u8]) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn cfsched");
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// Synthesizes a history and pipes it into `train`, returning the model path.
fn trained_model(dir: &Path) -> PathBuf {
    let history = run(&["synth", "--n", "2000", "--seed", "7"]);
    assert_ok(&history);
    let model = dir.join("model.json");
    let trained = run_with_stdin(
        &["train", "--out", model.to_str().unwrap(), "--n-trees", "50", "--seed", "7"],
        &history.stdout,
    );
    assert_ok(&trained);
    assert!(stdout(&trained).starts_with("trained 50 trees on 2000 instances"));
    model
}

fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected);
}

#[test]
fn synth_train_explain_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let model = model.to_str().unwrap();

    let table = run(&["explain", "--model", model, "--task", SLOW_TASK]);
    assert_ok(&table);
    golden("explain_table.txt", &stdout(&table));

    let json = run(&["explain", "--model", model, "--task", SLOW_TASK, "--json"]);
    assert_ok(&json);
    let forest = Forest::load(Path::new(model)).unwrap();
    let task: TaskSpec = serde_json::from_str(SLOW_TASK).unwrap();
    let set = generate_counterfactuals(&forest, &task, &FeaturePolicy::default(), forest.grid()).unwrap();
    let mut expected = serde_json::to_vec(&set).unwrap();
    expected.push(b'\n');
    assert_eq!(json.stdout, expected);
}

#[test]
fn policy_flags_reach_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let model = model.to_str().unwrap();
    let o = run(&[
        "explain", "--model", model, "--task", SLOW_TASK, "--json", "--mutable", "cpu_cores", "--q", "2",
    ]);
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let cfs = v["counterfactuals"].as_array().unwrap();
    assert!(!cfs.is_empty() && cfs.len() <= 2);
    for cf in cfs {
        for action in cf["actions"].as_array().unwrap() {
            assert_eq!(action["feature"], "cpu_cores");
        }
    }
    let bad = run(&["explain", "--model", model, "--task", SLOW_TASK, "--tau-prox", "-1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn schedulable_task_is_reported_as_such() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let o = run(&["explain", "--model", model.to_str().unwrap(), "--task", GENEROUS_TASK]);
    assert_ok(&o);
    assert!(stdout(&o).contains("task is schedulable as requested"), "{}", stdout(&o));
}

#[test]
fn task_can_be_read_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let task = dir.path().join("task.json");
    fs::write(&task, SLOW_TASK).unwrap();
    let from_file = run(&["explain", "--model", model.to_str().unwrap(), "--task", task.to_str().unwrap()]);
    let inline = run(&["explain", "--model", model.to_str().unwrap(), "--task", SLOW_TASK]);
    assert_ok(&from_file);
    assert_eq!(from_file.stdout, inline.stdout);
}

#[test]
fn whatif_matches_forest_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let forest = Forest::load(&model).unwrap();
    let o = run(&[
        "whatif", "--model", model.to_str().unwrap(), "--cpu", "4", "--mem", "16", "--replicas", "2", "--deadline",
        "120", "--json",
    ]);
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let p = forest.predict(&[4.0, 16.0, 2.0, 120.0]).unwrap();
    assert_eq!(v["predicted_label"], p.label);
    assert_eq!(v["vote_fraction"].as_f64().unwrap(), p.vote_fraction);

    let off = run(&[
        "whatif", "--model", model.to_str().unwrap(), "--cpu", "2.5", "--mem", "16", "--replicas", "2", "--deadline",
        "120",
    ]);
    assert_eq!(off.status.code(), Some(1));
    assert!(stderr(&off).contains("nearest allowed value: 2"), "{}", stderr(&off));
}

#[test]
fn feasible_csv_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let out = dir.path().join("rows.csv");
    let o = run(&[
        "feasible", "--model", model.to_str().unwrap(), "--task", SLOW_TASK, "--out", out.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 769);
    assert_eq!(lines[0], "cpu_cores,mem_alloc,replicas,deadline_s,label,vote_fraction,distance");

    let narrow = run(&["feasible", "--model", model.to_str().unwrap(), "--task", SLOW_TASK, "--mutable", "replicas"]);
    assert_ok(&narrow);
    assert_eq!(stdout(&narrow).lines().count(), 9);
}

#[test]
fn verify_reports_oracle_agreement() {
    let o = run(&["verify", "--cases", "50", "--seed", "7"]);
    assert_ok(&o);
    assert_eq!(stdout(&o).trim(), "50/50 oracle matches");
}

#[test]
fn seeded_commands_are_deterministic() {
    let a = run(&["synth", "--n", "300", "--seed", "11", "--noise-sigma", "0.1"]);
    let b = run(&["synth", "--n", "300", "--seed", "11", "--noise-sigma", "0.1"]);
    assert_ok(&a);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 300);

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("h.ndjson");
    fs::write(&input, &a.stdout).unwrap();
    let mut models = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("m{workers}.json"));
        let o = run(&[
            "train", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--n-trees", "20",
            "--workers", workers,
        ]);
        assert_ok(&o);
        models.push(fs::read(&out).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

#[test]
fn ingest_applies_deadline_policy() {
    let dir = tempfile::tempdir().unwrap();
    let raw = run(&["synth", "--n", "50", "--seed", "3"]);
    let input = dir.path().join("raw.ndjson");
    let mut text = stdout(&raw);
    text.push_str("{not json\n");
    fs::write(&input, text).unwrap();
    let o = run(&["ingest", "--input", input.to_str().unwrap(), "--deadline-policy", "slack:2"]);
    assert_ok(&o);
    assert!(stderr(&o).contains("accepted 50, rejected 1"), "{}", stderr(&o));
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let duration = v["end_ts"].as_f64().unwrap() - v["start_ts"].as_f64().unwrap();
        assert!((v["deadline_s"].as_f64().unwrap() - 2.0 * duration).abs() < 1e-9);
    }
}

#[test]
fn user_errors_exit_with_status_1() {
    let unknown = run(&["explain", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(1));

    let missing = run(&["explain", "--model", "/nonexistent/model.json", "--task", SLOW_TASK]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("cannot read model `/nonexistent/model.json`"), "{}", stderr(&missing));

    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let bytes = fs::read_to_string(&model).unwrap();
    let body = bytes.lines().next().unwrap().replacen("\"version\":\"v1\"", "\"version\":\"v999\"", 1);
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    let future = dir.path().join("future.json");
    fs::write(&future, format!("{body}\nsha256:{digest}\n")).unwrap();
    let o = run(&["explain", "--model", future.to_str().unwrap(), "--task", SLOW_TASK]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unsupported model version `v999`"), "{}", stderr(&o));

    let bad_task = run(&["explain", "--model", model.to_str().unwrap(), "--task", "{\"task_id\":1}"]);
    assert_eq!(bad_task.status.code(), Some(1));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
