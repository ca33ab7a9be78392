use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctxrank"));
    c.env_remove("CTXRANK_CONFIG");
    c
}

fn write_config(root: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "paths": {
            "corpus": root.join("corpus.jsonl"),
            "users": root.join("users.jsonl"),
            "logs": root.join("logs"),
            "models": root.join("models"),
            "reports": root.join("reports"),
        },
        "world": {"num_users": 30, "num_items": 200, "sessions_per_day": 10, "num_days": 2,
                  "feed_length": 8, "candidate_pool": 20},
        "features": {"feed_length": 8},
        "train": {"hidden_dims": [8, 4]},
        "eval": {"holdout_days": 1, "test_sessions": 20},
    });
    let path = root.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_pipeline_and_rerank_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let sim = run(bin().arg("--config").arg(&cfg).arg("simulate"));
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(stdout(&sim).contains("seed=1"));
    assert!(stdout(&sim).contains("train_impressions=160"));

    let train = run(bin().env("CTXRANK_CONFIG", &cfg).args(["train", "--mode", "both"]));
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(dir.path().join("models/baseline.json").exists());
    assert!(dir.path().join("models/contextual.json").exists());

    let eval = run(bin().arg("--config").arg(&cfg).arg("eval"));
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(dir.path().join("reports/comparison.txt").exists());

    let item = |i: usize| {
        let a = i as f64;
        let n = (1.0 + a * a).sqrt();
        serde_json::json!({"id": format!("c{i}"), "embedding": [1.0 / n, a / n, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                                                 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                           "topic": i % 8, "main_score": 1.0 - 0.1 * a})
    };
    let user = serde_json::json!({"id": "u", "interest_embedding":
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]});
    let req = serde_json::json!({"req_id": "r1", "session_id": "s", "user": user,
                                 "candidates": (0..6).map(item).collect::<Vec<_>>(), "page_size": 6});
    let input = dir.path().join("requests.jsonl");
    fs::write(&input, format!("oops\n{req}\n")).unwrap();
    let out_path = dir.path().join("responses.jsonl");
    let rr = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("rerank-file")
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&out_path));
    assert!(rr.status.success(), "{}", String::from_utf8_lossy(&rr.stderr));
    let text = fs::read_to_string(&out_path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["req_id"].is_null());
    assert_eq!(lines[1]["req_id"], "r1");
    assert_eq!(lines[1]["order"].as_array().unwrap().len(), 6);
    assert_eq!(lines[1]["session_done"], true);

    let mut child = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("serve")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(format!("{req}\n").as_bytes())
        .unwrap();
    let served = child.wait_with_output().unwrap();
    assert!(served.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&served).trim()).unwrap();
    assert_eq!(v["order"], lines[1]["order"]);
}

#[test]
fn dotted_overrides_reach_the_config() {
    let out = run(bin().args(["--rerank.w=5", "config", "--world.seed=9"]));
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["rerank"]["window"], 5);
    assert_eq!(v["world"]["seed"], 9);
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(run(bin().args(["--rerank.window=0", "config"])).status.code(), Some(2));
    assert_eq!(run(bin().args(["--world.bogus=1", "config"])).status.code(), Some(2));
    assert_eq!(run(bin().args(["--config", "/no/such.json", "config"])).status.code(), Some(2));
    assert_eq!(run(bin().arg("no-such-command")).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(bin().arg("--config").arg(&cfg).arg("train"));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    let missing = dir.path().join("missing/logs");
    let out = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg(format!("--paths.logs={}", missing.display()))
        .arg("simulate"));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/logs"));
}
