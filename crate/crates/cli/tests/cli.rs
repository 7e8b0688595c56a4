use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn complai() -> Command {
    Command::new(env!("CARGO_BIN_EXE_complai"))
}

fn run(args: &[&str]) -> Output {
    complai().args(args).output().expect("spawn complai")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn demo(dir: &Path) -> String {
    let o = run(&["demo", "--dir", dir.to_str().unwrap(), "--seed", "7"]);
    assert!(o.status.success(), "{o:?}");
    dir.join("scan.json").to_str().unwrap().to_string()
}

#[test]
fn demo_scan_and_gate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let config = demo(dir.path());
    let o = run(&["scan", "--config", &config]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("trust"));
    assert!(dir.path().join("complai_report.json").is_file());

    let lenient = dir.path().join("lenient.json");
    fs::write(&lenient, r#"{"min_scores":{"explainability":1}}"#).unwrap();
    let o = run(&[
        "gate",
        "--config",
        &config,
        "--policy",
        lenient.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");

    let strict = dir.path().join("strict.json");
    fs::write(
        &strict,
        r#"{"min_scores":{"robustness":100},"min_trust":100}"#,
    )
    .unwrap();
    let o = run(&[
        "gate",
        "--config",
        &config,
        "--policy",
        strict.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{o:?}");
    assert!(stdout(&o).contains("FAIL"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"min_scores":{"robustness":140}}"#).unwrap();
    let o = run(&[
        "gate",
        "--config",
        &config,
        "--policy",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["scan"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["scan", "--config", "/nonexistent/scan.json"])
            .status
            .code(),
        Some(2)
    );
    let dir = TempDir::new().unwrap();
    let config = demo(dir.path());
    let o = run(&["whatif", "--config", &config, "--instance", "{not json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failing_model_exits_three() {
    let dir = TempDir::new().unwrap();
    let config = demo(dir.path());
    let o = run(&["scan", "--config", &config, "--model", "exec:false"]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const LOAN_MODEL: &str = r#"
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    preds, scores = [], []
    for x in req["instances"]:
        ok = float(x[1]) * 100.0 / float(x[0]) < 4.0 and x[2] == "1"
        preds.append("Y" if ok else "N")
        scores.append([0.0, 1.0] if ok else [1.0, 0.0])
    print(json.dumps({"id": req["id"], "predictions": preds, "scores": scores}), flush=True)
"#;

#[test]
fn subprocess_model_scan_and_local_queries() {
    let dir = TempDir::new().unwrap();
    let config = demo(dir.path());
    let script = dir.path().join("model.py");
    fs::write(&script, LOAN_MODEL).unwrap();
    let model = format!("exec:python3 {}", script.display());
    let out = dir.path().join("py_report.json");
    let o = run(&[
        "scan",
        "--config",
        &config,
        "--model",
        &model,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["scorecard"]["trust"].is_number());

    let instance = r#"{"applicant_income":5000,"loan_amount":120,"credit_history":1,
        "gender":"Male","married":"Yes","property_area":"Urban"}"#;
    let o = run(&["whatif", "--config", &config, "--instance", instance]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_ne!(
        r["prediction"]["label"],
        r["counterfactual_prediction"]["label"]
    );

    let o = run(&[
        "slice",
        "--config",
        &config,
        "--query",
        r#"[{"feature":"credit_history","op":"eq","value":"0"}]"#,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(s["support"].as_u64().unwrap() > 0);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_then_query_through_the_client() {
    let dir = TempDir::new().unwrap();
    let config = demo(dir.path());
    let mut child = complai()
        .args(["serve", "--config", &config, "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let _server = Server(child);
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .expect(&line)
        .to_string();

    let instance = r#"[5000, 120, "1", "Male", "Yes", "Urban"]"#;
    let deadline = Instant::now() + Duration::from_secs(60);
    let o = loop {
        let o = run(&["whatif", "--server", &url, "--instance", instance]);
        if o.status.success() || Instant::now() > deadline {
            break o;
        }
        std::thread::sleep(Duration::from_millis(200));
    };
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["diff"].is_array());

    let o = run(&["report", "--server", &url]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["format"], 1);

    let o = run(&[
        "slice",
        "--server",
        &url,
        "--query",
        r#"[{"feature":"applicant_income","op":"ge","value":1e12}]"#,
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("EmptySlice"));
}
