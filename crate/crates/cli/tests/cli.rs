use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qsf_pipeline::sandbox::{ExecRequest, ExecStatus, ProcessSandbox, Sandbox, SANDBOX_CMD_ENV};
use qsf_pipeline::task::{read_jsonl, TaskRecord};

const BIN: &str = env!("CARGO_BIN_EXE_qsf");

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../pipeline/tests/fixtures/corpus")
}

fn qsf(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove(SANDBOX_CMD_ENV).output().expect("run qsf")
}

fn ok(args: &[&str]) -> String {
    let out = qsf(args);
    assert!(out.status.success(), "qsf {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn curated(dir: &Path) -> (PathBuf, Vec<TaskRecord>) {
    let ds = dir.join("dataset.jsonl");
    ok(&["curate", "--corpus", p(&corpus()), "--out", p(&ds), "--fixture-sandbox"]);
    let tasks = read_jsonl(std::io::BufReader::new(std::fs::File::open(&ds).unwrap())).unwrap();
    (ds, tasks)
}

fn runner(ds: &Path) -> String {
    format!("'{BIN}' fixture-sandbox --references '{}'", ds.display())
}

fn request(id: &str, task: &TaskRecord, code: String) -> ExecRequest {
    ExecRequest {
        id: id.into(),
        code,
        test: task.test.clone(),
        entry_point: task.entry_point.clone(),
        timeout_s: 2.0,
    }
}

#[test]
fn process_sandbox_speaks_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, tasks) = curated(dir.path());
    let sandbox = ProcessSandbox::spawn(&runner(&ds)).unwrap();
    assert!(!sandbox.sdk_version().is_empty());

    let bell = tasks.iter().find(|t| t.entry_point == "bell_pair").unwrap();
    let good = sandbox.execute(&request("good", bell, bell.canonical_solution.clone())).unwrap();
    assert_eq!((good.id.as_str(), good.status), ("good", ExecStatus::Pass));

    let broken = bell.canonical_solution.replace("    qc.cx(0, 1)\n", "");
    let bad = sandbox.execute(&request("bad", bell, broken)).unwrap();
    assert_eq!(bad.status, ExecStatus::Fail);
    assert!(bad.assertions_passed < bad.assertions_total);

    let spin = format!("def {}():\n    while True:\n        pass\n", bell.entry_point);
    let hang = sandbox.execute(&request("hang", bell, spin)).unwrap();
    assert_eq!(hang.status, ExecStatus::Timeout);
}

#[test]
fn concurrent_requests_get_their_own_responses() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, tasks) = curated(dir.path());
    let sandbox = ProcessSandbox::spawn(&runner(&ds)).unwrap();
    std::thread::scope(|s| {
        for i in 0..16 {
            let task = &tasks[i % tasks.len()];
            let sandbox = &sandbox;
            s.spawn(move || {
                let passing = i % 2 == 0;
                let code = if passing { task.canonical_solution.clone() } else { String::from("import os\nos._exit(1)\n") };
                let id = format!("req-{i}");
                let r = sandbox.execute(&request(&id, task, code)).unwrap();
                assert_eq!(r.id, id);
                assert_eq!(r.status == ExecStatus::Pass, passing, "{id}: {:?}", r.status);
            });
        }
    });
}

#[test]
fn sandbox_command_comes_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = curated(dir.path());
    let pairs = dir.path().join("pairs.jsonl");
    let args = ["pairs", "--dataset", p(&ds), "--out", p(&pairs)];

    let none = qsf(&args);
    assert!(!none.status.success());
    assert!(String::from_utf8_lossy(&none.stderr).contains(SANDBOX_CMD_ENV));

    let env = Command::new(BIN).args(args).env(SANDBOX_CMD_ENV, runner(&ds)).output().unwrap();
    assert!(env.status.success(), "{}", String::from_utf8_lossy(&env.stderr));
    let from_env = std::fs::read_to_string(&pairs).unwrap();

    let flag = Command::new(BIN)
        .args(args)
        .args(["--sandbox-cmd", &runner(&ds)])
        .env(SANDBOX_CMD_ENV, "/nonexistent/runner")
        .output()
        .unwrap();
    assert!(flag.status.success(), "{}", String::from_utf8_lossy(&flag.stderr));
    assert_eq!(std::fs::read_to_string(&pairs).unwrap(), from_env);
    assert_eq!(from_env.lines().count(), 4);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (ds, tasks) = curated(d);
    assert_eq!(tasks.len(), 4);

    let pairs = d.join("pairs.jsonl");
    ok(&["pairs", "--dataset", p(&ds), "--out", p(&pairs), "--fixture-sandbox", "--seed", "3"]);
    assert_eq!(std::fs::read_to_string(&pairs).unwrap().lines().count(), 4);

    let policy = d.join("policy.json");
    ok(&["init-policy", "--dataset", p(&ds), "--out", p(&policy)]);
    let groups = d.join("groups.jsonl");
    ok(&[
        "groups", "--dataset", p(&ds), "--policy", p(&policy), "--out", p(&groups), "--group-size", "4",
        "--fixture-sandbox",
    ]);
    for line in std::fs::read_to_string(&groups).unwrap().lines() {
        let g: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(g["candidates"].as_array().unwrap().len(), 4);
        let sum: f64 = g["advantages"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).sum();
        assert!(sum.abs() < 1e-9);
    }

    // A benchmark made of the curated tasks, answered with two right and two wrong.
    let completions = d.join("completions.jsonl");
    let lines: Vec<String> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let text = if i < 2 { t.canonical_solution.as_str() } else { "    return None\n" };
            serde_json::json!({"task_id": t.task_id, "completion": text}).to_string()
        })
        .collect();
    std::fs::write(&completions, lines.join("\n") + "\n").unwrap();
    let results = d.join("results.jsonl");
    let report = d.join("report.json");
    let table = ok(&[
        "eval", "--benchmark", p(&ds), "--completions", p(&completions), "--fixture-sandbox", "--jobs", "2",
        "--out", p(&results), "--report-out", p(&report),
    ]);
    assert!(table.contains("Pass@1: 50.00%"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!((json["passed"].as_u64(), json["total"].as_u64()), (Some(2), Some(4)));
    assert!(ok(&["report", "--results", p(&results)]).contains("Pass@1: 50.00%"));

    for objective in ["grpo", "orpo"] {
        let trace = d.join(format!("{objective}.csv"));
        ok(&["train", "--objective", objective, "--trace-out", p(&trace), "--epochs", "1"]);
        let chart = ok(&["plot", "--trace", p(&trace), "--width", "30"]);
        assert!(chart.contains("smoothed"), "{chart}");
    }
}
