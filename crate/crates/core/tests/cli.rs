use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use chatplan::bench::SuiteReport;
use chatplan::feedback::{LoopResult, Outcome, ValidationReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chatplan"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_shelf_plan_exits_zero() {
    let plan = fixture("shelf_plan.json");
    let env = fixture("shelf_env.json");
    let o = run(&["validate", "--plan", plan.to_str().unwrap(), "--env", env.to_str().unwrap(), "--set", "lfo"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("VALID"));
    assert!(text.contains("<juice>: -on_something(<shelf_bottom>) +on_something(<shelf_top>)"));
}

#[test]
fn validate_open_deleted_mutant_exits_one_with_step_error() {
    let plan = fixture("scenario3_open_deleted.json");
    let env = fixture("scenario3_env.json");
    let o = run(&["validate", "--plan", plan.to_str().unwrap(), "--env", env.to_str().unwrap(), "--set", "virtualhome"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("step 4 (PutIn(pie, microwave)): microwave is closed"), "{text}");
    assert!(text.contains("Add Open(microwave) before this step."));
    assert!(text.contains("INVALID"));
}

#[test]
fn validate_json_round_trips_into_library_type() {
    let plan = fixture("scenario3_open_deleted.json");
    let env = fixture("scenario3_env.json");
    let o = run(&[
        "validate", "--json", "--plan", plan.to_str().unwrap(), "--env", env.to_str().unwrap(), "--set", "virtualhome",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report: ValidationReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!report.valid);
    assert_eq!(report.steps_executed, 3);
    assert_eq!(serde_json::to_string_pretty(&report).unwrap() + "\n", stdout(&o));
}

#[test]
fn missing_file_is_a_config_error() {
    let env = fixture("shelf_env.json");
    let o = run(&["validate", "--plan", "/nonexistent/plan.json", "--env", env.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/plan.json"));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(run(&["bench", "--report", "xml"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bench_replay_first_response_rate_line() {
    let o = run(&["bench", "--max-rounds", "0", "--trials", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("Success rate: 25/70 (35.7%)"), "{text}");
    assert_eq!(text, stdout(&run(&["bench", "--max-rounds", "0", "--trials", "5"])));
}

#[test]
fn bench_csv_to_file_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let o = run(&["bench", "--max-rounds", "5", "--trials", "1", "--report", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("scenario,trial,success,rounds_used,outcome,claim_accurate,error\n"));
    assert_eq!(csv.lines().count(), 15);

    let o = run(&["bench", "--json", "--max-rounds", "5", "--trials", "1"]);
    let report: SuiteReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report.rounds_vector(), vec![1, 1, 3, 1, 0, 0, 1, 0, 1, 2, 1, 0, 0, 1]);
}

#[test]
fn bench_script_directory_backend() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join("replay");
    let spec = format!("script:{}", dir.display());
    let o = run(&["bench", "--backend", &spec, "--max-rounds", "0", "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("Success rate: 10/28 (35.7%)"));
    let o = run(&["bench", "--backend", &spec, "--max-rounds", "0", "--trials", "2", "--report", "csv"]);
    assert!(!stdout(&o).contains("Success rate"));
}

#[test]
fn plan_with_script_backend_writes_plan() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    let plan_text = std::fs::read_to_string(fixture("shelf_plan.json")).unwrap();
    std::fs::write(&script, serde_json::to_string(&vec![serde_json::json!({"response": plan_text})]).unwrap()).unwrap();
    let out = dir.path().join("plan.json");
    let env = fixture("shelf_env.json");
    let o = run(&[
        "plan",
        "--json",
        "--env",
        env.to_str().unwrap(),
        "--instruction",
        "Put the juice on top of the shelf",
        "--backend",
        &format!("script:{}", script.display()),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let result: LoopResult = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(result.outcome, Outcome::Success);
    let written = std::fs::read_to_string(&out).unwrap();
    let v = run(&["validate", "--plan", out.to_str().unwrap(), "--env", env.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0), "{written}");
}

#[test]
fn plan_with_exhausted_script_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    std::fs::write(&script, "[]").unwrap();
    let env = fixture("shelf_env.json");
    let o = run(&[
        "plan",
        "--env",
        env.to_str().unwrap(),
        "--instruction",
        "Put the juice on top of the shelf",
        "--backend",
        &format!("script:{}", script.display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repl_instruct_feedback_approve() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    let plan_text = std::fs::read_to_string(fixture("shelf_plan.json")).unwrap();
    let entries = vec![serde_json::json!({"response": plan_text}), serde_json::json!({"response": plan_text})];
    std::fs::write(&script, serde_json::to_string(&entries).unwrap()).unwrap();
    let sessions = dir.path().join("sessions");
    let env = fixture("shelf_env.json");
    let mut child = bin()
        .args([
            "repl",
            "--env",
            env.to_str().unwrap(),
            "--sessions-dir",
            sessions.to_str().unwrap(),
            "--backend",
            &format!("script:{}", script.display()),
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Put the juice on top of the shelf\nfeedback Explain step 4 in more detail\napprove\nshow\nquit\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("Outcome: success"), "{text}");
    assert!(text.contains("feedback: Explain step 4 in more detail"), "{text}");
    assert!(text.contains("approved attempt 0/1 as step 1"), "{text}");
    assert!(text.contains("\"<juice>\": \"on_something(<shelf_top>)\""), "{text}");
    let session_dirs: Vec<_> = std::fs::read_dir(&sessions).unwrap().collect();
    assert_eq!(session_dirs.len(), 1);
}
