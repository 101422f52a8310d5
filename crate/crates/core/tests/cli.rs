use std::path::Path;
use std::process::{Command, Output};

fn pidflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pidflow"))
        .args(args)
        .env("PIDFLOW_THREADS", "1")
        .output()
        .expect("spawn pidflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small script whose vision-unique term survives to the last layer.
fn write_script(dir: &Path, rows: &[(f64, f64, f64, f64)]) -> std::path::PathBuf {
    let profile: Vec<String> = rows
        .iter()
        .map(|(r, v, l, s)| format!(r#"{{"r":{r},"u_v":{v},"u_l":{l},"s":{s}}}"#))
        .collect();
    let text = format!(
        r#"{{"regime":"persistent_synergy","model_id":"m","task_id":"t","samples":1500,"profile":[{}]}}"#,
        profile.join(",")
    );
    let p = dir.join("script.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_reports_missing_store_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = pidflow(&["validate", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn validate_lists_truncated_layer() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), &[(0.3, 0.5, 0.0, 0.3); 2]);
    let st = dir.path().join("store");
    let o = pidflow(&["synth", "--script", s(&script), "--out", s(&st), "--samples", "50"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&pidflow(&["validate", s(&st)])), 0);

    let layer = std::fs::read_dir(&st)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("layer"))
        .unwrap();
    let bytes = std::fs::read(&layer).unwrap();
    std::fs::write(&layer, &bytes[..bytes.len() - 7]).unwrap();
    let o = pidflow(&["validate", s(&st)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("short_read") || stdout(&o).to_lowercase().contains("short"), "{}", stdout(&o));
}

#[test]
fn run_without_store_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let o = pidflow(&["run", "--baseline", s(&dir.path().join("nope")), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no store"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unachievable_profile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), &[(0.3, 0.5, 0.5, 0.3)]);
    let o = pidflow(&["synth", "--script", s(&script), "--out", s(&dir.path().join("st"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unachievable"), "{}", stderr(&o));
}

#[test]
fn paper_profile_rejects_step_override() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), &[(0.3, 0.5, 0.0, 0.3)]);
    let st = dir.path().join("st");
    assert_eq!(code(&pidflow(&["synth", "--script", s(&script), "--out", s(&st), "--samples", "50"])), 0);
    let o = pidflow(&["run", "--baseline", s(&st), "--out", s(&dir.path().join("o")), "--profile", "paper", "--steps", "10"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn report_on_incomplete_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = pidflow(&["report", s(dir.path()), "--format", "json"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("incomplete run directory"), "{}", stderr(&o));
}

#[test]
fn knockout_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [(0.3, 0.5, 0.0, 0.3); 6];
    let script = write_script(dir.path(), &rows);
    let (base, ko, out) = (dir.path().join("base"), dir.path().join("ko"), dir.path().join("run"));
    let o = pidflow(&[
        "synth", "--script", s(&script), "--out", s(&base), "--knockout-out", s(&ko), "--ko-scale", "1,1.6,1,1.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = pidflow(&["run", "--baseline", s(&base), "--knockout", s(&ko), "--out", s(&out), "--steps", "300"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("normal,") && stdout(&o).contains("knockout,"));

    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("knockout_report.json")).unwrap()).unwrap();
    assert_eq!(rep["predictions"]["p1"], "confirmed", "{rep:#}");
    assert_eq!(rep["predictions"]["p2"], "confirmed", "{rep:#}");
    assert_eq!(rep["predictions"]["p3"], "confirmed", "{rep:#}");
    assert!(rep["dep_score"]["percent"].as_f64().unwrap() > 0.0);

    let o = pidflow(&["report", s(&out), "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json = std::fs::read_to_string(out.join("report/report.json")).unwrap();
    assert!(json.contains("dep_score"));

    assert_eq!(code(&pidflow(&["report", s(&out), "--format", "plotdata"])), 0);
    let plot = std::fs::read_to_string(out.join("report/plotdata.csv")).unwrap();
    let lines: Vec<&str> = plot.lines().collect();
    assert_eq!(lines[0], "layer,component,value,condition");
    assert_eq!(lines.len(), 1 + 2 * rows.len() * 4);

    assert_eq!(code(&pidflow(&["report", s(&out), "--format", "csv"])), 0);
    for f in ["trajectory_normal.csv", "trajectory_knockout.csv", "summary.csv", "knockout.csv"] {
        assert!(out.join("report").join(f).exists(), "{f}");
    }

    let (bt, kt) = (out.join("baseline"), out.join("knockout"));
    let o = pidflow(&["classify", s(&bt), "--sweep", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap();

    let o = pidflow(&["compare", s(&bt), s(&kt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mean r"));

    let o = pidflow(&["knockout", s(&bt), s(&kt), "--out", s(&dir.path().join("k.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("k.json").exists());
}
