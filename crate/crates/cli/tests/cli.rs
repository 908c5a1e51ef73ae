use std::path::Path;
use std::process::{Command, Output};

fn defm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DEFM_SEED")
        .output()
        .expect("spawn defm")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = defm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_series(dir: &Path) {
    ok(dir, &["generate", "--out", "data.csv", "--samples", "200", "--oscillators", "2", "--seed", "1"]);
}

#[test]
fn generate_writes_series_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--out", "d.csv", "--samples", "50", "--oscillators", "2", "--time-varying"]);
    let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "time,x1,y1,z1,x2,y2,z2");
    assert_eq!(lines.count(), 50);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["variables"], 6);
    assert!(meta["segments"].as_array().is_some_and(|s| !s.is_empty()));
    assert!(meta["config"]["train"]["seed"].is_u64());
}

#[test]
fn seed_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--out", "a.csv", "--samples", "20", "--oscillators", "2", "--seed", "1"]);
    ok(dir.path(), &["generate", "--out", "b.csv", "--samples", "20", "--oscillators", "2", "--seed", "2"]);
    let env_run = Command::new(env!("CARGO_BIN_EXE_defm"))
        .args(["generate", "--out", "c.csv", "--samples", "20", "--oscillators", "2"])
        .current_dir(dir.path())
        .env("DEFM_SEED", "2")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_ne!(read("a.csv"), read("b.csv"));
    assert_eq!(read("b.csv"), read("c.csv"));
}

#[test]
fn train_predict_scores_when_truth_exists() {
    let dir = tempfile::tempdir().unwrap();
    small_series(dir.path());
    let stdout = ok(
        dir.path(),
        &["train-predict", "--series", "data.csv", "--target", "z1", "--m", "20", "--s", "5", "--start", "30",
          "--epochs", "30", "--out-dir", "out"],
    );
    assert!(stdout.contains("PCC"), "{stdout}");
    let forecast = std::fs::read_to_string(dir.path().join("out/forecast.csv")).unwrap();
    let rows: Vec<&str> = forecast.lines().collect();
    assert_eq!(rows[0], "time_index,estimate,spread,truth");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("50,"));
    assert!(!rows[1].ends_with(','));
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["target"], "z1");
    assert!(summary["score"]["rmse"].is_f64());
    assert!(dir.path().join("out/model.json").exists());
}

#[test]
fn missing_truth_is_a_notice_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    small_series(dir.path());
    let out = defm(
        dir.path(),
        &["train-predict", "--series", "data.csv", "--m", "20", "--s", "5", "--start", "178", "--epochs", "5",
          "--out-dir", "out"],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics omitted"));
    let forecast = std::fs::read_to_string(dir.path().join("out/forecast.csv")).unwrap();
    assert!(forecast.lines().skip(1).all(|l| l.ends_with(',')));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert!(summary["score"].is_null());
}

#[test]
fn bad_inputs_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    small_series(dir.path());
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let cases: [&[&str]; 5] = [
        &["train-predict", "--series", "nothere.csv", "--out-dir", "o"],
        &["train-predict", "--series", "data.csv", "--target", "q7", "--m", "20", "--s", "5", "--out-dir", "o"],
        &["train-predict", "--series", "data.csv", "--m", "4", "--s", "5", "--out-dir", "o"],
        &["train-predict", "--series", "data.csv", "--config", "bad.toml", "--out-dir", "o"],
        &["benchmark", "--series", "data.csv", "--m-values", "190", "--s", "19", "--out", "t.csv"],
    ];
    for args in cases {
        let out = defm(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    }
    assert!(!dir.path().join("t.csv").exists());
}

#[test]
fn long_term_hold_last_runs_without_future_rows() {
    let dir = tempfile::tempdir().unwrap();
    small_series(dir.path());
    ok(
        dir.path(),
        &["long-term", "--series", "data.csv", "--m", "20", "--s", "4", "--start", "178", "--iterations", "4",
          "--remaining", "hold-last", "--epochs", "5", "--out-dir", "lt"],
    );
    let forecast = std::fs::read_to_string(dir.path().join("lt/forecast.csv")).unwrap();
    assert_eq!(forecast.lines().count(), 13);
    let windows = std::fs::read_to_string(dir.path().join("lt/windows.csv")).unwrap();
    assert_eq!(windows.lines().nth(1).unwrap(), "0,198,,");
    let observed = defm(
        dir.path(),
        &["long-term", "--series", "data.csv", "--m", "20", "--s", "4", "--start", "178", "--iterations", "4",
          "--epochs", "5", "--out-dir", "lt2"],
    );
    assert_eq!(observed.status.code(), Some(1));
}

#[test]
fn benchmark_table_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    small_series(dir.path());
    ok(
        dir.path(),
        &["benchmark", "--series", "data.csv", "--m-values", "20,25", "--s", "5", "--cases", "2", "--epochs", "5",
          "--methods", "DEFM,MA,AR", "--fractions", "1,0.5", "--out", "t.csv"],
    );
    let table = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 3 * 2);
    assert!(dir.path().join("t.csv.meta.json").exists());
}

#[test]
fn plot_failure_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("f.csv"), "time_index,estimate,spread,truth\n1,0.5,0,0.4\n2,0.6,0,0.7\n").unwrap();
    std::fs::write(dir.path().join("broken.csv"), "time_index,estimate\n1,nope\n").unwrap();
    let out = defm(dir.path(), &["plot", "--inputs", "f.csv", "broken.csv", "--out", "fig.svg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("fig.svg").exists());
    ok(dir.path(), &["plot", "--inputs", "f.csv", "--labels", "defm", "--out", "fig.svg"]);
    let svg = std::fs::read_to_string(dir.path().join("fig.svg")).unwrap();
    assert!(svg.contains(">defm<"));
    assert!(svg.contains("<desc>{&quot;command&quot;:&quot;plot&quot;"));
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = defm(dir.path(), &["plot", "--inputs", "empty.csv", "--out", "e.svg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("e.svg").exists());
}

#[test]
fn malformed_series_names_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.csv"), "time,a,b\n0,1,2\n1,3,x\n").unwrap();
    let out = defm(dir.path(), &["train-predict", "--series", "s.csv", "--m", "2", "--s", "2", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3, column 3"), "{err}");
}
