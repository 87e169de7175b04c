use std::fs;
use std::process::{Command, Output};

fn pmtx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmtx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_deterministic_json() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = pmtx(&[
            "run",
            "--workload",
            "ycsb-a",
            "--ops",
            "800",
            "--objects",
            "200",
            "--seed",
            "3",
            "--policy",
            "random",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["policy"], "random");
    assert_eq!(v["ops"], 800);
    assert!(v.get("ops_per_sec").is_none());
}

#[test]
fn elision_off_issues_every_object_flush() {
    let o = pmtx(&[
        "run",
        "--workload",
        "update-only",
        "--ops",
        "500",
        "--objects",
        "300",
        "--archapt",
        "off",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["elide"], false);
    assert_eq!(v["runtime"]["object_blocks_skipped"], 0);
}

#[test]
fn report_converts_runs_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.json");
    let csv = dir.path().join("out.csv");
    let o = pmtx(&[
        "run",
        "--workload",
        "tpcc",
        "--ops",
        "300",
        "--objects",
        "100",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = pmtx(&[
        "report",
        "--input",
        run.to_str().unwrap(),
        run.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("workload,mode,elide,"));
    assert!(lines[1].starts_with("tpcc,undo,true,"));
}

#[test]
fn report_of_empty_array_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let o = pmtx(&[
        "report",
        "--input",
        empty.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn crashtest_assert_passes_on_clean_campaign() {
    let o = pmtx(&[
        "crashtest",
        "--workload",
        "ycsb-a",
        "--ops",
        "600",
        "--objects",
        "200",
        "--crashes",
        "3",
        "--policy",
        "all",
        "--assert",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for p in ["lru", "plru", "bip", "random"] {
        assert!(out.contains(p));
    }
}

#[test]
fn interleaved_crashtest_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("crash.json");
    let o = pmtx(&[
        "crashtest",
        "--workload",
        "ycsb-sql",
        "--ops",
        "800",
        "--objects",
        "200",
        "--crashes",
        "6",
        "--interleaved",
        "--clients",
        "3",
        "--mode",
        "redo",
        "--policy",
        "lru",
        "--assert",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v[0]["checks"].as_array().unwrap().len(), 6);
}

#[test]
fn workload_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.json");
    fs::write(
        &w,
        r#"{"name":"custom","mix":{"read":30,"update":70},"object_count":100,"ops":200,"object_size":64}"#,
    )
    .unwrap();
    let o = pmtx(&["run", "--workload", w.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["workload"], "custom");
}

#[test]
fn bad_inputs_fail() {
    let o = pmtx(&["run", "--workload", "no-such-preset"]);
    assert!(!o.status.success());
    let o = pmtx(&["run", "--policy", "fifo"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    fs::write(&c, r#"{"cache":{"sets":0}}"#).unwrap();
    let o = pmtx(&["config", "--config", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn microbench_reports_page_economy() {
    let o = pmtx(&["microbench", "--size", "2048", "--count", "8"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["full_page"]["checksum_flushes"], 14);
    assert_eq!(v["full_page"]["object_flushes"], 49);
}
