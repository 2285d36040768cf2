use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fisa-lab")).args(args).env_remove("FISA_LAB_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "fisa-lab {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, seed: &str) {
    ok(&["synth-data", "--out", p(dir), "--num-samples", n, "--seed", seed]);
}

#[test]
fn missing_out_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, "4", "0");
    let out = run(&["train", "--data", p(&data), "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, "4", "0");
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--eval-data", p(&data), "--checkpoint", p(&bad), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seve_simo_suite_writes_table_chart_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, test, out) = (tmp.path().join("tr"), tmp.path().join("te"), tmp.path().join("ab"));
    synth(&train, "8", "1");
    synth(&test, "4", "2");
    let stdout = ok(&[
        "ablate", "--suite", "seve-simo", "--data", p(&train), "--eval-data", p(&test), "--out", p(&out),
        "--iterations", "2", "--seeds", "2",
    ]);

    let table = fs::read_to_string(out.join("table.md")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| variant")).collect();
    let names: Vec<&str> = rows.iter().map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(names, ["baseline", "+SEVE", "+SEVE+full", "+SEVE+SIMO"]);
    assert!(stdout.contains("+SEVE+SIMO"));

    // header plus, per run, four metrics each with an overall row and one per class
    let k = 5;
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4 * 2 * 4 * (k + 1) + 1);

    let svg = fs::read_to_string(out.join("chart.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().filter(|n| n.has_tag_name("rect")).count() >= 4);

    let report_dir = tmp.path().join("rep");
    let printed = ok(&["report", "--results", p(&out.join("results.json")), "--out", p(&report_dir), "--metric", "miou"]);
    assert!(printed.contains("+SEVE+full"));
    roxmltree::Document::parse(&fs::read_to_string(report_dir.join("chart.svg")).unwrap()).unwrap();
    assert_eq!(run(&["report", "--results", p(&out.join("results.json")), "--metric", "bogus"]).status.code(), Some(2));
}

#[test]
fn train_then_eval_produces_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, tr, ev) = (tmp.path().join("d"), tmp.path().join("t"), tmp.path().join("e"));
    synth(&data, "6", "3");
    ok(&["train", "--data", p(&data), "--out", p(&tr), "--iterations", "3"]);
    let log = fs::read_to_string(tr.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    ok(&["eval", "--eval-data", p(&data), "--checkpoint", p(&tr.join("checkpoint.bin")), "--out", p(&ev), "--oracle", "classifier"]);
    let results: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("results.json")).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 1);
    // clean generated proposals with oracle labels reproduce the ground truth exactly
    assert_eq!(results[0]["report"]["pq"].as_f64(), Some(1.0));
}
