use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use psiot_sdn::scenario::{compare, parse, COMPARE_HEADER, LINKS_HEADER, PAPER_POC, SUBSCRIPTIONS_HEADER};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psiot-sdn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn run_writes_three_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["run", "paper-poc", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let links = read(dir.path(), "links.csv");
    let mut lines = links.lines();
    assert_eq!(lines.next(), Some(LINKS_HEADER));
    assert_eq!(lines.count(), 300 * 9);
    assert!(!links.contains('\r'));
    assert!(links.contains("\n150,s1-s2,50000000,30000000,20000000,1.000000\n"));

    let subs = read(dir.path(), "subscriptions.csv");
    assert_eq!(subs.lines().next(), Some(SUBSCRIPTIONS_HEADER));
    assert!(subs.lines().skip(1).all(|l| l.split(',').count() == 4));

    let summary = read(dir.path(), "summary.txt");
    assert!(
        summary.contains("bottleneck s1-s2 average 0.900000 peak 1.000000"),
        "{summary}"
    );
    assert!(summary.contains("subscription c1:ag1/alarms delivered_bytes"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = cli(&["run", "paper-poc", "--seed", "9", "--out", dir.path().to_str().unwrap()]);
        assert!(out.status.success());
    }
    for name in ["links.csv", "subscriptions.csv", "summary.txt"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(cli(&["run", "paper-poc", "--integrated", "false", "--out", d])
        .status
        .success());
    let summary = read(dir.path(), "summary.txt");
    assert!(summary.contains("integrated false"));
    assert!(
        summary.contains("bottleneck s1-s2 average 0.525000 peak 0.750000"),
        "{summary}"
    );

    assert!(cli(&["run", "paper-poc", "--tick", "50", "--out", d]).status.success());
    assert_eq!(read(dir.path(), "links.csv").lines().count(), 1 + 300 * 9);

    assert!(!cli(&["run", "paper-poc", "--tick", "0", "--out", d]).status.success());
    assert!(!cli(&["run", "paper-poc", "--integrated", "maybe", "--out", d])
        .status
        .success());
}

#[test]
fn compare_writes_side_by_side_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["compare", "paper-poc", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let table = read(dir.path(), "compare.csv");
    assert_eq!(table.lines().next(), Some(COMPARE_HEADER));
    assert_eq!(table.lines().count(), 1 + 300 * 9);
    let summary = read(dir.path(), "summary.txt");
    assert!(summary.contains("bottleneck s1-s2 integrated_average 0.900000 non_integrated_average 0.525000"));
}

#[test]
fn validate_reports_problems() {
    let ok = cli(&["validate", "paper-poc"]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("7 events"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\nfractions = [0.5, 0.3, 0.2]\nbuffer_bytes = oops\n").unwrap();
    let out = cli(&["validate", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let missing = cli(&["validate", dir.path().join("none.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
}

/// The built-in scenario with its event list replaced.
fn with_events(events: &str) -> String {
    let head = PAPER_POC.split("[[events]]").next().unwrap();
    format!("{head}{events}")
}

#[test]
fn modes_agree_without_iot() {
    let doc = with_events(
        "[[events]]\ntick = 0\nkind = \"start_source\"\nsource = \"t1\"\n\
         [[events]]\ntick = 20\nkind = \"start_source\"\nsource = \"t2\"\n\
         [[events]]\ntick = 40\nkind = \"end\"\n",
    );
    let report = compare(&parse(&doc).unwrap()).unwrap();
    assert!(report.rows.iter().all(|(_, _, a, b)| a == b));
}

#[test]
fn modes_agree_when_iot_fits_its_class() {
    // One 12 Mb/s topic next to 25 Mb/s of TC1 traffic never needs to borrow.
    let doc = with_events(
        "[[events]]\ntick = 0\nkind = \"start_source\"\nsource = \"t2\"\n\
         [[events]]\ntick = 5\nkind = \"subscribe\"\nconsumer = \"c1\"\ntopics = [\"ag1/alarms\"]\n\
         [[events]]\ntick = 60\nkind = \"end\"\n",
    )
    .replace("buffer_bytes = 10_000_000", "buffer_bytes = 200_000");
    let report = compare(&parse(&doc).unwrap()).unwrap();
    assert!(report.rows.iter().any(|(_, l, a, _)| l.as_str() == "s1-s2" && *a > 0.3));
    assert!(report.rows.iter().all(|(_, _, a, b)| a == b));
    assert_eq!(report.integrated.delivered, report.baseline.delivered);
}
