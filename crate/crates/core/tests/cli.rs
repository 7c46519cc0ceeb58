use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uqcascade::calibrate::{CoverageBase, Criterion, OperatingPoint, PolicyFile, Task, WindowBase};
use uqcascade::cascade::run_cascade;
use uqcascade::cli::{calibrate_policy, compare_report, sweep, EXIT_CONFIG, EXIT_DATA, EXIT_UNSATISFIABLE};
use uqcascade::metrics::report;
use uqcascade::scoretab::ScoreTable;
use uqcascade::uncertainty::ScoreMethod;

fn uqcascade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqcascade"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = uqcascade(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Bench {
    _dir: tempfile::TempDir,
    root: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

fn bench(extra: &[&str]) -> Bench {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let mut args = vec![
        "synth",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--n-id",
        "3000",
        "--n-ood",
        "1500",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    Bench {
        val: data.join("val.uqc"),
        test: data.join("test.uqc"),
        root,
        _dir: dir,
    }
}

/// Data rows of a CSV written by the tool, keyed by header name.
fn read_csv(path: &Path) -> (String, Vec<csv::StringRecord>, csv::StringRecord) {
    let text = fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let rows = rdr.records().map(Result::unwrap).collect();
    (first, rows, headers)
}

fn col(headers: &csv::StringRecord, name: &str) -> usize {
    headers
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"))
}

fn sc(c: Criterion) -> OperatingPoint {
    OperatingPoint::new(Task::Sc, c, CoverageBase::IdOnly).unwrap()
}

#[test]
fn calibrate_and_run_match_the_library() {
    let b = bench(&[]);
    let out = b.root.join("out");
    ok(&[
        "calibrate",
        "--val",
        s(&b.val),
        "--point",
        "cov@5",
        "--window",
        "±10",
        "--out",
        s(&out),
    ]);
    let policy_text = fs::read_to_string(out.join("policy.txt")).unwrap();
    assert!(policy_text.starts_with("# uqcascade "));
    let policy = PolicyFile::parse(&policy_text).unwrap();

    let val = ScoreTable::load(&b.val).unwrap();
    let point = sc(Criterion::RiskAtMost(5.0));
    let want = calibrate_policy(
        &val,
        ScoreMethod::neg_msp(),
        point,
        1.0,
        &[10.0],
        WindowBase::ValidationId,
    )
    .unwrap();
    assert_eq!(policy, want);

    ok(&[
        "run",
        "--test",
        s(&b.test),
        "--policy",
        s(&out.join("policy.txt")),
        "--point",
        "risk@80",
        "--trace",
        "--out",
        s(&out),
    ]);
    let test = ScoreTable::load(&b.test).unwrap();
    let trace = run_cascade(&test, &want.cascade_policy().unwrap()).unwrap();
    let lib = report(&trace, &test, &[point, sc(Criterion::CoverageExactly(80.0))], 1.0).unwrap();

    let (first, rows, h) = read_csv(&out.join("metrics.csv"));
    assert!(first.contains("run config_hash="));
    for r in &lib.rows {
        let row = rows.iter().find(|row| row[col(&h, "metric")] == r.metric).unwrap();
        assert_eq!(row[col(&h, "value")].parse::<f64>().unwrap(), r.value, "{}", r.metric);
        assert_eq!(row[col(&h, "avg_cost")].parse::<f64>().unwrap(), r.avg_cost);
        assert_eq!(&row[col(&h, "policy")], "window:10");
    }
    assert!(rows.iter().any(|r| &r[col(&h, "metric")] == "coverage@final_tau"));

    let (_, rows, h) = read_csv(&out.join("trace.csv"));
    assert_eq!(rows.len(), test.n_samples());
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[col(&h, "exit_stage")].parse::<u32>().unwrap(), trace.exit_stage[i]);
        assert_eq!(
            row[col(&h, "uncertainty")].parse::<f64>().unwrap(),
            trace.final_uncertainty[i]
        );
        assert_eq!(
            row[col(&h, "prediction")].parse::<u32>().unwrap(),
            trace.final_prediction[i]
        );
    }
}

#[test]
fn sweep_and_report_match_the_library() {
    let b = bench(&[]);
    let out = b.root.join("out");
    ok(&[
        "sweep",
        "--val",
        s(&b.val),
        "--test",
        s(&b.test),
        "--widths",
        "0,10,100",
        "--compare",
        "--out",
        s(&out),
    ]);
    let (val, test) = (ScoreTable::load(&b.val).unwrap(), ScoreTable::load(&b.test).unwrap());
    let points = [sc(Criterion::RiskAtMost(5.0))];
    let lib = sweep(
        &val,
        &test,
        ScoreMethod::neg_msp(),
        &points,
        1.0,
        &[0.0, 10.0, 100.0],
        WindowBase::ValidationId,
        true,
    )
    .unwrap();
    let (_, rows, h) = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), lib.len());
    assert_eq!(rows.len(), 2 + 2 * 3);
    for (row, want) in rows.iter().zip(&lib) {
        assert_eq!(&row[col(&h, "kind")], want.kind);
        assert_eq!(row[col(&h, "avg_cost")].parse::<f64>().unwrap(), want.avg_cost);
        for (name, v) in &want.metrics {
            assert_eq!(row[col(&h, name)].parse::<f64>().unwrap(), *v, "{name}");
        }
    }
    // the widest window runs every sample through the ensemble
    let widest = lib
        .iter()
        .find(|r| r.kind == "window" && r.half_width == Some(100.0))
        .unwrap();
    let ensemble = lib.iter().find(|r| r.kind == "ensemble").unwrap();
    assert_eq!(widest.metrics, ensemble.metrics);
    assert_eq!(widest.avg_cost, ensemble.avg_cost);

    ok(&["report", "--val", s(&b.val), "--test", s(&b.test), "--out", s(&out)]);
    let lib = compare_report(
        &val,
        &test,
        ScoreMethod::neg_msp(),
        &points,
        1.0,
        &[10.0],
        WindowBase::ValidationId,
    )
    .unwrap();
    let (_, rows, h) = read_csv(&out.join("report.csv"));
    assert_eq!(rows.len(), lib.rows.len());
    for (row, want) in rows.iter().zip(&lib.rows) {
        assert_eq!(&row[col(&h, "policy")], want.policy);
        assert_eq!(row[col(&h, "value")].parse::<f64>().unwrap(), want.value);
    }
}

#[test]
fn stream_adjusted_windows_run() {
    let b = bench(&[]);
    let out = b.root.join("out");
    ok(&[
        "calibrate",
        "--val",
        s(&b.val),
        "--window-base",
        "mix-offline",
        "--out",
        s(&out),
    ]);
    let policy = out.join("policy.txt");
    ok(&["run", "--test", s(&b.test), "--policy", s(&policy), "--out", s(&out)]);
    ok(&[
        "run",
        "--test",
        s(&b.test),
        "--policy",
        s(&policy),
        "--window-base",
        "mix-stream",
        "--alpha",
        "0.5",
        "--out",
        s(&out),
    ]);
}

#[test]
fn scod_and_ood_tasks_run() {
    let b = bench(&[]);
    let out = b.root.join("out");
    for (task, point) in [("scod", "risk@80"), ("ood", "fpr@95")] {
        ok(&[
            "calibrate",
            "--val",
            s(&b.val),
            "--task",
            task,
            "--point",
            point,
            "--out",
            s(&out),
        ]);
        ok(&[
            "run",
            "--test",
            s(&b.test),
            "--policy",
            s(&out.join("policy.txt")),
            "--out",
            s(&out),
        ]);
        let (_, rows, h) = read_csv(&out.join("metrics.csv"));
        assert!(rows.iter().any(|r| &r[col(&h, "metric")] == point), "{task}");
    }
}

#[test]
fn synth_output_is_reproducible() {
    let (a, b) = (bench(&["--signal", "2,3,4"]), bench(&["--signal", "2,3,4"]));
    assert_eq!(fs::read(&a.val).unwrap(), fs::read(&b.val).unwrap());
    assert_eq!(fs::read(&a.test).unwrap(), fs::read(&b.test).unwrap());
    assert_eq!(ScoreTable::load(&a.val).unwrap().n_stages(), 3);
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.uqc");
    let out = uqcascade(&["calibrate", "--val", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.uqc"));
}

#[test]
fn configuration_errors_exit_with_2() {
    let b = bench(&[]);
    let out = b.root.join("out");
    for args in [
        vec!["calibrate", "--val", s(&b.val), "--point", "cov@150", "--out", s(&out)],
        vec![
            "calibrate",
            "--val",
            s(&b.val),
            "--task",
            "ood",
            "--point",
            "cov@5",
            "--out",
            s(&out),
        ],
        vec![
            "calibrate",
            "--val",
            s(&b.val),
            "--method",
            "energy",
            "--combine",
            "pred",
            "--out",
            s(&out),
        ],
        vec!["calibrate", "--val", s(&b.val), "--window", "5,5,5", "--out", s(&out)],
        vec!["calibrate", "--bogus"],
    ] {
        let status = uqcascade(&args).status;
        assert_eq!(status.code(), Some(EXIT_CONFIG), "{args:?}");
    }
    let bad_policy = b.root.join("bad.txt");
    fs::write(&bad_policy, "version = 1\ntask = sc\nbeta = -1\n").unwrap();
    let status = uqcascade(&[
        "run",
        "--test",
        s(&b.test),
        "--policy",
        s(&bad_policy),
        "--out",
        s(&out),
    ])
    .status;
    assert_eq!(status.code(), Some(EXIT_CONFIG));
}

#[test]
fn unreachable_risk_target_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.csv");
    let mut text = String::from("sample_id,label,domain,stage,logit_0,logit_1\n");
    for i in 0..50 {
        text.push_str(&format!("{i},1,id,1,{},0\n", 1.0 + i as f64 / 10.0));
    }
    fs::write(&path, text).unwrap();
    let out = uqcascade(&[
        "calibrate",
        "--val",
        s(&path),
        "--point",
        "cov@5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_UNSATISFIABLE));
}

#[test]
fn help_exits_cleanly() {
    assert!(uqcascade(&["--help"]).status.success());
    assert_eq!(uqcascade(&[]).status.code(), Some(EXIT_CONFIG));
}
