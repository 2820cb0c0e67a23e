use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use shapdistill::cacs::read_acpb;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapdistill"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "`{}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of_failure(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        !out.status.success(),
        "`{}` should have failed",
        args.join(" ")
    );
    String::from_utf8(out.stderr).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Matrix, schema and ACPB for a small synthetic cohort.
fn cohort(dir: &Path, n: usize) {
    ok(
        dir,
        &[
            "synth",
            "-n",
            &n.to_string(),
            "-o",
            "m.csv",
            "--schema-out",
            "s.json",
        ],
    );
    ok(
        dir,
        &[
            "extract", "--schema", "s.json", "--matrix", "m.csv", "-o", "a.json",
        ],
    );
}

/// Case file holding only the id and raw values of matrix row `row`.
fn write_case(dir: &Path, row: usize) {
    let text = fs::read_to_string(dir.join("m.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let cells: Vec<&str> = lines.nth(row).unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| i == 0 || header[i].starts_with("v_"))
        .collect();
    let pick = |v: &[&str]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>().join(",");
    fs::write(
        dir.join("case.csv"),
        format!("{}\n{}\n", pick(&header), pick(&cells)),
    )
    .unwrap();
}

#[test]
fn missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["synth", "-n", "5", "-o", "m.csv", "--schema-out", "s.json"],
    );
    let text = fs::read_to_string(d.join("m.csv")).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        if line.starts_with('#') {
            out.push_str(line);
        } else {
            let cells: Vec<&str> = line.split(',').collect();
            // s_x05 sits after sample_id and 15 value columns
            let kept: Vec<&str> = cells
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 20)
                .map(|(_, c)| *c)
                .collect();
            out.push_str(&kept.join(","));
        }
        out.push('\n');
    }
    assert!(text.lines().nth(1).unwrap().split(',').nth(20) == Some("s_x05"));
    fs::write(d.join("m.csv"), out).unwrap();
    let err = stderr_of_failure(
        d,
        &[
            "extract", "--schema", "s.json", "--matrix", "m.csv", "-o", "a.json",
        ],
    );
    assert!(err.contains("s_x05"), "{err}");
    assert!(!d.join("a.json").exists());
}

#[test]
fn extract_step_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["synth", "-n", "40", "-o", "m.csv", "--schema-out", "s.json"],
    );
    let stdout = ok(
        d,
        &[
            "extract", "--schema", "s.json", "--matrix", "m.csv", "-o", "a.json", "--step", "1.0",
        ],
    );
    assert!(stdout.contains("step 1"), "{stdout}");
    let acpb = read_acpb(d.join("a.json")).unwrap();
    assert_eq!(acpb.grid.step, 1.0);
    for f in &acpb.features {
        for e in &f.entries {
            assert_eq!(
                e.midpoint,
                e.midpoint.round(),
                "{} at {}",
                f.name,
                e.midpoint
            );
        }
    }
    let err = stderr_of_failure(
        d,
        &[
            "extract", "--schema", "s.json", "--matrix", "m.csv", "-o", "b.json", "--step", "0",
        ],
    );
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn include_unconverged_stores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d, 60);
    let tight = [
        "--acpb",
        "a.json",
        "--matrix",
        "m.csv",
        "--epsilon",
        "0.0001",
        "--max-iters",
        "1",
    ];
    ok(d, &[&["distill", "-o", "strict.sdkb"][..], &tight].concat());
    ok(
        d,
        &[
            &["distill", "-o", "all.sdkb", "--include-unconverged"][..],
            &tight,
        ]
        .concat(),
    );
    let strict = json(d.join("strict.sdkb.summary.json"));
    let all = json(d.join("all.sdkb.summary.json"));
    assert_eq!(strict["total"], 60);
    let unconverged = strict["unconverged"].as_u64().unwrap();
    assert!(unconverged > 0, "tolerance too loose for this test");
    assert_eq!(strict["stored"], strict["converged"]);
    assert_eq!(all["stored"], 60);
    assert_eq!(all["unconverged"].as_u64().unwrap(), unconverged);
}

#[test]
fn predict_with_five_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d, 80);
    ok(
        d,
        &[
            "distill", "--acpb", "a.json", "--matrix", "m.csv", "-o", "kb.sdkb",
        ],
    );
    write_case(d, 11);
    let stdout = ok(
        d,
        &[
            "predict", "--acpb", "a.json", "--store", "kb.sdkb", "--case", "case.csv", "-o", "rep",
            "--runs", "5",
        ],
    );
    assert!(stdout.contains("syn12"), "{stdout}");
    let report = json(d.join("rep.json"));
    let tally = &report["tally"];
    assert_eq!(
        tally["healthy"].as_u64().unwrap() + tally["unhealthy"].as_u64().unwrap(),
        5
    );
    assert_eq!(report["run_probabilities"].as_array().unwrap().len(), 5);
    let text = fs::read_to_string(d.join("rep.txt")).unwrap();
    assert!(text.contains("syn12"));

    let err = stderr_of_failure(
        d,
        &[
            "predict", "--acpb", "a.json", "--store", "kb.sdkb", "--case", "case.csv", "-o",
            "even", "--runs", "4",
        ],
    );
    assert!(err.contains("odd"), "{err}");
    assert!(!d.join("even.json").exists());
}

#[test]
fn malformed_case_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d, 30);
    ok(
        d,
        &[
            "distill", "--acpb", "a.json", "--matrix", "m.csv", "-o", "kb.sdkb",
        ],
    );
    write_case(d, 0);
    let good = fs::read_to_string(d.join("case.csv")).unwrap();
    let (head, row) = good.split_once('\n').unwrap();
    let mut cells: Vec<&str> = row.trim_end().split(',').collect();
    cells[3] = "abc";
    fs::write(d.join("bad.csv"), format!("{head}\n{}\n", cells.join(","))).unwrap();
    let args = |case: &'static str| {
        [
            "predict", "--acpb", "a.json", "--store", "kb.sdkb", "--case", case, "-o", "rep",
        ]
    };
    let err = stderr_of_failure(d, &args("bad.csv"));
    assert!(err.starts_with("error:"), "{err}");

    let short: String = good
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    fs::write(d.join("short.csv"), short).unwrap();
    stderr_of_failure(d, &args("short.csv"));
    assert!(!d.join("rep.json").exists());
}

fn column(name: &str, rows: &[u8]) -> String {
    let mut s = format!("sample_id,{name}\n");
    for (i, v) in rows.iter().enumerate() {
        s.push_str(&format!("p{i:02},{v}\n"));
    }
    s
}

#[test]
fn evaluate_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 60 cases: 37 both right, 5 both wrong, 13 only A right, 5 only B right
    let mut truth = Vec::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..60u8 {
        let t = i % 2;
        let (ra, rb) = match i {
            0..=36 => (true, true),
            37..=41 => (false, false),
            42..=54 => (true, false),
            _ => (false, true),
        };
        truth.push(t);
        a.push(if ra { t } else { 1 - t });
        b.push(if rb { t } else { 1 - t });
    }
    fs::write(d.join("truth.csv"), column("label", &truth)).unwrap();
    fs::write(d.join("a.csv"), column("label", &a)).unwrap();
    fs::write(d.join("b.csv"), column("label", &b)).unwrap();
    let stdout = ok(
        d,
        &[
            "evaluate",
            "--truth",
            "truth.csv",
            "--pred-a",
            "a.csv",
            "--pred-b",
            "b.csv",
            "--out-json",
            "e.json",
            "--out-categories",
            "cat.csv",
        ],
    );
    assert!(!stdout.is_empty());
    let e = json(d.join("e.json"));
    assert_eq!(e["n"], 60);
    let acc_a = e["model_a"]["metrics"]["accuracy"].as_f64().unwrap();
    assert!((acc_a - 50.0 / 60.0).abs() < 1e-12);
    let acc_b = e["model_b"]["metrics"]["accuracy"].as_f64().unwrap();
    assert!((acc_b - 42.0 / 60.0).abs() < 1e-12);
    let c = &e["concordance"];
    assert_eq!(c["n"], 60);
    let both = c["fractions"]["both_correct"].as_f64().unwrap();
    assert!((100.0 * both - 61.7).abs() < 0.1);
    let cats = fs::read_to_string(d.join("cat.csv")).unwrap();
    assert_eq!(cats.lines().filter(|l| l.starts_with('p')).count(), 60);

    // ids that do not line up are rejected
    fs::write(d.join("short.csv"), column("label", &a[..59])).unwrap();
    stderr_of_failure(
        d,
        &["evaluate", "--truth", "truth.csv", "--pred-a", "short.csv"],
    );
}

#[test]
fn empty_synth_then_extract_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(
        d,
        &["synth", "-n", "0", "-o", "m.csv", "--schema-out", "s.json"],
    );
    assert!(stdout.starts_with("0 synthetic row(s)"));
    let err = stderr_of_failure(
        d,
        &[
            "extract", "--schema", "s.json", "--matrix", "m.csv", "-o", "a.json",
        ],
    );
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-n", "25", "--seed", "9", "-o", "a.csv"]);
    ok(d, &["synth", "-n", "25", "--seed", "9", "-o", "b.csv"]);
    ok(d, &["synth", "-n", "25", "--seed", "10", "-o", "c.csv"]);
    let read = |f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn config_file_supplies_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d, 30);
    fs::write(
        d.join("cfg.toml"),
        "[paths]\nschema = \"s.json\"\nmatrix = \"m.csv\"\nacpb = \"a.json\"\nstore = \"kb.sdkb\"\n\n[predict]\nruns = 3\n",
    )
    .unwrap();
    ok(d, &["--config", "cfg.toml", "distill"]);
    assert!(d.join("kb.sdkb").exists());
    fs::write(d.join("bad.toml"), "[predict]\nrunz = 3\n").unwrap();
    let err = stderr_of_failure(d, &["--config", "bad.toml", "distill"]);
    assert!(err.contains("runz"), "{err}");
}
