//! Acceptance matrix: one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 8 come from one full benchmark run (64^3 phantom); 9 runs
//! the reduced benchmark twice and compares the serialised reports.
//! Run with `cargo test --release -p moco-core --test acceptance`; the lines
//! go to stderr as they are produced and the full matrix takes a while.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use moco_core::bench::{run_bench, run_bench_with_progress, BenchConfig, CriterionResult};

/// Wall-clock budgets in seconds per criterion.
fn budgets() -> BTreeMap<u32, f64> {
    BTreeMap::from([
        (1, 10.0),
        (2, 10.0),
        (3, 60.0),
        (4, 60.0),
        (5, 15.0 * 60.0),
        (6, 45.0 * 60.0),
        (7, 30.0 * 60.0),
    ])
}

fn line(c: &CriterionResult, seconds: Option<f64>, budget: Option<f64>) -> (bool, String) {
    let in_time = match (seconds, budget) {
        (Some(s), Some(b)) => s <= b,
        _ => true,
    };
    let ok = c.passed && in_time;
    let time = match (seconds, budget) {
        (Some(s), Some(b)) => format!(" [{s:.1} s, budget {b:.0} s]"),
        (Some(s), None) => format!(" [{s:.1} s]"),
        _ => String::new(),
    };
    (
        ok,
        format!("criterion {} {}: {} | {}{}", c.id, if ok { "PASS" } else { "FAIL" }, c.name, c.detail, time),
    )
}

/// Written to the process's stderr directly so the lines show up without `--nocapture`.
fn emit(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

#[test]
fn acceptance_criteria() {
    let budgets = budgets();
    let mut all_ok = true;
    let mut lines = Vec::new();

    let (report, timings) = run_bench_with_progress(&BenchConfig::default(), |m| emit(&format!("  {m}"))).expect("benchmark runs");
    for c in &report.criteria {
        let (ok, text) = line(c, timings.criteria.get(&c.id).copied(), budgets.get(&c.id).copied());
        emit(&text);
        all_ok &= ok;
        lines.push(text);
    }
    let ids: Vec<u32> = report.criteria.iter().map(|c| c.id).collect();
    assert_eq!(ids, (1..=8).collect::<Vec<_>>(), "every criterion reported once");

    let start = Instant::now();
    let cfg = BenchConfig::reduced();
    let (a, _) = run_bench(&cfg).expect("first reduced run");
    let (b, _) = run_bench(&cfg).expect("second reduced run");
    let ja = serde_json::to_string_pretty(&a).unwrap();
    let jb = serde_json::to_string_pretty(&b).unwrap();
    let det = CriterionResult {
        id: 9,
        name: "determinism".into(),
        passed: ja == jb,
        detail: format!("two reduced bench runs, reports of {} bytes, identical: {}", ja.len(), ja == jb),
    };
    let (ok, text) = line(&det, Some(start.elapsed().as_secs_f64()), None);
    emit(&text);
    all_ok &= ok;
    lines.push(text);

    assert!(all_ok, "failing criteria:\n{}", lines.iter().filter(|l| l.contains(" FAIL ")).cloned().collect::<Vec<_>>().join("\n"));
}
