use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use moco_core::forward::perturbed_fourier;
use moco_core::io::{read_kspace, read_volume, write_json};
use moco_core::metrics::{compare_volumes, QualityReport, SsimOptions};
use moco_core::nufft::NufftConfig;
use moco_core::simulation::two_contrast_spec;
use moco_core::MotionTrace;

fn moco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moco"))
        .args(args)
        .env("MOCO_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_phantom(dir: &Path) {
    write_json(&dir.join("spec.json"), &two_contrast_spec([16; 3], [4.0; 3])).unwrap();
    let out = moco(&["phantom", "--spec", s(&dir.join("spec.json")), "--out", s(&dir.join("ph"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn quick_solver(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("solver.toml");
    fs::write(&p, "scales = [2, 1]\nepsilon_multipliers = [2.0, 1.0]\niters_per_stage = 3\n").unwrap();
    p
}

#[test]
fn preset_phantom_has_two_contrasts_with_shared_edges() {
    let dir = tempfile::tempdir().unwrap();
    let out = moco(&["phantom", "--preset", "two-contrast-32", "--out", s(dir.path())]);
    assert!(out.status.success());
    let a = read_volume(&dir.path().join("contrast_0")).unwrap();
    let b = read_volume(&dir.path().join("contrast_1")).unwrap();
    assert_eq!(a.dims(), [32; 3]);
    // edges: where a voxel differs from its +x neighbour
    let edges = |v: &moco_core::ComplexVolume3D| -> Vec<bool> {
        let m = v.magnitude();
        let mut e = Vec::new();
        for iz in 0..32 {
            for iy in 0..32 {
                for ix in 0..31 {
                    e.push((m.get(ix + 1, iy, iz) - m.get(ix, iy, iz)).abs() > 1e-9);
                }
            }
        }
        e
    };
    assert_eq!(edges(&a), edges(&b));
    assert!(edges(&a).iter().any(|&x| x));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn non_cubic_spec_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    write_json(&dir.path().join("spec.json"), &two_contrast_spec([16, 16, 8], [2.0, 2.0, 4.0])).unwrap();
    let out = moco(&["phantom", "--spec", s(&dir.path().join("spec.json")), "--out", s(dir.path())]);
    assert!(out.status.success());
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("contrast_0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["dims"], serde_json::json!([16, 16, 8]));
}

#[test]
fn invalid_spec_json_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"dims\": [16, 16").unwrap();
    let out = moco(&["phantom", "--spec", s(&dir.path().join("bad.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn identity_trace_without_noise_gives_motion_free_data() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let truth = dir.path().join("ph/contrast_0.json");
    let run = dir.path().join("sim");
    let out = moco(&[
        "simulate", "--truth", s(&truth), "--out", s(&run), "--trace", "identity", "--noise", "0", "--dtype",
        "complex128",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = read_kspace(&run.join("kspace")).unwrap();
    let u = read_volume(&dir.path().join("ph/contrast_0")).unwrap();
    let still = perturbed_fourier(&u, &MotionTrace::identity(data.pattern().n_lines()), data.pattern(), &NufftConfig::default())
        .unwrap();
    assert_eq!(data.samples(), still.samples());
    let trace = MotionTrace::read_csv(&run.join("trace.csv")).unwrap();
    assert!(trace.params.iter().all(|p| p.is_identity()));
}

fn files_except_manifest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().to_string(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn simulation_is_deterministic_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let truth = dir.path().join("ph/contrast_0");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = moco(&[
            "simulate", "--truth", s(&truth), "--out", s(&run), "--pattern", "randomized", "--accel", "2", "--seed",
            "7", "--poses", "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(run);
    }
    assert_eq!(files_except_manifest(&runs[0]), files_except_manifest(&runs[1]));
    let m = moco_core::io::RunManifest::read(&runs[0].join("manifest.json")).unwrap();
    assert_eq!(m.command, "simulate");
    assert_eq!(m.seeds["pattern"], 7);
    for f in m.outputs.values() {
        assert!(runs[0].join(f).exists());
    }
    let transitions: Vec<usize> = serde_json::from_str(&fs::read_to_string(runs[0].join("transitions.json")).unwrap()).unwrap();
    assert_eq!(transitions.len(), 1);
}

#[test]
fn simulate_rejects_a_trace_of_the_wrong_length() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    fs::write(dir.path().join("t.csv"), MotionTrace::identity(3).to_csv()).unwrap();
    let out = moco(&[
        "simulate", "--truth", s(&dir.path().join("ph/contrast_0")), "--out", s(&dir.path().join("x")), "--trace",
        s(&dir.path().join("t.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn correct_end_to_end_and_guided_mode_needs_reference() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let run = dir.path().join("sim");
    assert!(moco(&["simulate", "--truth", s(&dir.path().join("ph/contrast_0")), "--out", s(&run)]).status.success());
    let cfg = quick_solver(dir.path());
    let kspace = run.join("kspace.json");

    let out = moco(&["correct", "--kspace", s(&kspace), "--config", s(&cfg), "--out", s(&dir.path().join("c0"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--reference"));

    let outdir = dir.path().join("c1");
    let out = moco(&[
        "correct", "--kspace", s(&kspace), "--pattern", s(&run.join("pattern.json")), "--reference",
        s(&dir.path().join("ph/contrast_1")), "--config", s(&cfg), "--out", s(&outdir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "corrected.raw", "corrected.json", "corrected_trace.csv", "report.json", "manifest.json",
        "corrected_sagittal.png", "corrected_coronal.png", "corrected_axial.png",
    ] {
        assert!(outdir.join(f).exists(), "missing {f}");
    }
    let u = read_volume(&outdir.join("corrected")).unwrap();
    assert_eq!(u.dims(), [16; 3]);
    let m = moco_core::io::RunManifest::read(&outdir.join("manifest.json")).unwrap();
    assert_eq!(m.config["png_window"]["percentile"], 99.5);
    assert_eq!(m.config["solver"]["iters_per_stage"], 3);

    let out = moco(&[
        "correct", "--kspace", s(&kspace), "--mode", "plain-tv", "--config", s(&cfg), "--out",
        s(&dir.path().join("c2")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_solver_code_and_flags_last_good() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let run = dir.path().join("sim");
    assert!(moco(&["simulate", "--truth", s(&dir.path().join("ph/contrast_0")), "--out", s(&run)]).status.success());
    let cfg = dir.path().join("solver.json");
    fs::write(&cfg, r#"{"scales": [1], "epsilon_multipliers": [1.0], "iters_per_stage": 3, "step_u": 1e308}"#).unwrap();
    let outdir = dir.path().join("c");
    let out = moco(&[
        "correct", "--kspace", s(&run.join("kspace")), "--mode", "plain-tv", "--config", s(&cfg), "--out", s(&outdir),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(outdir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "failed");
    assert_eq!(report["last_good"], true);
    assert!(outdir.join("last_good.raw").exists());
    assert!(!outdir.join("corrected.raw").exists());
}

#[test]
fn metrics_match_the_library_and_aggregate_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let truth = dir.path().join("ph/contrast_0");
    let csv = dir.path().join("table.csv");
    let mut reports = Vec::new();
    for poses in ["1", "2", "5"] {
        let run = dir.path().join(format!("p{poses}"));
        assert!(moco(&["simulate", "--truth", s(&truth), "--out", s(&run), "--poses", poses]).status.success());
        let out = moco(&[
            "metrics", "--input", s(&run.join("corrupted")), "--reference", s(&truth), "--csv", s(&csv), "--label",
            &format!("poses-{poses}"),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let cli: QualityReport = serde_json::from_slice(&out.stdout).unwrap();
        let lib = compare_volumes(
            &read_volume(&run.join("corrupted")).unwrap(),
            &read_volume(&truth).unwrap(),
            &SsimOptions::default(),
        )
        .unwrap();
        assert_eq!(cli, lib);
        reports.push(lib);
    }
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], QualityReport::CSV_HEADER);
    assert!(lines[1].starts_with("poses-1,"));
    assert_eq!(lines[3], reports[2].csv_row("poses-5"));
}

#[test]
fn metrics_of_identical_files_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let a = dir.path().join("ph/contrast_0");
    let out = moco(&["metrics", "--input", s(&a), "--reference", s(&a)]);
    assert!(out.status.success());
    let q: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(q["volume"]["psnr_db"], "inf");
    assert_eq!(q["volume"]["ssim"], 1.0);

    let other = dir.path().join("other");
    write_json(&dir.path().join("spec8.json"), &two_contrast_spec([8; 3], [8.0; 3])).unwrap();
    assert!(moco(&["phantom", "--spec", s(&dir.path().join("spec8.json")), "--out", s(&other)]).status.success());
    let out = moco(&["metrics", "--input", s(&other.join("contrast_0")), "--reference", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_override_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_moco"))
        .args(["metrics", "--input", "x", "--reference", "y"])
        .env("MOCO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
