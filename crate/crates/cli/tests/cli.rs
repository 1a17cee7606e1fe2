use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cos")).args(args).output().expect("runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cos(args);
    assert!(
        out.status.success(),
        "cos {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "seed": 4,
  "plan": {"burn_in_iters": 20, "burn_up_iters": 60},
  "sim": {"n_scenes": 20, "loop": {"epochs": 4}}
}"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn simulate_is_deterministic_and_exports_detections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a), "--export-detections"]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b), "--export-detections"]);
    for f in ["report.json", "trace.csv", "ait.csv", "teacher.json", "proxy.json", "ground_truth.json", "student.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let c = dir.path().join("c");
    ok(&["simulate", "--config", s(&cfg), "--seed", "5", "--out", s(&c)]);
    assert_ne!(
        std::fs::read(a.join("report.json")).unwrap(),
        std::fs::read(c.join("report.json")).unwrap()
    );
}

#[test]
fn sweep_grid_gives_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&sim), "--export-detections"]);
    let csv = dir.path().join("sweep.csv");
    ok(&[
        "ait-sweep",
        "--teacher",
        s(&sim.join("teacher.json")),
        "--proxy",
        s(&sim.join("proxy.json")),
        "--gt",
        s(&sim.join("ground_truth.json")),
        "--tau-cls",
        "0.7,0.8,0.9",
        "--tau-loc",
        "0.6,0.7,0.8",
        "--gamma",
        "0.03,0.05,0.07",
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 28);
    assert!(lines[0].starts_with("tau_cls,tau_loc,gamma,final_tau,matched_tp,matched_fp"));
}

#[test]
fn degenerate_band_matches_confidence_filtering_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&sim), "--export-detections"]);
    let teacher = sim.join("teacher.json");
    let (fused, plain) = (dir.path().join("fused.json"), dir.path().join("plain.json"));
    ok(&[
        "fuse",
        "--teacher",
        s(&teacher),
        "--proxy",
        s(&sim.join("proxy.json")),
        "--tau-cls",
        "0.6",
        "--tau-lb",
        "0.6",
        "--out",
        s(&fused),
    ]);
    ok(&["fuse", "--teacher", s(&teacher), "--tau-cls", "0.6", "--out", s(&plain)]);
    let f = std::fs::read(&fused).unwrap();
    assert_eq!(f, std::fs::read(&plain).unwrap());
    assert!(f.len() > 10);

    // a real band adds proxy-validated labels
    let wide = dir.path().join("wide.json");
    ok(&[
        "fuse",
        "--teacher",
        s(&teacher),
        "--proxy",
        s(&sim.join("proxy.json")),
        "--tau-cls",
        "0.6",
        "--tau-lb",
        "0.1",
        "--tau-loc",
        "0.5",
        "--out",
        s(&wide),
    ]);
    assert!(std::fs::read_to_string(&wide).unwrap().contains("\"extended\""));
}

#[test]
fn evaluate_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&sim), "--export-detections"]);
    let gt = sim.join("ground_truth.json");
    let (report, table) = (dir.path().join("eval.json"), dir.path().join("eval.txt"));
    let out = ok(&["evaluate", "--detections", s(&gt), "--gt", s(&gt), "--out", s(&report), "--table", s(&table)]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["map"], 1.0);
    assert_eq!(json["pl_quality"]["f1"], 1.0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("mAP@0.5"));
    assert!(table.exists());
}

fn write_ppm(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize, usize) -> u8) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(f(x, y, c));
            }
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn stats_then_glt() {
    let dir = tempfile::tempdir().unwrap();
    let (night, day, out) = (dir.path().join("night"), dir.path().join("day"), dir.path().join("out"));
    std::fs::create_dir_all(&night).unwrap();
    std::fs::create_dir_all(&day).unwrap();
    for i in 0..3 {
        write_ppm(&night.join(format!("n{i}.ppm")), 16, 12, |x, y, c| ((x + y + c + i) * 3) as u8);
        write_ppm(&day.join(format!("d{i}.ppm")), 16, 12, |x, y, c| (100 + x * 5 + y * 3 + c * 7) as u8);
    }
    let prior = dir.path().join("prior.json");
    ok(&["stats", "--images", s(&night), "--out", s(&prior)]);
    let p: serde_json::Value = serde_json::from_slice(&std::fs::read(&prior).unwrap()).unwrap();
    assert_eq!(p["sample_count"], 3);

    let boxes = dir.path().join("boxes.json");
    std::fs::write(&boxes, r#"[{"image_id": "d0", "category_id": 0, "bbox": [2, 2, 6, 5]}]"#).unwrap();
    ok(&["glt", "--images", s(&day), "--prior", s(&prior), "--boxes", s(&boxes), "--out", s(&out), "--seed", "3"]);
    let first: Vec<Vec<u8>> = (0..3).map(|i| std::fs::read(out.join(format!("d{i}.ppm"))).unwrap()).collect();
    ok(&["glt", "--images", s(&day), "--prior", s(&prior), "--boxes", s(&boxes), "--out", s(&out), "--seed", "3"]);
    for (i, f) in first.iter().enumerate() {
        assert_eq!(f, &std::fs::read(out.join(format!("d{i}.ppm"))).unwrap());
    }
}

#[test]
fn validation_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"ptc": {"tau_cls": 0.8, "bogus": 1}}"#).unwrap();
    let out = cos(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "validation");
    assert!(err["error"]["message"].as_str().unwrap().contains("ptc"));
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1);

    let out = cos(&["fuse", "--teacher", "x.json", "--tau-cls", "0.5", "--tau-lb", "0.7", "--out", "y.json"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cos(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cos(&[
        "evaluate",
        "--detections",
        s(&dir.path().join("missing.json")),
        "--gt",
        s(&dir.path().join("missing.json")),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "runtime");
    assert!(!dir.path().join("r.json").exists());
}
