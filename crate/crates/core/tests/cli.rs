use std::path::Path;
use std::process::{Command, Output};

fn helen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_helen")).args(args).env("HELEN_THREADS", "1").output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const CONFIG: &str = r#"{
  "engine": { "prior_family": "beta", "n_endmembers": 3, "max_sweeps": 20, "seed": 4 },
  "synth": { "rows": 10, "cols": 10, "bands": 12, "n_outliers": 2, "seed": 4 }
}"#;

#[test]
fn synth_unmix_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", CONFIG);
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();

    let out = helen(&["synth", "--config", &cfg, "--out-prefix", &p("data")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["data.cube", "data.truth.json", "data.endmembers.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(p("data.endmembers.csv")).unwrap();
    assert!(csv.starts_with("band,em1,em2,em3\n"));
    assert_eq!(csv.lines().count(), 13);

    let out = helen(&["unmix", "--config", &cfg, "--cube", &p("data.cube"), "--out-prefix", &p("run1")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = helen(&["unmix", "--config", &cfg, "--cube", &p("data.cube"), "--out-prefix", &p("run2")]);
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read(p("run1.result.json")).unwrap();
    assert_eq!(a, std::fs::read(p("run2.result.json")).unwrap());

    let trace = std::fs::read_to_string(p("run1.elbo.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("sweep,elbo,sigma2,gamma,seconds"));
    let elbo: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(!elbo.is_empty());
    for w in elbo.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }

    let out = helen(&["eval", "--result", &p("run1.result.json"), "--truth", &p("data.truth.json"), "--out", &p("report.json")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let sam = report["sam_deg"].as_f64().unwrap();
    assert!((0.0..=180.0).contains(&sam));
    assert_eq!(report["permutation"].as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read(p("report.json")).unwrap(), out.stdout);
}

#[test]
fn missing_cube_is_a_usage_error() {
    let out = helen(&["unmix", "--config", "x.json", "--out-prefix", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cube"));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"engine":{"unknown_key":1}}"#);
    let out = helen(&["synth", "--config", &cfg, "--out-prefix", &dir.path().join("x").to_string_lossy()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_cube_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", CONFIG);
    let cube = dir.path().join("bad.cube");
    std::fs::write(&cube, b"NOPE0000000000000000").unwrap();
    let out = helen(&["unmix", "--config", &cfg, "--cube", &cube.to_string_lossy(), "--out-prefix", "unused"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at byte 0"));
}

#[test]
fn eval_with_mismatched_endmember_count_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg3 = write_config(dir.path(), "c3.json", CONFIG);
    let cfg2 = write_config(
        dir.path(),
        "c2.json",
        r#"{"engine":{"n_endmembers":2,"max_sweeps":2},"synth":{"rows":10,"cols":10,"bands":12,"seed":4}}"#,
    );
    assert_eq!(helen(&["synth", "--config", &cfg3, "--out-prefix", &p("d")]).status.code(), Some(0));
    assert_eq!(helen(&["unmix", "--config", &cfg2, "--cube", &p("d.cube"), "--out-prefix", &p("r")]).status.code(), Some(0));
    let out = helen(&["eval", "--result", &p("r.result.json"), "--truth", &p("d.truth.json")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn quick_selftest_passes() {
    let out = helen(&["selftest", "--quick"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("FAIL"));
}
