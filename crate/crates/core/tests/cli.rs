use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cbadc::io::{read_estimates, read_trace};

fn cbadc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbadc")).arg("--out-dir").arg(dir).args(args).output().unwrap()
}

#[test]
fn pipeline_writes_all_outputs_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let out = cbadc(dir, &["pipeline", "--preset", "n2", "--periods", "4096"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["coefficients.json", "trace.cbt", "estimates.csv", "psd.csv", "report.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs between runs");
    }
    let (header, trace) = read_trace(&mut fs::read(a.path().join("trace.cbt")).unwrap().as_slice()).unwrap();
    assert_eq!(trace.len(), 4096);
    assert_eq!(header.n, 2);
    let est = read_estimates(&fs::read(a.path().join("estimates.csv")).unwrap()).unwrap();
    assert!(!est.is_empty() && est.len() < 4096);
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let path = |name: &str| d.join(name).to_str().unwrap().to_string();
    let (coeffs, trace, est) = (path("coefficients.json"), path("trace.cbt"), path("estimates.csv"));
    let steps: [&[&str]; 4] = [
        &["design", "--preset", "reference"],
        &["simulate", "--preset", "reference", "--periods", "16384"],
        &["estimate", "--coefficients", &coeffs, "--trace", &trace, "--form", "mixed"],
        &["analyze", "--estimates", &est, "--band", "0,0.3359", "--segment", "4096"],
    ];
    for args in steps {
        let out = cbadc(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    assert!(report["snr_db"].as_f64().unwrap() > 40.0, "{report}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut json: serde_json::Value =
        serde_json::from_str(&String::from_utf8(cbadc(dir.path(), &["preset", "n2"]).stdout).unwrap()).unwrap();
    json["design"] = serde_json::json!({});
    fs::write(&cfg, json.to_string()).unwrap();
    let out = cbadc(dir.path(), &["design", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cbadc(dir.path(), &["preset", "nope"]);
    assert_ne!(out.status.code(), Some(0));
}
