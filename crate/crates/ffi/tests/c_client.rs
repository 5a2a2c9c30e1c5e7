use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "cbadc.h"

int main(void) {
    CbadcSystem *sys = NULL;
    if (cbadc_chain_new(3, 10.0, 1.05, NULL, 0, 1.0, &sys) != CBADC_STATUS_OK) return 1;
    double t = 1.0 / 21.5, eta2 = 0.0;
    if (cbadc_eta2_from_osr(10.0 * t, 32.0, 3, &eta2) != CBADC_STATUS_OK) return 2;
    CbadcCoefficients *c = NULL;
    if (cbadc_design(sys, eta2, t, &c) != CBADC_STATUS_OK) return 3;
    CbadcInput in = { CBADC_INPUT_KIND_CONSTANT, 0.25, 0.0, 0.0 };
    CbadcTrace *tr = NULL;
    CbadcSimSummary s;
    if (cbadc_simulate(sys, t, &in, 8192, 1, &tr, &s) != CBADC_STATUS_OK) return 4;
    CbadcEstimate *e = NULL;
    if (cbadc_estimate(c, tr, CBADC_FORM_BATCH, 0, &e) != CBADC_STATUS_OK) return 5;
    size_t a = 0, b = 0, len = cbadc_estimate_len(e);
    static double u[8192];
    if (cbadc_estimate_valid_range(e, &a, &b) != CBADC_STATUS_OK || len != 8192) return 6;
    if (cbadc_estimate_channel(e, 0, u, len) != CBADC_STATUS_OK) return 7;
    double mean = 0.0;
    for (size_t i = a; i < b; i++) mean += u[i];
    mean /= (double)(b - a);
    if (cbadc_design(NULL, 1.0, 1.0, &c) != CBADC_STATUS_NULL_POINTER) return 8;
    char msg[64];
    cbadc_last_error_message(msg, sizeof msg);
    printf("%s %.6f %s\n", cbadc_version(), mean, msg);
    cbadc_estimate_free(e);
    cbadc_trace_free(tr);
    cbadc_coefficients_free(c);
    cbadc_system_free(sys);
    return 0;
}
"#;

fn build_static_lib() -> PathBuf {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).join("c-client");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "-p", "cbadc-ffi", "--lib", "--target-dir"])
        .arg(&target)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .expect("running cargo");
    assert!(status.success());
    target.join("debug").join("libcbadc_ffi.a")
}

#[test]
fn header_compiles_and_links() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = build_static_lib();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let bin = dir.path().join("client");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .expect("running cc");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "client exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(fields[0], env!("CARGO_PKG_VERSION"));
    let mean: f64 = fields[1].parse().unwrap();
    assert!((mean - 0.25).abs() < 1e-3, "{text}");
    assert!(text.contains("system is null"));
}
