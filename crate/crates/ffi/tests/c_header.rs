//! Compiles a small C program against the generated header and the static
//! library, then checks its output against the Rust API.

use std::path::PathBuf;
use std::process::Command;

use extbal::estimators::{estimate, Estimator, EstimatorOptions};
use extbal::io::{self, CsvSchema};

const PROGRAM: &str = r#"
#include <stdio.h>
#include "extbal.h"

int main(int argc, char **argv) {
    ExtbalSample *s = NULL;
    ExtbalBasis *b = NULL;
    if (extbal_sample_from_csv(argv[1], &s) != EXTBAL_STATUS_OK) {
        fprintf(stderr, "%s\n", extbal_last_error_message());
        return 1;
    }
    if (extbal_basis_parse(s, "H: x1, x2; G: x3", &b) != EXTBAL_STATUS_OK) {
        fprintf(stderr, "%s\n", extbal_last_error_message());
        return 1;
    }
    double target[3] = {1.0, 0.2, -0.1};
    ExtbalOptions opts = extbal_options_default();
    ExtbalEstimate est;
    ExtbalStatus st = extbal_estimate(s, b, EXTBAL_METHOD_EXTENDED, target, extbal_basis_h_len(b), &opts, &est);
    if (st != EXTBAL_STATUS_OK) {
        fprintf(stderr, "%d %s\n", (int)st, extbal_last_error_message());
        return 1;
    }
    printf("%.17g\n", est.tau_hat);
    st = extbal_estimate(s, b, 42, target, 3, NULL, &est);
    printf("%d\n", (int)st);
    extbal_basis_free(b);
    extbal_sample_free(s);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_agrees() {
    let lib = target_dir().join("libextbal_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x1,x2,x3,treatment,outcome\n");
    for i in 0..200 {
        let t = i as f64 / 200.0;
        let (x1, x2, x3) = ((t * 37.0).sin() * 2.0, (t * 11.0).cos(), (t * 5.0).sin() - 0.3);
        let a = ((x1 + 0.5 * x2 + (t * 91.0).sin()) > 0.0) as u8;
        csv.push_str(&format!("{x1},{x2},{x3},{a},{}\n", x1 + x3 + a as f64));
    }
    let csv_path = dir.path().join("source.csv");
    std::fs::write(&csv_path, &csv).unwrap();
    let c_path = dir.path().join("main.c");
    std::fs::write(&c_path, PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&c_path)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).arg(&csv_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let tau: f64 = lines.next().unwrap().parse().unwrap();
    assert_eq!(lines.next(), Some("2"));

    let src = io::parse_source_csv(&csv, &CsvSchema::default(), &csv_path).unwrap();
    let spec = io::parse_basis("H: x1, x2; G: x3", src.names(), &src.levels).unwrap();
    let want = estimate(Estimator::Extended, &src.sample, &spec, &[1.0, 0.2, -0.1], &EstimatorOptions::default()).unwrap();
    assert_eq!(tau, want.tau_hat);
}
