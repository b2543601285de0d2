//! Compiles and runs a small C client against the generated header and the
//! static library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

const CLIENT: &str = r#"
#include <stdio.h>
#include <string.h>
#include "bnmatch.h"

int main(void) {
    BnmModel *m = NULL;
    if (bnm_model_new(NULL, 7, &m) != BNM_STATUS_OK) return 10;
    if (bnm_model_input_dim(m) != 2 || bnm_model_classes(m) != 3) return 11;
    double x[4] = {0.5, -0.5, 1.0, 2.0};
    double p[6];
    if (bnm_model_predict(m, x, 2, 2, p, 6) != BNM_STATUS_OK) return 12;
    double s = p[0] + p[1] + p[2];
    if (s < 0.999999 || s > 1.000001) return 13;
    BnmModel *bad = NULL;
    if (bnm_model_load("/nonexistent.model", &bad) != BNM_STATUS_IO) return 14;
    if (bnm_last_error_message() == NULL) return 15;
    double mean[1] = {1.0}, var[1] = {1.0}, zero[1] = {0.0};
    double kl = -1.0;
    if (bnm_bnm_loss(mean, var, zero, var, 1, &kl) != BNM_STATUS_OK) return 16;
    if (kl < 0.4999999 || kl > 0.5000001) return 17;
    bnm_model_free(m);
    printf("ok %s\n", bnm_version());
    return 0;
}
"#;

#[test]
fn c_client_links_and_runs() {
    if !have_cc() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // tests live in target/<profile>/deps; the static library one level up
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libbnmatch_ffi.a");
    assert!(lib.is_file(), "missing {}", lib.display());
    let tmp = tempfile::TempDir::new().unwrap();
    let src = tmp.path().join("client.c");
    std::fs::write(&src, CLIENT).unwrap();
    let bin = tmp.path().join("client");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stdout));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
