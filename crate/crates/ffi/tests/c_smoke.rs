//! Compiles and runs a small C program against include/unshift.h and the
//! staticlib, proving the header and symbols work from actual C.

use std::path::Path;
use std::process::Command;

const C_SOURCE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "unshift.h"

int main(void) {
    if (unshift_version() == NULL) return 1;

    UnshiftClassifier *model = NULL;
    UnshiftStatus st = unshift_classifier_load("/nonexistent/model", &model);
    if (st == UNSHIFT_STATUS_OK) return 2;
    if (model != NULL) return 3;
    const char *msg = unshift_last_error_message();
    if (msg == NULL || strlen(msg) == 0) return 4;

    st = unshift_classifier_load(NULL, &model);
    if (st != UNSHIFT_STATUS_INVALID_ARGUMENT) return 5;

    unshift_classifier_free(NULL);
    unshift_tnet_free(NULL);
    unshift_dataset_free(NULL);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let include = manifest.join("include");
    assert!(include.join("unshift.h").is_file(), "header not generated");

    // staticlib lands in the workspace target dir; skip (with a note) under
    // a custom CARGO_TARGET_DIR layout we can't see from here
    let lib_dir = manifest
        .ancestors()
        .nth(2)
        .map(|ws| ws.join("target").join("debug"))
        .filter(|d| d.join("libunshift_ffi.a").is_file());
    let Some(lib_dir) = lib_dir else {
        eprintln!("skipping link test: libunshift_ffi.a not at the default path");
        return;
    };

    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    let bin = tmp.path().join("smoke");
    std::fs::write(&src, C_SOURCE).unwrap();

    // the archive path keeps the link static; -L would pick the .so first
    let compile = Command::new("cc")
        .arg(&src)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", include.display()))
        .arg(lib_dir.join("libunshift_ffi.a"))
        .arg("-lpthread")
        .arg("-ldl")
        .arg("-lm")
        .arg("-o")
        .arg(&bin)
        .output()
        .expect("running cc");
    assert!(
        compile.status.success(),
        "cc failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin).output().expect("running the C smoke test");
    assert!(
        run.status.success(),
        "smoke binary exited with {:?}",
        run.status.code()
    );
}
