//! Compiles a small C program against the generated header and the static
//! library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const SOURCE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "railtrace.h"

int main(void) {
    double kl = -1.0;
    if (rt_kl_normal(0.0, 1.0, 1.0, 1.0, &kl) != RT_OK || kl < 0.499 || kl > 0.501) return 1;
    if (rt_normal_pdf(0.0, 0.0, -1.0, &kl) != RT_ERR_CONFIG) return 2;
    if (rt_last_error() == NULL || strstr(rt_last_error(), "sigma2") == NULL) return 3;
    rt_pipeline *p = NULL;
    if (rt_pipeline_new("{\"seed\": 7}", &p) != RT_OK || p == NULL) return 4;
    size_t n = 0;
    if (rt_pipeline_itinerary_count(p, &n) != RT_ERR_STATE) return 5;
    rt_pipeline_free(p);
    puts("ok");
    return 0;
}
"#;

fn find_compiler() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(String::from)
}

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = find_compiler() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    // target/<profile>/deps/<test> -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir: PathBuf = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("librailtrace_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, SOURCE).unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I", include])
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "compiling the C program failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
