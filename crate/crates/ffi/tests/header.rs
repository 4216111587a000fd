use std::path::{Path, PathBuf};
use std::process::Command;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn header() -> String {
    std::fs::read_to_string(header_dir().join("rankheads.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let h = header();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(h.contains(&format!(" {name}(")) || h.contains(&format!("*{name}(")), "{name} missing");
    }
    for item in ["RH_STATUS_DIVERGED = 5", "typedef struct RhHead RhHead;", "double std_error;"] {
        assert!(h.contains(item), "{item}");
    }
}

fn compile(args: &[&str]) {
    let out = Command::new(args[0]).args(&args[1..]).output().expect("C compiler");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = tempfile::tempdir().unwrap();
    let inc = header_dir();
    let c = dir.path().join("check.c");
    std::fs::write(&c, "#include \"rankheads.h\"\nint main(void) { return rh_last_error_length() > 0; }\n").unwrap();
    compile(&[
        "cc",
        "-std=c99",
        "-fsyntax-only",
        "-Wall",
        "-Wextra",
        "-Werror",
        "-I",
        inc.to_str().unwrap(),
        c.to_str().unwrap(),
    ]);
    let cpp = dir.path().join("check.cpp");
    std::fs::write(&cpp, "#include \"rankheads.h\"\nint main() { return rh_last_error_length() > 0; }\n").unwrap();
    compile(&["c++", "-fsyntax-only", "-Wall", "-Werror", "-I", inc.to_str().unwrap(), cpp.to_str().unwrap()]);
}

#[test]
fn c_program_links_against_the_static_library() {
    // test binaries live in target/<profile>/deps; the archive sits one level up
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let archive = profile_dir.join("librankheads_ffi.a");
    assert!(archive.exists(), "{} not built", archive.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "rankheads.h"
int main(void) {
    RhSpectralTable *t = NULL;
    if (rh_spectral_table_new(3, 5, &t) != RH_STATUS_OK) return 1;
    double eta = 0.0;
    if (rh_spectral_table_get(t, 1, RH_SPECTRAL_FIELD_ETA, &eta) != RH_STATUS_OK) return 2;
    rh_spectral_table_free(t);
    if (rh_spectral_table_new(2, 5, &t) != RH_STATUS_INVALID_ARGUMENT) return 3;
    char buf[256];
    rh_last_error_message(buf, sizeof buf);
    RhEstimate e;
    if (rh_close_pair_probability(4, 3.0, 100, 1, &e) != RH_STATUS_OK || e.mean != 1.0) return 4;
    printf("%.12f|%s|%s\n", eta, buf, rh_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let inc = header_dir();
    compile(&[
        "cc",
        "-std=c99",
        "-Wall",
        "-Werror",
        "-I",
        inc.to_str().unwrap(),
        src.to_str().unwrap(),
        archive.to_str().unwrap(),
        "-lpthread",
        "-ldl",
        "-lm",
        "-o",
        exe.to_str().unwrap(),
    ]);
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let parts: Vec<&str> = text.trim_end().split('|').collect();
    assert_eq!(parts[0], "0.866025403784");
    assert!(parts[1].contains("d >= 3"));
    assert_eq!(parts[2], env!("CARGO_PKG_VERSION"));
}
