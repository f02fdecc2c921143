//! Compiles the native fixtures into `$OUT_DIR/fixtures`. Without a C
//! toolchain the crate still builds and the end-to-end tests report
//! themselves as skipped.

use std::env;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

/// Export counts of the generated wide libraries.
const WIDE: [usize; 2] = [10, 1000];

struct Unit {
    out: &'static str,
    sources: &'static [&'static str],
    shared: bool,
    cxx: bool,
    flags: &'static [&'static str],
    libs: &'static [&'static str],
}

const UNITS: &[Unit] = &[
    Unit { out: "libfxd.so", sources: &["libfxd.c"], shared: true, cxx: false, flags: &[], libs: &[] },
    Unit { out: "liboracle.so", sources: &["liboracle.c"], shared: true, cxx: false, flags: &[], libs: &["pthread"] },
    Unit { out: "libfxa.so", sources: &["libfxa.c"], shared: true, cxx: false, flags: &[], libs: &["fxd", "oracle"] },
    Unit { out: "libfxb.so", sources: &["libfxb.c"], shared: true, cxx: false, flags: &[], libs: &["fxa", "oracle"] },
    Unit { out: "libfxc.so", sources: &["libfxc.c"], shared: true, cxx: false, flags: &[], libs: &[] },
    Unit { out: "libtj3.so", sources: &["libtj3.c"], shared: true, cxx: false, flags: &[], libs: &[] },
    Unit { out: "libtj2.so", sources: &["libtj2.c"], shared: true, cxx: false, flags: &[], libs: &["tj3"] },
    Unit { out: "libtj1.so", sources: &["libtj1.c"], shared: true, cxx: false, flags: &[], libs: &["tj2"] },
    Unit { out: "libmcount.so", sources: &["libmcount.c"], shared: true, cxx: false, flags: &[], libs: &["dl"] },
    Unit {
        out: "fx_driver",
        sources: &["fx_driver.c"],
        shared: false,
        cxx: false,
        flags: &[],
        libs: &["fxa", "fxb", "tj1", "oracle", "dl", "pthread"],
    },
    Unit {
        out: "fx_eager",
        sources: &["fx_driver.c"],
        shared: false,
        cxx: false,
        flags: &["-Wl,-z,now"],
        libs: &["fxa", "fxb", "tj1", "oracle", "dl", "pthread"],
    },
    Unit { out: "fx_nplt", sources: &["fx_nplt.c"], shared: false, cxx: false, flags: &["-fno-plt"], libs: &["fxa", "oracle"] },
    Unit { out: "fx_mcount", sources: &["fx_mcount.c"], shared: false, cxx: false, flags: &[], libs: &["mcount", "fxa"] },
    Unit { out: "fx_strtree", sources: &["fx_strtree.cpp"], shared: false, cxx: true, flags: &["-O0"], libs: &[] },
];

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().map(|o| o.status.success()).unwrap_or(false)
}

fn compile(cc: &str, out_dir: &Path, out: &str, sources: &[PathBuf], args: &[String]) {
    let mut cmd = Command::new(cc);
    cmd.args(sources).arg("-o").arg(out_dir.join(out)).args(args);
    let o = cmd.output().unwrap_or_else(|e| panic!("running {cc}: {e}"));
    if !o.status.success() {
        panic!("building fixture {out} failed:\n{:?}\n{}", cmd, String::from_utf8_lossy(&o.stderr));
    }
}

fn common_args(out_dir: &Path, shared: bool) -> Vec<String> {
    let mut a = vec![
        "-g".to_string(),
        "-Wall".into(),
        format!("-L{}", out_dir.display()),
        "-Wl,-rpath,$ORIGIN".into(),
        "-Wl,-z,lazy".into(),
    ];
    if shared {
        a.extend(["-shared".into(), "-fPIC".into()]);
    }
    a
}

fn wide_sources(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut lib = String::from("/* generated */\n");
    let mut drv = String::from("/* generated */\n#include <stdio.h>\n#include <stdlib.h>\n#include <string.h>\n\n");
    for i in 0..n {
        writeln!(lib, "long w_{i}(long x) {{ return x + {i}; }}").unwrap();
        writeln!(drv, "long w_{i}(long x);").unwrap();
    }
    drv.push_str(
        "\nstatic long rss_kb(void) {\n    FILE *f = fopen(\"/proc/self/status\", \"r\");\n    char line[256];\n    long v = -1;\n    while (f && fgets(line, sizeof line, f))\n        if (strncmp(line, \"VmRSS:\", 6) == 0)\n            v = atol(line + 6);\n    if (f)\n        fclose(f);\n    return v;\n}\n\nint main(void) {\n    long sum = 0;\n",
    );
    for i in 0..n {
        writeln!(drv, "    sum += w_{i}(1);").unwrap();
    }
    writeln!(drv, "    printf(\"wide n={n} sum=%ld rss_kb=%ld\\n\", sum, rss_kb());\n    return 0;\n}}").unwrap();
    let lib_path = dir.join(format!("libwide{n}.c"));
    let drv_path = dir.join(format!("fx_wide{n}.c"));
    fs::write(&lib_path, lib).unwrap();
    fs::write(&drv_path, drv).unwrap();
    (lib_path, drv_path)
}

fn main() {
    println!("cargo::rustc-check-cfg=cfg(xflow_no_toolchain)");
    println!("cargo:rerun-if-changed=fixtures");
    println!("cargo:rerun-if-changed=build.rs");
    let src = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap()).join("fixtures");
    let out_dir = PathBuf::from(env::var("OUT_DIR").unwrap()).join("fixtures");

    if !have("gcc") || !have("g++") {
        println!("cargo:warning=no C toolchain; end-to-end fixtures are skipped");
        println!("cargo:rustc-cfg=xflow_no_toolchain");
        println!("cargo:rustc-env=XFLOW_FIXTURE_DIR=");
        return;
    }
    fs::create_dir_all(&out_dir).unwrap();

    for u in UNITS {
        let sources: Vec<_> = u.sources.iter().map(|s| src.join(s)).collect();
        let mut args = vec![format!("-I{}", src.display())];
        // Optimized by default; sibling calls in the tail-jump libraries
        // depend on it.
        if !u.flags.contains(&"-O0") {
            args.push("-O2".into());
        }
        args.extend(common_args(&out_dir, u.shared));
        // After the common arguments so `-z now` overrides `-z lazy`.
        args.extend(u.flags.iter().map(|s| s.to_string()));
        args.extend(u.libs.iter().map(|l| format!("-l{l}")));
        compile(if u.cxx { "g++" } else { "gcc" }, &out_dir, u.out, &sources, &args);
    }

    for n in WIDE {
        let (lib, drv) = wide_sources(&out_dir, n);
        let mut args = vec!["-O1".to_string()];
        args.extend(common_args(&out_dir, true));
        compile("gcc", &out_dir, &format!("libwide{n}.so"), &[lib], &args);
        let mut args = vec!["-O1".to_string()];
        args.extend(common_args(&out_dir, false));
        args.push(format!("-lwide{n}"));
        compile("gcc", &out_dir, &format!("fx_wide{n}"), &[drv], &args);
    }

    println!("cargo:rustc-env=XFLOW_FIXTURE_DIR={}", out_dir.display());
}
