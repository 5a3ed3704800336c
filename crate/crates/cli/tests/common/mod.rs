#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub const GOLDEN_FILES: [&str; 4] = ["plan.json", "tokens.txt", "summary.csv", "long.csv"];
pub const BLESS_ENV: &str = "SWAPFLOW_BLESS";

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (u8, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("swapflow").chain(args.iter().copied());
    let code = swapflow_cli::main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "swapflow {args:?} failed: {err}");
    out
}

pub fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// genmodel → calibrate → pack → plan → run (sim) → report in `dir`.
/// Writes `tokens.txt` with the decoded tokens.
pub fn golden_pipeline(dir: &Path) {
    let f = |n: &str| p(dir, n);
    ok(&["genmodel", "--layers", "8", "--hidden", "64", "--dtype", "q4b32", "--seed", "7", "--out", &f("model.json")]);
    fs::write(dir.join("prompts.txt"), "1,2,3,4,5\n9 8 7 6\n11,12,13,14,15,16\n").unwrap();
    ok(&[
        "calibrate",
        "--model",
        &f("model.json"),
        "--prompts",
        &f("prompts.txt"),
        "--out",
        &f("thresholds.json"),
        "--trace-out",
        &f("acts.csv"),
    ]);
    ok(&["pack", "--model", &f("model.json"), "--group-size", "2", "--out", &f("model.awsp")]);
    ok(&[
        "plan",
        "--model",
        &f("model.awsp"),
        "--memory-budget",
        "150000",
        "--kv",
        "20000",
        "--calib-trace",
        &f("acts.csv"),
        "--out",
        &f("plan.json"),
    ]);
    let tokens = ok(&[
        "run",
        "--store",
        &f("model.awsp"),
        "--plan",
        &f("plan.json"),
        "--thresholds",
        &f("thresholds.json"),
        "--prompt-tokens",
        "3,1,4,1,5",
        "--n-tokens",
        "8",
        "--mode",
        "sim",
        "--seed",
        "7",
        "--trace",
        &f("trace.csv"),
    ]);
    fs::write(dir.join("tokens.txt"), tokens).unwrap();
    ok(&["report", "--trace", &f("trace.csv"), "--summary", &f("summary.csv"), "--long", &f("long.csv")]);
}

/// Compares the pipeline outputs in `dir` with the committed golden files,
/// or rewrites them when `bless` is set. Returns the mismatching names.
pub fn compare_golden(dir: &Path, bless: bool) -> Vec<String> {
    let mut bad = Vec::new();
    for name in GOLDEN_FILES {
        let got = fs::read(dir.join(name)).unwrap();
        let path = golden_dir().join(name);
        if bless {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &got).unwrap();
        } else if fs::read(&path).ok().as_deref() != Some(got.as_slice()) {
            bad.push(name.to_string());
        }
    }
    bad
}
