//! Drives the `mlab` binary through the example configs in a scratch
//! directory. Shared by the CLI tests and the acceptance gate.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/configs");
pub const GOLDEN_SWEEP: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/bias_sweep.csv");

pub fn config(name: &str) -> String {
    format!("{CONFIGS}/{name}.toml")
}

/// Every subcommand of the pipeline, in dependency order.
pub const PIPELINE: [&[&str]; 11] = [
    &["gen-data", "-c", "data"],
    &["train", "-c", "cnn"],
    &["train", "-c", "vit"],
    &["train", "-c", "vit_aug"],
    &["bias-sweep", "-c", "sweep"],
    &["lime", "-c", "lime"],
    &["learned-mask", "-c", "mask"],
    &["ablate", "-c", "ablate"],
    &["consistency", "-c", "consistency"],
    &["roar", "-c", "roar"],
    &["slic", "-c", "slic"],
];

/// Runs `mlab` in `dir`; returns stdout on success and stderr otherwise.
pub fn mlab(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| format!("failed to spawn mlab: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "mlab {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Runs the whole pipeline in `dir` from the example configs.
pub fn run_pipeline(dir: &Path) -> Result<(), String> {
    for step in PIPELINE {
        let path = config(step[2]);
        let mut args: Vec<&str> = step.to_vec();
        args[2] = &path;
        mlab(dir, &args)?;
    }
    Ok(())
}

/// All files under `dir` with their contents, sorted by relative path.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack: Vec<PathBuf> = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

/// Outcome of running the pipeline twice in separate directories.
pub struct Rerun {
    pub files: usize,
    pub csv_files: usize,
    /// Relative paths whose bytes differ between the two runs.
    pub mismatched: Vec<String>,
    pub golden_matches: bool,
}

pub fn rerun_pipeline() -> Result<Rerun, String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let mut mismatched: Vec<String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.clone())
        .collect();
    if ta.len() != tb.len() {
        mismatched.push(format!("file count {} vs {}", ta.len(), tb.len()));
    }
    let sweep = std::fs::read(a.path().join("sweep/bias_sweep.csv")).map_err(|e| e.to_string())?;
    if std::env::var_os("MLAB_BLESS").is_some() {
        std::fs::write(GOLDEN_SWEEP, &sweep).map_err(|e| e.to_string())?;
    }
    let golden = std::fs::read(GOLDEN_SWEEP).map_err(|e| format!("{GOLDEN_SWEEP}: {e}"))?;
    Ok(Rerun {
        files: ta.len(),
        csv_files: ta.iter().filter(|(p, _)| p.ends_with(".csv")).count(),
        mismatched,
        golden_matches: sweep == golden,
    })
}
