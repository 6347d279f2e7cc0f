//! `matcomp-lab`: runs every experiment from a flat JSON config.
//!
//! ```text
//! matcomp-lab <command> --config <path> [--out <dir>] [--seed <u64>] [key=value ...]
//! ```
//!
//! Exit codes: 0 on success, 1 when the run fails, 2 when the invocation or
//! configuration is invalid (nothing is written in that case).

pub mod config;
mod jobs;
pub mod reproduce;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;

use matcomp_core::train::RunManifest;

pub use jobs::Job;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration.
    Usage(String),
    /// The run started and failed.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "invalid configuration: {m}"),
            Self::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "matcomp-lab", version, about = "Masked matrix completion experiments")]
pub struct Cli {
    /// train, retrain-component, eval, nucnorm, compare, ablate, switch,
    /// patch, permute-positions, token-intervene, probe, embed-report,
    /// attn-export, detect-drop or reproduce.
    pub command: String,
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (defaults to runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value overrides applied on top of the config file.
    pub overrides: Vec<String>,
}

/// Validates the invocation and runs it. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(flags_to_overrides(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let job = match Job::prepare(&cli) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("matcomp-lab: {e}");
            return e.exit_code();
        }
    };
    match run_job(&job) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("matcomp-lab: {e}");
            e.exit_code()
        }
    }
}

/// Every config key also works as a flag: `--samples 64` and
/// `--samples=64` become the override `samples=64`.
fn flags_to_overrides<I, T>(args: I) -> Vec<OsString>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    const OWN: [&str; 5] = ["config", "out", "seed", "help", "version"];
    let mut out = Vec::new();
    let mut it = args.into_iter().map(Into::into).peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|a| a.strip_prefix("--")).map(str::to_string) else {
            out.push(arg);
            continue;
        };
        let name = flag.split('=').next().unwrap_or_default().to_string();
        if name.is_empty() || OWN.contains(&name.as_str()) {
            out.push(arg);
        } else if flag.contains('=') {
            out.push(flag.into());
        } else if let Some(value) = it.next_if(|v| !v.to_string_lossy().starts_with("--")) {
            out.push(format!("{name}={}", value.to_string_lossy()).into());
        } else {
            // A bare flag is a boolean switch.
            out.push(format!("{name}=true").into());
        }
    }
    out
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    manifest.write(&dir.join("run.json")).map_err(runtime)
}

/// Runs a prepared job and always leaves a `run.json` behind.
pub fn run_job(job: &Job) -> Result<(), CliError> {
    let start = Instant::now();
    let out = job.out_dir();
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut manifest = RunManifest::new(job.command(), job.resolved().clone(), vec![job.seed()]);
    let result = job.run(&mut manifest);
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Err(e) = &result {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
    }
    write_manifest(out, &manifest)?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overrides() {
        let args = ["matcomp-lab", "eval", "--out", "o", "--samples", "64", "--checkpoint=c", "--strict", "--seed", "2"];
        let got: Vec<String> = flags_to_overrides(args)
            .into_iter()
            .map(|a| a.to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            got,
            ["matcomp-lab", "eval", "--out", "o", "samples=64", "checkpoint=c", "strict=true", "--seed", "2"]
        );
        let cli = Cli::try_parse_from(got).unwrap();
        assert_eq!(cli.overrides, ["samples=64", "checkpoint=c", "strict=true"]);
        assert_eq!(cli.seed, Some(2));
    }
}
