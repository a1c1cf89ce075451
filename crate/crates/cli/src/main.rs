use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::Parser;
use toml::Value;

use seqelbo_cli::{parse_override, resolve, run_experiment, Experiment};

/// Run one experiment and write its data files, traces and manifest.
///
/// Any config key can also be given as a flag: `--lr 0.05` or `--lr=0.05`
/// is the same as `--set lr=0.05`. Flags win over the config file.
///
/// Exit status: 0 if every check passed, 1 if a check failed, 2 on error.
#[derive(Debug, Parser)]
#[command(name = "seqelbo", version)]
struct Cli {
    experiment: Experiment,
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

const OWN_FLAGS: [&str; 6] = ["config", "seed", "out", "set", "help", "version"];

/// Rewrites `--key value` / `--key=value` for config keys into `--set key=value`.
/// A bare `--flag` followed by another flag (or nothing) means `flag=true`.
fn mirror_flags(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            out.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if key.is_empty() || OWN_FLAGS.contains(&key.as_str()) {
            out.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.peek() {
                Some(next) if !next.starts_with("--") => it.next().expect("peeked"),
                _ => "true".to_string(),
            },
        };
        out.push("--set".into());
        out.push(format!("{key}={value}"));
    }
    out
}

fn run(cli: Cli) -> Result<bool> {
    let mut overrides: Vec<(String, Value)> = cli.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| anyhow!("--seed must be at most {}", i64::MAX))?;
        overrides.push(("seed".into(), Value::Integer(seed)));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out".into(), Value::String(out.to_string_lossy().into_owned())));
    }
    let resolved = resolve(cli.experiment, cli.config.as_deref(), &overrides)?;
    eprintln!("# {} (resolved config)\n{}", resolved.experiment, toml::to_string(&resolved.table)?);

    let report = run_experiment(&resolved)?;
    for c in &report.manifest.checks {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for o in &report.manifest.outputs {
        eprintln!("wrote {}", resolved.out_dir().join(&o.file).display());
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(mirror_flags(std::env::args().collect())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
