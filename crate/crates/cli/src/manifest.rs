//! Run manifest: the resolved config, output digests and check results.
//!
//! `manifest.json` is written with status `incomplete` before any data file,
//! and rewritten once everything is on disk. A run that stops in between
//! leaves the incomplete marker behind. Wall-clock time lives only here, so
//! the data files stay byte-reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::experiments::{self, Check};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Incomplete,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: Status,
    pub experiment: String,
    pub library_version: String,
    pub cli_version: String,
    pub seed: u64,
    pub config: toml::Table,
    pub outputs: Vec<OutputDigest>,
    pub checks: Vec<Check>,
    pub all_checks_passed: Option<bool>,
    pub wall_clock_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.manifest.checks.iter().all(|c| c.passed)
    }
}

/// Runs the experiment and writes manifest and data files into the
/// configured output directory.
pub fn run_experiment(r: &Resolved) -> Result<RunReport> {
    let dir = r.out_dir();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(MANIFEST_NAME);
    let start = Instant::now();
    let mut m = RunManifest {
        status: Status::Incomplete,
        experiment: r.experiment.to_string(),
        library_version: seqelbo::VERSION.to_string(),
        cli_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: r.seed(),
        config: r.table.clone(),
        outputs: Vec::new(),
        checks: Vec::new(),
        all_checks_passed: None,
        wall_clock_seconds: None,
        error: None,
    };
    m.write(&path)?;

    let outcome = match experiments::run(r) {
        Ok(o) => o,
        Err(e) => {
            m.status = Status::Failed;
            m.error = Some(format!("{e:#}"));
            m.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
            m.write(&path)?;
            return Err(e);
        }
    };
    for a in &outcome.artifacts {
        let p = dir.join(&a.name);
        fs::write(&p, &a.bytes).with_context(|| format!("writing {}", p.display()))?;
        m.outputs.push(OutputDigest {
            file: a.name.clone(),
            bytes: a.bytes.len() as u64,
            sha256: sha256_hex(&a.bytes),
        });
    }
    m.all_checks_passed = Some(outcome.checks.iter().all(|c| c.passed));
    m.checks = outcome.checks;
    m.status = Status::Complete;
    m.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    m.write(&path)?;
    Ok(RunReport {
        manifest_path: path,
        manifest: m,
    })
}
