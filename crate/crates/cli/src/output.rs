//! Artifact layout: `<dir>/<experiment>/<timestamp>[-k]/`, never overwritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiments::ExperimentOutput;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const METADATA_FILE: &str = "metadata.json";
pub const CONFIG_FILE: &str = "config.toml";

/// The only writer of a run directory.
pub struct RunWriter {
    dir: PathBuf,
}

impl RunWriter {
    /// Creates a fresh directory for this run; a clash with an earlier run
    /// gets a numeric suffix.
    pub fn create(root: &Path, experiment: &str, started: DateTime<Utc>) -> CliResult<Self> {
        let parent = root.join(experiment);
        fs::create_dir_all(&parent).map_err(|e| CliError::io(parent.display().to_string(), e))?;
        let stamp = started.format("%Y%m%dT%H%M%S%.3fZ").to_string();
        for k in 0u32.. {
            let name = if k == 0 { stamp.clone() } else { format!("{stamp}-{k}") };
            let dir = parent.join(name);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(Self { dir }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(dir.display().to_string(), e)),
            }
        }
        unreachable!("suffix space exhausted")
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        let err = |e| CliError::io(path.display().to_string(), e);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(err)?;
        f.write_all(bytes).map_err(err)
    }

    fn write_lines(&self, name: &str, rows: impl Iterator<Item = Value>) -> CliResult<()> {
        let mut buf = String::new();
        for r in rows {
            buf.push_str(&r.to_string());
            buf.push('\n');
        }
        self.write(name, buf.as_bytes())
    }

    fn write_json(&self, name: &str, v: &Value) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(v).expect("json value serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Writes every artifact of a finished run and returns its directory.
pub fn write_run(
    root: &Path,
    cfg: &ExperimentConfig,
    out: &ExperimentOutput,
    started: DateTime<Utc>,
    finished: DateTime<Utc>,
) -> CliResult<PathBuf> {
    let w = RunWriter::create(root, &cfg.experiment.id, started)?;
    w.write(SUMMARY_FILE, out.summary.to_csv().as_bytes())?;
    w.write_lines(RESULTS_FILE, out.records.iter().cloned())?;
    w.write_lines(VERDICTS_FILE, out.verdicts.iter().map(|v| serde_json::to_value(v).expect("verdict serializes")))?;
    for (name, doc) in &out.artifacts {
        w.write_json(&format!("{name}.json"), doc)?;
    }
    w.write(CONFIG_FILE, cfg.to_toml().as_bytes())?;
    w.write_json(
        PROVENANCE_FILE,
        &json!({
            "experiment": cfg.experiment.id,
            "config_sha256": cfg.hash(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.sde.seed,
            "passed": out.passed(),
            "notes": out.notes,
        }),
    )?;
    let elapsed = (finished - started).num_milliseconds() as f64 / 1e3;
    w.write_json(
        METADATA_FILE,
        &json!({
            "started": started.to_rfc3339_opts(SecondsFormat::Millis, true),
            "finished": finished.to_rfc3339_opts(SecondsFormat::Millis, true),
            "elapsed_seconds": elapsed,
        }),
    )?;
    Ok(w.dir.clone())
}
