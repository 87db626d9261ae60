//! Run-ledger layout: every invocation works inside one run directory under
//! the ledger root (`SEMVID_LEDGER_ROOT` or `./runs`), holding the config
//! copy, artifacts, metrics, logs, and plots.

use std::path::PathBuf;

use semvid_core::config::ExperimentConfig;
use semvid_core::{Error, Result};
use serde::Serialize;

pub const LEDGER_ROOT_ENV: &str = "SEMVID_LEDGER_ROOT";

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Open (creating if needed) the run directory `<ledger root>/<name>`.
    pub fn open(name: &str) -> Result<Self> {
        let base = std::env::var_os(LEDGER_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        let root = base.join(name);
        for sub in ["artifacts", "plots"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root })
    }

    pub fn artifact(&self, rel: &str) -> PathBuf {
        self.root.join("artifacts").join(rel)
    }

    /// Path of an artifact that must already exist; names the missing piece.
    pub fn require(&self, rel: &str, produced_by: &str) -> Result<PathBuf> {
        let p = self.artifact(rel);
        if !p.exists() {
            return Err(Error::Dependency(format!(
                "missing artifact {} (run `{produced_by}` first)",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn artifact_dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.artifact(rel);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Copy the effective config into the run for reproducibility.
    pub fn record_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::write(self.root.join("config"), cfg.to_toml_string()?)?;
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn write_metrics<T: Serialize>(&self, metrics: &T) -> Result<()> {
        let json = serde_json::to_string_pretty(metrics)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(self.metrics_path(), json)?;
        Ok(())
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.ndjson")
    }

    /// Append one row to the run log.
    pub fn log<T: Serialize>(&self, row: &T) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path())?;
        let line =
            serde_json::to_string(row).map_err(|e| Error::Serialization(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
