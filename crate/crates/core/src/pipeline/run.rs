//! Run directories: every output of a command lands under one root.
//!
//! ```text
//! <run>/config.json  manifest.csv  checkpoints/  metrics/  heatmaps/  log.jsonl  outputs.json
//! ```

use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub struct RunDir {
    root: PathBuf,
    produced: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "metrics", "heatmaps"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root: root.to_path_buf(), produced: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of a run-relative file, refusing paths that escape.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if p.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::usage(format!("output path '{rel}' must stay inside the run directory")));
        }
        Ok(self.root.join(p))
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        if !self.produced.iter().any(|x| x == rel) {
            self.produced.push(rel.to_string());
        }
        Ok(p)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.record(rel)?;
        std::fs::write(&p, text)?;
        Ok(p)
    }

    pub fn write_json<S: Serialize>(&mut self, rel: &str, value: &S) -> Result<PathBuf> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Appends one JSON object to `log.jsonl`.
    pub fn log<S: Serialize>(&mut self, event: &S) -> Result<()> {
        let p = self.record("log.jsonl")?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{}", serde_json::to_string(event)?)?;
        Ok(())
    }

    /// Appends one JSON line to a run-relative file.
    pub fn append_jsonl<S: Serialize>(&mut self, rel: &str, value: &S) -> Result<()> {
        let p = self.record(rel)?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }

    /// Writes `outputs.json`, the list of produced files.
    pub fn finish(mut self) -> Result<Vec<String>> {
        self.produced.push("outputs.json".into());
        self.produced.sort();
        self.produced.dedup();
        let list = self.produced.clone();
        std::fs::write(self.root.join("outputs.json"), serde_json::to_string_pretty(&list)? + "\n")?;
        Ok(list)
    }
}
