//! Output directory bookkeeping: every run writes its resolved config and a
//! manifest listing the files it produced, stamped with the config hash.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_hash: String,
    pub generator_version: &'a str,
    pub git_describe: String,
    pub timestamp: String,
    pub files: Vec<String>,
}

pub struct Output {
    dir: PathBuf,
    command: &'static str,
    files: Vec<String>,
    hash: String,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Output {
    pub fn new(dir: &Path, command: &'static str, cfg: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let mut out = Self {
            dir: dir.to_path_buf(),
            command,
            files: Vec::new(),
            hash: cfg.hash(),
        };
        out.json("resolved_config.json", cfg)?;
        Ok(out)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for a new output file, recorded in the manifest.
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<File>, CliError> {
        Ok(csv::Writer::from_path(self.path(name))?)
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let files = std::mem::take(&mut self.files);
        let m = RunManifest {
            command: self.command,
            config_hash: self.hash.clone(),
            generator_version: qphase_core::datagen::GENERATOR_VERSION,
            git_describe: git_describe(),
            timestamp: timestamp(),
            files,
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(path)
    }
}

/// `"inf"` for the undefined-estimate sentinel, plain decimal otherwise.
pub fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}
