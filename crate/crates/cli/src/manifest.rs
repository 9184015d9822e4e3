//! Run manifests: what was run, with which resolved settings and inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Written before a command does any work and rewritten with the end time
/// once it succeeds.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub path: PathBuf,
    pub command: String,
    pub settings: Vec<(String, String)>,
    pub inputs: Vec<(String, PathBuf, String)>,
    pub seed: Option<u64>,
    pub started: u64,
    pub finished: Option<u64>,
}

impl RunManifest {
    pub fn new(path: PathBuf, command: &str) -> Self {
        Self {
            path,
            command: command.to_string(),
            settings: Vec::new(),
            inputs: Vec::new(),
            seed: None,
            started: now(),
            finished: None,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    /// Records `path` under `role` with its SHA-256 digest.
    pub fn input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((role.to_string(), path.to_path_buf(), digest));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "tool_version = {}", env!("CARGO_PKG_VERSION"));
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "started = {}", self.started);
        match self.finished {
            Some(t) => {
                let _ = writeln!(s, "finished = {t}");
            }
            None => s.push_str("finished = -\n"),
        }
        for (k, v) in &self.settings {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        for (role, path, digest) in &self.inputs {
            let _ = writeln!(s, "input.{role} = {} sha256:{digest}", path.display());
        }
        s
    }

    pub fn write(&self) -> std::io::Result<()> {
        if let Some(parent) = self.path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(&self.path, self.to_text())
    }

    pub fn finish(&mut self) -> std::io::Result<()> {
        self.finished = Some(now());
        self.write()
    }
}
