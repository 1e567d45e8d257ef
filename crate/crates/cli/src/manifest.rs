//! Run manifests and the output-directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::error::{CliError, Result};

/// Manifest written by `solve`; other commands use `<command>.manifest.json`.
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".killbridge.lock";

/// Git-style content hash (`blob <len>\0<bytes>`, SHA-256) of the resolved
/// configuration followed by every table file it reads.
pub fn input_hash(cfg: &Resolved) -> Result<String> {
    let mut content = cfg.to_toml().into_bytes();
    for path in cfg.input_files() {
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        content.extend_from_slice(format!("\n--- {}\n", path.display()).as_bytes());
        content.extend_from_slice(&bytes);
    }
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(&content);
    Ok(format!("sha256:{}", hex::encode(h.finalize())))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
    /// The resolved configuration, as TOML.
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &Resolved) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            input_hash: input_hash(cfg)?,
            inputs: cfg.input_files().iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            summary: serde_json::Value::Null,
            config: cfg.to_toml(),
        })
    }

    pub fn file_name(&self) -> String {
        if self.command == "solve" {
            MANIFEST.to_string()
        } else {
            format!("{}.manifest.json", self.command)
        }
    }

    /// Write the manifest into `dir`, after checking every listed output exists.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for name in &self.outputs {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(CliError::Check(format!("listed output {} was not written", p.display())));
            }
        }
        let path = dir.join(self.file_name());
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                dir: dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(CliError::Locked { .. })));
        drop(a);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn hash_tracks_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let q = dir.path().join("q.csv");
        let cfg_path = dir.path().join("run.toml");
        fs::write(
            &cfg_path,
            "[grid]\nnx = 3\nnt = 2\n[prior]\npreset = \"paper-example\"\n[marginals]\nrho0 = \"paper-example\"\nq = \"q.csv\"\n",
        )
        .unwrap();
        fs::write(&q, "t,x,value\n").unwrap();
        let load = |over: &Overrides| Resolved::load(Some(&cfg_path), over).unwrap();
        let base = input_hash(&load(&Overrides::default())).unwrap();
        assert_eq!(base, input_hash(&load(&Overrides::default())).unwrap());
        fs::write(&q, "t,x,value\n0,0,0\n").unwrap();
        let edited = input_hash(&load(&Overrides::default())).unwrap();
        assert_ne!(base, edited);
        let seeded = input_hash(&load(&Overrides {
            seed: Some(5),
            ..Overrides::default()
        }))
        .unwrap();
        assert_ne!(edited, seeded);
        assert!(base.starts_with("sha256:") && base.len() == 7 + 64);
    }

    #[test]
    fn manifest_requires_listed_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Resolved::load(
            None,
            &Overrides {
                preset: Some("paper-example".into()),
                ..Overrides::default()
            },
        )
        .unwrap();
        let mut m = RunManifest::new("solve", &cfg).unwrap();
        m.outputs.push("P.csv".into());
        assert!(m.write(dir.path()).is_err());
        fs::write(dir.path().join("P.csv"), "").unwrap();
        assert!(m.write(dir.path()).unwrap().is_file());
    }
}
