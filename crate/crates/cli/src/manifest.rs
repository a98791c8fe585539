use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let mut file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    let sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256,
        bytes,
    })
}

/// Written next to every output. Contains no timestamps, so reruns reproduce it exactly.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Arguments as given, program name excluded.
    pub argv: Vec<String>,
    /// Every flag of the command after defaults are applied.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub notes: Vec<String>,
}

/// What a command did, for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub notes: Vec<String>,
    /// Default manifest location; `None` means only write one when asked.
    pub manifest: Option<PathBuf>,
}

impl Outcome {
    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }
}

impl RunManifest {
    pub fn build(command: &str, argv: Vec<String>, config: serde_json::Value, outcome: &Outcome) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            argv,
            config,
            seeds: outcome.seeds.clone(),
            inputs: outcome.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            outputs: outcome.outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            notes: outcome.notes.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("cannot write manifest {}", path.display()))
    }
}

/// `<path>.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
