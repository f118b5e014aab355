use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::BudgetLedger;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Wall-clock times in milliseconds since the Unix epoch. The only
/// non-reproducible part of a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    /// `ok` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
    /// Budget ledger per method (or stage) and seed.
    pub budget: BTreeMap<String, BudgetLedger>,
    pub timestamps: Timestamps,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            status: "ok".into(),
            error: None,
            files: Vec::new(),
            budget: BTreeMap::new(),
            timestamps: Timestamps { started_unix_ms: now_ms(), finished_unix_ms: 0 },
        }
    }

    pub fn fail(&mut self, err: &Error) {
        self.status = "failed".into();
        self.error = Some(err.to_string().replace('\n', " "));
    }

    /// Lists every file under `out` (except the manifest itself) with its
    /// digest, stamps the finish time and writes `<out>/manifest`.
    pub fn finish(&mut self, out: &Path) -> Result<PathBuf> {
        self.files = scan_files(out)?;
        self.timestamps.finished_unix_ms = now_ms();
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!("manifest format version {} not supported", m.format_version)));
        }
        Ok(m)
    }

    /// The manifest without its timestamps, for reproducibility comparisons.
    pub fn reproducible_part(&self) -> RunManifest {
        RunManifest { timestamps: Timestamps::default(), ..self.clone() }
    }
}

fn scan_files(root: &Path) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push(FileEntry { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Output directory with the fixed sub-layout.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub const SUBDIRS: [&'static str; 4] = ["checkpoints", "couplings", "reports", "figures"];

    pub fn create(root: &Path) -> Result<Self> {
        for sub in Self::SUBDIRS {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(OutputDir { root: root.to_path_buf() })
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }

    pub fn write(&self, sub: &str, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(sub, name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
