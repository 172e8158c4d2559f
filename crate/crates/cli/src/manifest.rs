//! One manifest per run: what went in, what came out, and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::error::{write, CliResult};

/// SHA-256 over `blob <len>\0<bytes>`, the object hash git would use under
/// its SHA-256 object format.
pub fn blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunManifest {
    command: String,
    started: Instant,
    entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        let mut entries = BTreeMap::new();
        if let Some(s) = seed {
            entries.insert("seed".to_string(), s.to_string());
        }
        Self {
            command: command.to_string(),
            started: Instant::now(),
            entries,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn config(&mut self, kv: &BTreeMap<String, String>) {
        for (k, v) in kv {
            self.entries.insert(format!("config.{k}"), v.clone());
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.set(&format!("input.{role}"), path.display());
    }

    /// Records an output file and its content hash.
    pub fn output(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.set(&format!("output.{role}"), path.display());
        self.set(&format!("sha256.{role}"), blob_sha256(bytes));
    }

    pub fn time(&mut self, key: &str, secs: f64) {
        self.set(&format!("timing.{key}"), format!("{secs:.3}"));
    }

    pub fn render(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("timing.total_secs={:.3}\n", self.started.elapsed().as_secs_f64()));
        s
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write(path, self.render())
    }
}

/// `<file>.manifest` next to a file output, `<dir>/manifest.txt` for directories.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.txt")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}
