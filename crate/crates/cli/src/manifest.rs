use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dictolearn::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    /// SHA-256 of `blob <len>\0` followed by the contents, as git hashes blobs.
    pub blob_sha256: String,
}

/// Record of one command invocation, written before the work starts and
/// rewritten with `status = "ok"` when it finishes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Effective settings after flags, file and defaults.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    pub threads: Option<usize>,
    pub timestamp_unix: u64,
    /// Hash over every input blob hash and the effective config.
    pub input_hash: String,
    pub status: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Named sub-stream of the master seed.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64, threads: Option<usize>) -> Self {
        let timestamp_unix =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            sub_seeds: BTreeMap::new(),
            threads,
            timestamp_unix,
            input_hash: String::new(),
            status: "running".into(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputFile { path: path.to_path_buf(), blob_sha256: blob_hash(&bytes) });
        Ok(())
    }

    pub fn sub_seed(&mut self, stream: &str) -> u64 {
        let s = derive_seed(self.seed, stream);
        self.sub_seeds.insert(stream.to_string(), s);
        s
    }

    fn finalize_hash(&mut self) {
        let mut h = Sha256::new();
        for f in &self.inputs {
            h.update(f.blob_sha256.as_bytes());
        }
        for (k, v) in &self.config {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.update(self.seed.to_le_bytes());
        self.input_hash = hex(&h.finalize());
    }

    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.finalize_hash();
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
