//! Machine-readable run reports and the wall-clock sidecar.
//!
//! The report file is deterministic for identical inputs: stages appear in
//! execution order, metric maps are sorted, and no timing data enters it.
//! Wall-clock durations go to a separate sidecar file excluded from the
//! reproducibility contract.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs::File;
use std::io::{BufWriter, Read, Write as IoWrite};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use gramdf::error::Result;

#[derive(Debug, Serialize)]
pub struct StageReport {
    pub name: String,
    pub pass: bool,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl StageReport {
    pub fn new(name: &str) -> Self {
        StageReport {
            name: name.to_string(),
            pass: true,
            metrics: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.metrics.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub stages: Vec<StageReport>,
    pub pass: bool,
}

impl RunReport {
    pub fn new(config_hash: String) -> Self {
        RunReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            input_hashes: BTreeMap::new(),
            stages: Vec::new(),
            pass: true,
        }
    }

    pub fn push(&mut self, stage: StageReport) {
        self.pass &= stage.pass;
        self.stages.push(stage);
    }

    /// Record the content hash of an artifact under its file name.
    pub fn hash_artifact(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.input_hashes.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| gramdf::Error::Format(format!("report encode: {e}")))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = [0u8; 65536];
    loop {
        let read = file.read(&mut buf)?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").expect("writing to string");
    }
    Ok(hex)
}

pub fn sha256_value(value: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(value.to_string().as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").expect("writing to string");
    }
    hex
}

/// Wall-clock seconds per stage, written beside the report.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    pub fn record(&mut self, name: &str, seconds: f64) {
        self.stages.push((name.to_string(), seconds));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| gramdf::Error::Format(format!("timings encode: {e}")))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}
