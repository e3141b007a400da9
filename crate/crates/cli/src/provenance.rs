//! Provenance records attached to every output: tool version, subcommand,
//! resolved configuration and its SHA-256.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use ffbspca::{Error, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "ffbspca";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub config_hash: String,
}

/// A JSON document with the provenance record as its first field.
#[derive(Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub provenance: &'a Provenance,
    #[serde(flatten)]
    pub body: &'a T,
}

impl Provenance {
    /// The hash covers the canonical (key-sorted, compact) JSON of `config`.
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = hex(&Sha256::digest(serde_json::to_vec(&config)?));
        Ok(Provenance {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            config,
            config_hash,
        })
    }

    /// One-line summary that fits an 80-byte MRC label.
    pub fn label(&self) -> String {
        format!("{} {} {} cfg {}", self.tool, self.version, self.command, &self.config_hash[..32])
    }

    /// Writes `<path>.prov.json` next to a binary or CSV output.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, body: &T, path: &Path) -> Result<()> {
        fs::write(path, self.to_json(body)? + "\n")?;
        Ok(())
    }

    pub fn to_json<T: Serialize>(&self, body: &T) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Stamped { provenance: self, body })?)
    }

    /// Inserts the record into an existing JSON object file.
    pub fn embed_in_json_file(&self, path: &Path) -> Result<()> {
        let mut doc: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Internal(format!("{} is not a JSON object", path.display())))?;
        obj.insert("provenance".into(), serde_json::to_value(self)?);
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".prov.json");
    PathBuf::from(s)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
