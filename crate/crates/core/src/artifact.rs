//! Provenance header shared by every file the toolchain writes.
//!
//! Each output starts with one `#` comment line naming the tool version and
//! a short hash of the resolved run configuration. Readers skip leading
//! comment lines.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "boter";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
}

impl Provenance {
    /// Hashes the canonical text of a resolved configuration.
    pub fn from_config_text(text: &str) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Self { config_hash: hex }
    }

    pub fn header_line(&self) -> String {
        format!("# {TOOL_NAME} {TOOL_VERSION} config={}", self.config_hash)
    }
}

/// Writes `body` after the provenance line, creating parent directories.
pub fn write_text(path: &Path, prov: &Provenance, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = prov.header_line();
    text.push('\n');
    text.push_str(body);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a file and drops its leading `#` comment lines.
pub fn read_text(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(strip_comments(&text).to_string())
}

pub fn strip_comments(text: &str) -> &str {
    let mut rest = text;
    while rest.starts_with('#') {
        rest = rest.split_once('\n').map_or("", |(_, tail)| tail);
    }
    rest
}
