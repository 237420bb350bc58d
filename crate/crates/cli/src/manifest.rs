use std::path::Path;

use riot_core::Result;
use serde::Serialize;

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub args: &'a [String],
    /// The configuration document exactly as read.
    pub config: &'a str,
    /// The configuration after command-line overrides.
    pub resolved: String,
    pub seed: u64,
    pub fingerprint: String,
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

impl Manifest<'_> {
    /// Writes `manifest.json` and the verbatim `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.toml"), self.config)?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| riot_core::Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}
