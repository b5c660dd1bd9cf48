//! Every artifact starts with the same provenance block: `#` comment lines
//! in CSV files, a `meta` object in JSON files.

use std::path::PathBuf;

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

pub struct Emitter {
    dir: PathBuf,
    meta: Meta,
    written: Vec<PathBuf>,
}

impl Emitter {
    pub fn new(dir: PathBuf, meta: Meta) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::io(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Emitter {
            dir,
            meta,
            written: Vec::new(),
        })
    }

    pub fn comments(&self) -> Vec<String> {
        vec![
            format!("{} {}", self.meta.tool, self.meta.version),
            format!("command: {}", self.meta.command),
            format!("config_sha256: {}", self.meta.config_sha256),
            format!("seed: {}", self.meta.seed),
        ]
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    /// Render a CSV through `f`, which receives the header comment lines.
    pub fn csv<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>, &[String]) -> isoshap::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf, &self.comments())?;
        self.write(name, &buf)
    }

    /// Serialise `body` (a struct or map) with a `meta` field added.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), CliError> {
        let mut value = serde_json::to_value(body).map_err(|e| CliError::io(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .expect("JSON artifacts are objects");
        obj.insert(
            "meta".into(),
            serde_json::to_value(&self.meta).map_err(|e| CliError::io(e.to_string()))?,
        );
        let mut text = serde_json::to_string_pretty(&value).map_err(|e| CliError::io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
