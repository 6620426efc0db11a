//! Pair manifests: one `clean,target,output[,key=value...]` record per line.
//!
//! Blank lines and lines starting with `#` are skipped. Relative paths are
//! resolved against the manifest's directory. Per-pair overrides name
//! `attack.*` or `schedule.*` keys; a bare key means `attack.<key>`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::config::resolve_relative;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    /// 1-based line in the manifest.
    pub line: usize,
    pub clean: PathBuf,
    pub target: PathBuf,
    pub output: PathBuf,
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairManifest {
    pub records: Vec<PairRecord>,
}

impl PairManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses manifest text; `path` labels errors and anchors relative paths.
    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut records = Vec::new();
        let mut outputs = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() < 3 {
                return Err(err(line, format!("expected clean,target,output but found {} field(s)", fields.len())));
            }
            let mut paths = [PathBuf::new(), PathBuf::new(), PathBuf::new()];
            for (slot, (name, f)) in paths.iter_mut().zip(["clean", "target", "output"].iter().zip(&fields)) {
                if f.is_empty() {
                    return Err(err(line, format!("empty {name} path")));
                }
                *slot = resolve_relative(path, Path::new(f));
            }
            let mut overrides = Vec::new();
            for f in &fields[3..] {
                let (k, v) = f
                    .split_once('=')
                    .ok_or_else(|| err(line, format!("override {f:?} is not key=value")))?;
                let (k, v) = (k.trim(), v.trim());
                let key = if k.contains('.') { k.to_string() } else { format!("attack.{k}") };
                if !(key.starts_with("attack.") || key.starts_with("schedule.")) {
                    return Err(err(line, format!("per-pair override {key:?} must target attack or schedule")));
                }
                if v.is_empty() {
                    return Err(err(line, format!("override {key:?} has an empty value")));
                }
                overrides.push((key, v.to_string()));
            }
            let [clean, target, output] = paths;
            if !outputs.insert(output.clone()) {
                return Err(err(line, format!("duplicate output path {}", output.display())));
            }
            records.push(PairRecord { line, clean, target, output, overrides });
        }
        Ok(PairManifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
