//! Line-oriented `key=value` config text: the format used for model and
//! training configs, both as standalone files and embedded in checkpoints.
//!
//! Rules: one `key=value` per line, `#` starts a comment, blank lines are
//! ignored, duplicate keys are an error, and any key a reader does not
//! consume is an error (typos must not silently fall back to defaults).

use indexmap::IndexMap;
use std::collections::HashSet;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key=value, got {:?}", lineno + 1, line))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::config(format!("duplicate config key {key:?}")));
        }
    }
    Ok(map)
}

/// Typed consuming reader over parsed pairs. Call the `take_*` getters for
/// every key the config supports, then [`KvReader::finish`]; leftover keys
/// are reported as config errors.
pub struct KvReader {
    map: IndexMap<String, String>,
    taken: HashSet<String>,
}

impl KvReader {
    pub fn from_text(text: &str) -> Result<Self> {
        Ok(KvReader {
            map: parse(text)?,
            taken: HashSet::new(),
        })
    }

    pub fn from_map(map: IndexMap<String, String>) -> Self {
        KvReader {
            map,
            taken: HashSet::new(),
        }
    }

    /// Overlays environment variables with the given prefix onto the parsed
    /// pairs: `<PREFIX>BATCH_SIZE=8` sets key `batch_size`. Environment wins
    /// over file values.
    pub fn apply_env_overrides(&mut self, prefix: &str) {
        let mut overrides: Vec<(String, String)> = std::env::vars()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .map(|rest| (rest.to_ascii_lowercase(), v))
            })
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            self.map.insert(k, v);
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.taken.insert(key.to_string());
        self.map.shift_remove(key)
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        self.take_raw(key).unwrap_or_else(|| default.to_string())
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("key {key:?}: expected integer, got {v:?}"))),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("key {key:?}: expected integer, got {v:?}"))),
        }
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("key {key:?}: expected number, got {v:?}"))),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::config(format!(
                    "key {key:?}: expected true/false, got {v:?}"
                ))),
            },
        }
    }

    /// Comma-separated f64 list.
    pub fn take_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.take_raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::config(format!("key {key:?}: expected number list, got {v:?}"))
                    })
                })
                .collect(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let unknown: Vec<&str> = self.map.keys().map(|s| s.as_str()).collect();
            Err(Error::config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}
