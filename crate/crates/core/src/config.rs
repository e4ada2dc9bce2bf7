//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Every
//! configurable struct implements [`KvConfig`] so files, CLI overrides and
//! `--help` listings share one key namespace.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub trait KvConfig {
    /// Applies one entry. Unknown keys are an error.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;

    /// Current values of every key, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }

    /// Serializes back to the file format.
    fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Parses `key = value` lines, returning `(line, key, value)` triples.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(usize, String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected key = value", i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Applies every entry of `text` on top of `cfg`.
pub fn apply_kv<T: KvConfig>(cfg: &mut T, text: &str) -> std::result::Result<(), String> {
    for (line, k, v) in parse_kv(text)? {
        cfg.set(&k, &v).map_err(|e| format!("line {line}: {e}"))?;
    }
    cfg.validate()
}

/// Reads `path` and applies it on top of the defaults of `T`.
pub fn load<T: KvConfig + Default>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = T::default();
    apply_kv(&mut cfg, &text).map_err(|e| Error::parse(path, e))?;
    Ok(cfg)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

pub(crate) fn parse_band(key: &str, value: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = value.split_once(',').ok_or_else(|| format!("`{key}` expects lo,hi"))?;
    let lo: f64 = parse_value(key, lo.trim())?;
    let hi: f64 = parse_value(key, hi.trim())?;
    if !(lo <= hi) {
        return Err(format!("`{key}` band is empty: {lo} > {hi}"));
    }
    Ok((lo, hi))
}
