//! Flat key=value configuration files. The CLI resolves settings as
//! flags > config file > built-in defaults; a trained model also writes its
//! full configuration next to the checkpoint so evaluation can rebuild it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;

/// Parsed key=value file. Lines are `key = value`; blank lines and lines
/// starting with `#` are skipped.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    values: HashMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut values = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                offset: lineno as u64,
                msg: format!("line {}: expected key=value, got {line:?}", lineno + 1),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Format {
                    offset: lineno as u64,
                    msg: format!("line {}: empty key", lineno + 1),
                });
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(KvFile { values })
    }

    pub fn load(path: &Path) -> Result<KvFile> {
        if !path.is_file() {
            return Err(Error::NotFound(format!("config file {}", path.display())));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Arg(format!("config key {key}: cannot parse {v:?}"))
            }),
        }
    }

    /// Comma-separated list value.
    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<T>()
                        .map_err(|_| Error::Arg(format!("config key {key}: bad element {p:?}")))
                })
                .collect::<std::result::Result<Vec<T>, Error>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes every model setting so `eval` can rebuild the exact model.
pub fn model_config_to_kv(cfg: &ModelConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("scales = {}\n", cfg.scales));
    out.push_str(&format!("clip_len = {}\n", cfg.clip_len));
    out.push_str(&format!("offsets = {}\n", join(&cfg.reference_offsets)));
    out.push_str(&format!("p = {}\n", cfg.p));
    out.push_str(&format!("n_top = {}\n", cfg.n_top));
    out.push_str(&format!("classes = {}\n", cfg.class_count));
    out.push_str(&format!("channels = {}\n", join(&cfg.channels)));
    out.push_str(&format!("strides = {}\n", join(&cfg.strides)));
    out.push_str(&format!("fused_channels = {}\n", cfg.fused_channels));
    out.push_str(&format!("sar_depth = {}\n", cfg.sar_depth));
    out.push_str(&format!("input_h = {}\n", cfg.input.0));
    out.push_str(&format!("input_w = {}\n", cfg.input.1));
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out.push_str(&format!("scale_affinity = {}\n", cfg.scale_affinity));
    out.push_str(&format!("freeze_reference = {}\n", cfg.freeze_reference));
    out
}

/// Applies every key present in `kv` on top of `base`; absent keys keep the
/// base value. Clip length follows the offsets when only those are given.
pub fn apply_model_config(kv: &KvFile, base: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    if let Some(v) = kv.get("scales")? {
        cfg.scales = v;
    }
    if let Some(v) = kv.get_list::<i64>("offsets")? {
        cfg.clip_len = v.len() + 1;
        cfg.reference_offsets = v;
    }
    if let Some(v) = kv.get("clip_len")? {
        cfg.clip_len = v;
    }
    if let Some(v) = kv.get("p")? {
        cfg.p = v;
    }
    if let Some(v) = kv.get("n_top")? {
        cfg.n_top = v;
    }
    if let Some(v) = kv.get("classes")? {
        cfg.class_count = v;
    }
    if let Some(v) = kv.get_list("channels")? {
        cfg.channels = v;
    }
    if let Some(v) = kv.get_list("strides")? {
        cfg.strides = v;
    }
    if let Some(v) = kv.get("fused_channels")? {
        cfg.fused_channels = v;
    }
    if let Some(v) = kv.get("sar_depth")? {
        cfg.sar_depth = v;
    }
    if let Some(v) = kv.get("input_h")? {
        cfg.input.0 = v;
    }
    if let Some(v) = kv.get("input_w")? {
        cfg.input.1 = v;
    }
    if let Some(v) = kv.get("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = kv.get("scale_affinity")? {
        cfg.scale_affinity = v;
    }
    if let Some(v) = kv.get("freeze_reference")? {
        cfg.freeze_reference = v;
    }
    Ok(cfg)
}

pub fn save_model_config(path: &Path, cfg: &ModelConfig) -> Result<()> {
    fs::write(path, model_config_to_kv(cfg))?;
    Ok(())
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let kv = KvFile::load(path)?;
    let cfg = apply_model_config(&kv, &ModelConfig::default())?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let kv = KvFile::parse("# comment\n\n  p = 0.25 \nseed=7\n").unwrap();
        assert_eq!(kv.get::<f64>("p").unwrap(), Some(0.25));
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(kv.get::<u64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_line_without_equals() {
        let err = KvFile::parse("p 0.25").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn rejects_unparsable_value() {
        let kv = KvFile::parse("p = soup").unwrap();
        assert!(kv.get::<f64>("p").is_err());
    }

    #[test]
    fn list_values() {
        let kv = KvFile::parse("offsets = -9, -6,-3").unwrap();
        assert_eq!(kv.get_list::<i64>("offsets").unwrap(), Some(vec![-9, -6, -3]));
    }

    #[test]
    fn model_config_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.p = 0.25;
        cfg.scales = 2;
        cfg.reference_offsets = vec![-4, -2];
        cfg.clip_len = 3;
        cfg.freeze_reference = true;
        let text = model_config_to_kv(&cfg);
        let kv = KvFile::parse(&text).unwrap();
        let back = apply_model_config(&kv, &ModelConfig::default()).unwrap();
        assert_eq!(back.p, cfg.p);
        assert_eq!(back.scales, cfg.scales);
        assert_eq!(back.reference_offsets, cfg.reference_offsets);
        assert_eq!(back.clip_len, cfg.clip_len);
        assert_eq!(back.freeze_reference, cfg.freeze_reference);
        back.validate().unwrap();
    }

    #[test]
    fn file_overrides_only_present_keys() {
        let kv = KvFile::parse("p = 0.1").unwrap();
        let cfg = apply_model_config(&kv, &ModelConfig::default()).unwrap();
        assert_eq!(cfg.p, 0.1);
        assert_eq!(cfg.scales, ModelConfig::default().scales);
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = KvFile::load(Path::new("/nonexistent/cfg.txt")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }
}
