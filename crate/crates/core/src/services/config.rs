//! Flat `key = value` config files for nodes and the registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::node::NodeConfig;
use super::registry::RegistryConfig;
use crate::model::{is_valid_address, SiteId};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<ConfigMap, String> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(format!("line {}: empty key", n + 1));
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(format!("line {}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn load(path: &Path) -> Result<ConfigMap, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        ConfigMap::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing `{key}`"))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| format!("`{key}` must be a number, got `{v}`"))
            })
            .transpose()
    }

    fn address(&self, key: &str) -> Result<String, String> {
        let a = self.required(key)?;
        if !is_valid_address(a) {
            return Err(format!("`{key}` must be host:port, got `{a}`"));
        }
        Ok(a.to_string())
    }

    fn secret(&self, key: &str) -> Result<Vec<u8>, String> {
        let s = self.required(key)?;
        if s.len() < 16 {
            return Err(format!("`{key}` must be at least 16 bytes"));
        }
        Ok(s.as_bytes().to_vec())
    }

    fn flag(&self, key: &str) -> Result<Option<bool>, String> {
        match self.get(key) {
            None => Ok(None),
            Some("true" | "yes" | "1") => Ok(Some(true)),
            Some("false" | "no" | "0") => Ok(Some(false)),
            Some(v) => Err(format!("`{key}` must be true or false, got `{v}`")),
        }
    }

    pub fn node_config(&self) -> Result<NodeConfig, String> {
        let site = SiteId::new(self.required("site_id")?).map_err(|e| e.to_string())?;
        let mut c = NodeConfig::new(
            site,
            &self.address("listen")?,
            &self.address("registry")?,
            &self.secret("site_secret")?,
            &self.secret("vo_secret")?,
        );
        c.data_dir = self.get("data_dir").map(PathBuf::from);
        if let Some(n) = self.get("display_name") {
            c.display_name = n.to_string();
        }
        if let Some(t) = self.number("query_timeout_ms")? {
            c.query_timeout_ms = t;
        }
        if let Some(p) = self.number("poll_interval_s")? {
            c.poll_interval_s = p;
        }
        if let Some(p) = self.flag("public")? {
            c.public = p;
        }
        Ok(c)
    }

    pub fn registry_config(&self) -> Result<RegistryConfig, String> {
        Ok(RegistryConfig {
            listen: self.address("listen")?,
            vo_secret: self.secret("vo_secret")?,
            data_dir: self.get("data_dir").map(PathBuf::from),
            token_ttl_s: self
                .number("token_ttl_s")?
                .unwrap_or(super::auth::DEFAULT_TTL_S),
        })
    }
}
