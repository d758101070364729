//! Flat `key = value` run configuration with `#` comments. Flags override
//! file values; the fully resolved config is echoed into the output
//! directory and hashed to give the directory its content-address suffix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rpf_core::{Error, Result};
use sha2::{Digest, Sha256};

/// Keys excluded from the content hash: they affect where and how fast the
/// run happens, not what it computes.
const UNHASHED: &[&str] = &["out", "threads"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    schema: Vec<&'static str>,
}

impl RunConfig {
    /// Builds a config for a command given its known keys, an optional
    /// config file, and `key=value` flag overrides (applied last).
    pub fn load(
        schema: &[&'static str],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self {
            values: BTreeMap::new(),
            schema: schema.to_vec(),
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::ParseError {
                        line: lineno + 1,
                        msg: format!("expected 'key = value', got '{line}'"),
                    });
                };
                cfg.set(k.trim(), v.trim())?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.schema.contains(&key) {
            return Err(Error::ConfigError(format!(
                "unknown key '{key}' (known: {})",
                self.schema.join(", ")
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.get(key)
            .map(str::to_string)
            .ok_or_else(|| Error::ConfigError(format!("missing required key '{key}'")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::ConfigError(format!("{key} = '{v}' is not an integer"))),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::ConfigError(format!("{key} = '{v}' is not an integer"))),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::ConfigError(format!("{key} = '{v}' is not a number"))),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::ConfigError(format!("{key} = '{v}' is not a bool"))),
        }
    }

    /// Canonical resolved form: sorted `key = value` lines.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 over the hashed subset of the resolved config.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in &self.values {
            if UNHASHED.contains(&k.as_str()) {
                continue;
            }
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Resolves the output directory `<out>-<hash8>`, creates it, and echoes
    /// the resolved config into it. Re-running with an identical config is
    /// allowed; a hash collision with a different resolved config aborts.
    pub fn make_out_dir(&self) -> Result<PathBuf> {
        let out = self.require("out")?;
        let dir = PathBuf::from(format!("{out}-{}", &self.hash()[..8]));
        let echo = dir.join("config.resolved");
        let resolved = self.resolved();
        if echo.exists() {
            let existing = fs::read_to_string(&echo)?;
            if existing != resolved {
                return Err(Error::ConfigError(format!(
                    "{} exists with a different resolved config",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(&dir)?;
        fs::write(&echo, resolved)?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# a comment\ncount = 5  # trailing\nseed = 3\n").unwrap();
        let cfg = RunConfig::load(
            &["count", "seed", "out"],
            Some(&path),
            &[("seed".into(), "9".into())],
        )
        .unwrap();
        assert_eq!(cfg.usize("count", 0).unwrap(), 5);
        assert_eq!(cfg.u64("seed", 0).unwrap(), 9);
    }

    #[test]
    fn unknown_key_rejected() {
        let cfg = RunConfig::load(&["count"], None, &[("bogus".into(), "1".into())]);
        assert!(matches!(cfg, Err(Error::ConfigError(_))));
    }

    #[test]
    fn hash_ignores_out_and_threads() {
        let mut a = RunConfig::load(&["count", "out", "threads"], None, &[]).unwrap();
        a.set("count", "5").unwrap();
        a.set("out", "x").unwrap();
        let mut b = a.clone();
        b.set("out", "y").unwrap();
        b.set("threads", "2").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("count", "6").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
