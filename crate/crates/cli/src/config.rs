//! Flat `key: value` experiment configuration.
//!
//! One key per line, `#` comments. Every key must be consumed by the
//! command that runs; unknown keys are hard errors, and validation
//! problems are collected and reported together rather than one at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// Raised with exit code 2; carries every problem found in one pass.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "configuration errors:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

pub struct Config {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    errors: Vec<String>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once(':') {
                Some((k, v)) => {
                    let key = k.trim().to_string();
                    if values.insert(key.clone(), v.trim().to_string()).is_some() {
                        errors.push(format!("line {}: duplicate key `{key}`", lineno + 1));
                    }
                }
                None => errors.push(format!(
                    "line {}: expected `key: value`, got `{line}`",
                    lineno + 1
                )),
            }
        }
        if errors.is_empty() {
            Ok(Self { values, consumed: BTreeSet::new(), errors: Vec::new() })
        } else {
            Err(ConfigError(errors))
        }
    }

    pub fn empty() -> Self {
        Self { values: BTreeMap::new(), consumed: BTreeSet::new(), errors: Vec::new() }
    }

    /// Inject or override a value (CLI flag overrides).
    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.values.get(key).cloned()
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or_else(|| default.to_string())
    }

    pub fn require_str(&mut self, key: &str) -> String {
        match self.raw(key) {
            Some(v) => v,
            None => {
                self.errors.push(format!("missing required key `{key}`"));
                String::new()
            }
        }
    }

    fn parse_with<T: std::str::FromStr>(&mut self, key: &str, value: &str) -> Option<T> {
        match value.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!(
                    "key `{key}`: cannot parse `{value}` as {}",
                    std::any::type_name::<T>()
                ));
                None
            }
        }
    }

    pub fn opt_parse<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let v = self.raw(key)?;
        self.parse_with(key, &v)
    }

    pub fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.raw(key) {
            Some(v) => self.parse_with(key, &v).unwrap_or(default),
            None => default,
        }
    }

    pub fn require_parse<T: std::str::FromStr + Default>(&mut self, key: &str) -> T {
        match self.raw(key) {
            Some(v) => self.parse_with(key, &v).unwrap_or_default(),
            None => {
                self.errors.push(format!("missing required key `{key}`"));
                T::default()
            }
        }
    }

    pub fn parse_bool_or(&mut self, key: &str, default: bool) -> bool {
        match self.raw(key).as_deref() {
            None => default,
            Some("true") | Some("1") | Some("yes") => true,
            Some("false") | Some("0") | Some("no") => false,
            Some(other) => {
                self.errors.push(format!("key `{key}`: expected true/false, got `{other}`"));
                default
            }
        }
    }

    pub fn opt_path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&mut self, key: &str) -> PathBuf {
        PathBuf::from(self.require_str(key))
    }

    /// Fails when any validation error was recorded or any key was never
    /// consumed.
    pub fn finish(mut self) -> Result<(), ConfigError> {
        for key in self.values.keys() {
            if !self.consumed.contains(key) {
                self.errors.push(format!("unknown key `{key}`"));
            }
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(self.errors))
        }
    }

    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_flags_unknown_keys() {
        let mut cfg = Config::from_text("a: 1\n# comment\nb: two\n").unwrap();
        assert_eq!(cfg.parse_or::<i32>("a", 0), 1);
        let err = cfg.finish().unwrap_err();
        assert!(err.0.iter().any(|e| e.contains("unknown key `b`")));
    }

    #[test]
    fn collects_all_errors_at_once() {
        let mut cfg = Config::from_text("a: x\nzz: 3\n").unwrap();
        let _: Option<i32> = cfg.opt_parse("a");
        let _ = cfg.require_str("missing");
        let err = cfg.finish().unwrap_err();
        assert!(err.0.len() >= 3, "{err}");
    }

    #[test]
    fn rejects_duplicates_and_bad_lines() {
        assert!(Config::from_text("a: 1\na: 2\n").is_err());
        assert!(Config::from_text("just a line\n").is_err());
    }
}
