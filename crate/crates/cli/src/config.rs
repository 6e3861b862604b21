//! Flat `key = value` settings with `[section]` headers.
//!
//! ```text
//! # comment
//! [train]
//! lr = 0.003
//! k = 3
//! ```
//!
//! Overrides are `section.key=value` and are applied after the file, so they
//! win. Order inside a section is kept because some keys (`k`) reset others.

use std::fmt;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    entries: Vec<(String, String, String)>,
}

#[derive(Debug)]
pub struct SettingsError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for SettingsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, SettingsError> {
        let mut s = Settings::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SettingsError { line: n + 1, message };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {line:?}")))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(err(format!("bad section name {name:?}")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if section.is_empty() {
                return Err(err(format!("key {k:?} outside any section")));
            }
            s.entries.push((section.clone(), k.to_string(), v.trim().to_string()));
        }
        Ok(s)
    }

    /// Applies `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), SettingsError> {
        let err = |message: String| SettingsError { line: 0, message };
        let (path, v) = spec
            .split_once('=')
            .ok_or_else(|| err(format!("override {spec:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| err(format!("override {spec:?} lacks a section")))?;
        if section.is_empty() || key.is_empty() {
            return Err(err(format!("override {spec:?} is not section.key=value")));
        }
        self.entries
            .push((section.to_string(), key.to_string(), v.trim().to_string()));
        Ok(())
    }

    /// Entries of one section in application order; later ones win.
    pub fn section(&self, name: &str) -> Vec<(&str, &str)> {
        self.entries
            .iter()
            .filter(|(s, ..)| s == name)
            .map(|(_, k, v)| (k.as_str(), v.as_str()))
            .collect()
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section).into_iter().rev().find(|(k, _)| *k == key).map(|(_, v)| v)
    }
}
