//! Canonical `key = value` text used to persist model specifications.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    lines: Vec<String>,
}

impl KvWriter {
    pub fn new(kind: &str) -> Self {
        let mut w = Self::default();
        w.put("kind", kind);
        w
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.lines.push(format!("{key} = {value}"));
        self
    }

    pub fn finish(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::invalid(format!("malformed spec line {line:?}")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("duplicate spec key {k:?}")));
            }
        }
        Ok(Self { map })
    }

    pub fn kind(&self) -> Result<&str> {
        self.raw("kind")
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("spec is missing {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("cannot parse spec value {key} = {raw:?}")))
    }
}
