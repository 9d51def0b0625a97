//! Flat `key = value` text files with `#` comments.
//!
//! Values are scalars or comma-separated lists. Numeric values accept
//! rational literals such as `16/255`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Parsed key/value pairs. Keys are consumed as they are read so that
/// [`KvDoc::finish`] can reject unknown keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config {
                    key: format!("line {}", lineno + 1),
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config {
                    key: k,
                    msg: "duplicate key".into(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_raw(key)
            .map(|v| parse_number(&v).map_err(|msg| cfg_err(key, msg)))
            .transpose()
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take_raw(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| cfg_err(key, format!("expected a non-negative integer, got `{v}`")))
            })
            .transpose()
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take_raw(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| cfg_err(key, format!("expected an unsigned integer, got `{v}`")))
            })
            .transpose()
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.take_raw(key)
            .map(|v| match v.as_str() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(cfg_err(key, format!("expected a boolean, got `{v}`"))),
            })
            .transpose()
    }

    pub fn take_usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        self.take_raw(key)
            .map(|v| {
                split_list(&v)
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| cfg_err(key, format!("bad list element `{s}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.take_raw(key)
            .map(|v| {
                split_list(&v)
                    .map(|s| parse_number(s).map_err(|msg| cfg_err(key, msg)))
                    .collect()
            })
            .transpose()
    }

    pub fn take_bool_list(&mut self, key: &str) -> Result<Option<Vec<bool>>> {
        self.take_raw(key)
            .map(|v| {
                split_list(&v)
                    .map(|s| match s {
                        "true" | "on" | "1" => Ok(true),
                        "false" | "off" | "0" => Ok(false),
                        _ => Err(cfg_err(key, format!("bad boolean `{s}`"))),
                    })
                    .collect()
            })
            .transpose()
    }

    /// Errors on the first key that nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(cfg_err(&k, "unknown key")),
            None => Ok(()),
        }
    }
}

pub(crate) fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

pub(crate) fn require<T>(key: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| cfg_err(key, "missing required key"))
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Parses a decimal or `a/b` rational literal.
pub fn parse_number(v: &str) -> std::result::Result<f64, String> {
    let parsed = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in `{v}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in `{v}`"))?;
            if b == 0.0 {
                return Err(format!("zero denominator in `{v}`"));
            }
            a / b
        }
        None => v.parse().map_err(|_| format!("expected a number, got `{v}`"))?,
    };
    if !parsed.is_finite() {
        return Err(format!("non-finite value `{v}`"));
    }
    Ok(parsed)
}

/// Builds canonical `key = value` text.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.out, "# {text}");
        self
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    /// `f64` values use the shortest representation that round-trips.
    pub fn put_f64(&mut self, key: &str, value: f64) -> &mut Self {
        self.put(key, format!("{value:?}"))
    }

    pub fn put_list<T: std::fmt::Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(ToString::to_string).collect();
        self.put(key, joined.join(","))
    }

    pub fn put_f64_list(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        self.put(key, joined.join(","))
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}
