//! Plain `key=value` text files.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored.
//! Duplicate keys are errors.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{LmnError, Result};

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LmnError::Parse(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(LmnError::Parse(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(LmnError::Parse(format!("line {}: duplicate key {k}", lineno + 1)));
        }
    }
    Ok(out)
}

/// Consumes keys from a parsed file; reports leftovers as unknown.
#[derive(Debug)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(KeyValues {
            entries: parse_key_values(text)?,
        })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .remove(key)
            .map(|v| v.parse::<T>().map_err(|e| LmnError::Parse(format!("{key}={v}: {e}"))))
            .transpose()
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        self.entries
            .remove(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|e| LmnError::Parse(format!("{key}={v}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            return Err(LmnError::Parse(format!("unknown key {k}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_key_values("# header\n a = 1 \n\nb=x # trailing\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_key_values("novalue").is_err());
        assert!(parse_key_values("=3").is_err());
        assert!(parse_key_values("a=1\na=2").is_err());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut kv = KeyValues::parse("a=1\nb=2").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(1));
        assert!(kv.finish().is_err());
        let mut kv = KeyValues::parse("a=x").unwrap();
        assert!(kv.take::<u32>("a").is_err());
        let mut kv = KeyValues::parse("t=256, 128").unwrap();
        assert_eq!(kv.take_list("t").unwrap(), Some(vec![256, 128]));
    }
}
