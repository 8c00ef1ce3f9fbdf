//! The `key = value` text format shared by architecture and training configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique per file.

use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// 1-based line number in the source text.
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = 0;
    for (i, raw) in text.split('\n').enumerate() {
        let line_start = offset;
        offset += raw.len() + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { pos: line_start, msg: format!("line {}: expected `key = value`", i + 1) });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse { pos: line_start, msg: format!("line {}: empty key", i + 1) });
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Parse { pos: line_start, msg: format!("line {}: duplicate key `{key}`", i + 1) });
        }
        out.push(Entry { line: i + 1, key, value: v.trim().to_string() });
    }
    Ok(out)
}

impl Entry {
    /// An entry that did not come from a file, such as a command-line override; its errors
    /// name the key instead of a line.
    pub fn flag(key: &str, value: impl Into<String>) -> Self {
        Entry { line: 0, key: key.to_string(), value: value.into() }
    }

    pub fn error(&self, msg: impl std::fmt::Display) -> Error {
        if self.line == 0 {
            Error::config(format!("`{}`: {msg}", self.key))
        } else {
            Error::config(format!("line {}: `{}`: {msg}", self.line, self.key))
        }
    }

    pub fn parse_value<T: std::str::FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| self.error(format!("cannot parse `{}`", self.value)))
    }

    pub fn parse_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.error(format!("expected true or false, got `{other}`"))),
        }
    }

    pub fn parse_list<T: std::str::FromStr>(&self) -> Result<Vec<T>> {
        parse_list(&self.value).map_err(|bad| self.error(format!("cannot parse list item `{bad}`")))
    }
}

/// Comma separated list; returns the offending item on failure.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> std::result::Result<Vec<T>, String> {
    text.split(',').map(|s| s.trim().parse().map_err(|_| s.trim().to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_trimming() {
        let e = parse("# header\n\n a = 1 \nlist=1, 2,3\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].line, e[0].key.as_str(), e[0].value.as_str()), (3, "a", "1"));
        assert_eq!(e[1].parse_list::<u32>().unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse("a = 1\nnonsense\n"), Err(Error::Parse { pos: 6, .. })));
        assert!(matches!(parse("a = 1\na = 2"), Err(Error::Parse { .. })));
    }
}
