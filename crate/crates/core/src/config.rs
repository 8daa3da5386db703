//! `key = value` configuration text shared by config files, experiment plans
//! and the model header embedded in checkpoints.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Keys may
//! appear at most once. Callers pull the keys they understand with the typed
//! getters and finish with [`KeyValues::finish`], which rejects leftovers.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, TabsError};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TabsError::config(format!("{source}:{line_no}: expected `key = value`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(TabsError::config(format!("{source}:{line_no}: empty key")));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(TabsError::config(format!(
                    "{source}:{line_no}: duplicate key `{key}`"
                )));
            }
        }
        Ok(KeyValues {
            entries,
            source: source.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(TabsError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| TabsError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn peek(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                TabsError::config(format!(
                    "{}:{line}: invalid value `{v}` for `{key}`",
                    self.source
                ))
            }),
        }
    }

    pub fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.take(key)?.ok_or_else(|| {
            TabsError::config(format!("{}: missing required key `{key}`", self.source))
        })
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((key, (_, line))) => Err(TabsError::config(format!(
                "{}:{line}: unknown key `{key}`",
                self.source
            ))),
        }
    }
}

/// Accepts `true/false`, `yes/no`, `on/off` and `1/0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flag(pub bool);

impl FromStr for Flag {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(Flag(true)),
            "false" | "no" | "off" | "0" => Ok(Flag(false)),
            _ => Err(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let mut kv = KeyValues::parse(
            "# header\nepochs = 5  # trailing\n\nname=abc\nflag = yes\n",
            "t",
        )
        .unwrap();
        assert_eq!(kv.require::<u32>("epochs").unwrap(), 5);
        assert_eq!(kv.take_str("name").as_deref(), Some("abc"));
        assert_eq!(kv.require::<Flag>("flag").unwrap(), Flag(true));
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        let kv = KeyValues::parse("a = 1\nb = 2\n", "t").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("unknown key `a`"), "{err}");
        assert!(KeyValues::parse("a = 1\na = 2\n", "t").is_err());
        assert!(KeyValues::parse("just text\n", "t").is_err());
    }

    #[test]
    fn bad_value_names_line() {
        let mut kv = KeyValues::parse("\nepochs = many\n", "cfg").unwrap();
        let err = kv.require::<u32>("epochs").unwrap_err().to_string();
        assert!(err.contains("cfg:2"), "{err}");
    }
}
