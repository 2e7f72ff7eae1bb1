//! Flat `key=value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

/// Parsed file contents; keys use the long flag names (`-` or `_`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!(
                    "config line {}: expected key=value, got `{line}`",
                    i + 1
                ))
            })?;
            let key = k.trim().replace('_', "-");
            if key.is_empty() {
                return Err(CliError::config(format!(
                    "config line {}: empty key",
                    i + 1
                )));
            }
            map.insert(key, v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Flag value if given, else the file value, parsed.
    pub fn resolve<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.get(key)
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| CliError::config(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let kv = KeyValues::parse("# comment\nseed = 3\nmc_samples=20\n").unwrap();
        assert_eq!(kv.resolve::<u64>(None, "seed").unwrap(), Some(3));
        assert_eq!(kv.resolve(Some(9u64), "seed").unwrap(), Some(9));
        assert_eq!(kv.resolve::<usize>(None, "mc-samples").unwrap(), Some(20));
        assert_eq!(kv.resolve::<usize>(None, "folds").unwrap(), None);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        assert_eq!(KeyValues::parse("novalue").unwrap_err().code, 1);
        assert_eq!(
            KeyValues::parse("seed=x")
                .unwrap()
                .resolve::<u64>(None, "seed")
                .unwrap_err()
                .code,
            1
        );
    }
}
