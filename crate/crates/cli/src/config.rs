//! Flat key-value run configuration: `key = value` lines, `#` comments.
//! Command-line flags override file values; defaults fill the rest.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::validation(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::validation(format!("config key `{key}`: bad value `{raw}`: {e}"))
            }),
        }
    }
}

/// flag > config file > default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.get::<T>(key)?.unwrap_or(default))
}

/// Serializes resolved settings back into the flat format, so a persisted
/// config file reproduces the run.
pub fn to_flat(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let cfg = FileConfig::parse("# comment\n\nalpha = 0.8\nimages=5\n").unwrap();
        assert_eq!(cfg.get::<f64>("alpha").unwrap(), Some(0.8));
        assert_eq!(cfg.get::<usize>("images").unwrap(), Some(5));
        assert_eq!(cfg.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(FileConfig::parse("alpha 0.8").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = FileConfig::parse("alpha = banana").unwrap();
        assert!(cfg.get::<f64>("alpha").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let cfg = FileConfig::parse("alpha = 0.5").unwrap();
        assert_eq!(resolve(Some(0.9), &cfg, "alpha", 0.8).unwrap(), 0.9);
        assert_eq!(resolve::<f64>(None, &cfg, "alpha", 0.8).unwrap(), 0.5);
        assert_eq!(resolve::<f64>(None, &cfg, "other", 0.8).unwrap(), 0.8);
    }

    #[test]
    fn flat_round_trip() {
        let text = to_flat(&[("alpha", "0.8".into()), ("seed", "7".into())]);
        let cfg = FileConfig::parse(&text).unwrap();
        assert_eq!(cfg.get::<f64>("alpha").unwrap(), Some(0.8));
        assert_eq!(cfg.get::<u64>("seed").unwrap(), Some(7));
    }
}
