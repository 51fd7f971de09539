//! Run configuration: an optional `key = value` file under the command-line
//! flags. Keys are the long flag names; `-` and `_` are interchangeable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cpf_core::training::parse_kv;

use crate::CliError;

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

#[derive(Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Merges `file` (if any) with `flags`; flags win. Keys outside
    /// `allowed` are rejected from either source.
    pub fn resolve(
        file: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
        allowed: &[&str],
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
            let pairs = parse_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            for (line, key, value) in pairs {
                let key = canonical(&key);
                if !allowed.contains(&key.as_str()) {
                    return Err(CliError::Usage(format!(
                        "{} line {line}: unknown key {key:?}",
                        path.display()
                    )));
                }
                values.insert(key, value);
            }
        }
        for (key, value) in flags {
            debug_assert!(allowed.contains(&key), "flag {key} missing from allowed keys");
            if let Some(v) = value {
                values.insert(key.to_string(), v);
            }
        }
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("--{}: cannot parse {v:?}", key.replace('_', "-"))))
            })
            .transpose()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-"))))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flags_override_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# defaults\nepochs = 3\nbatch-size = 8").unwrap();
        let rc = RunConfig::resolve(
            Some(f.path()),
            vec![("epochs", Some("5".into())), ("lr", None)],
            &["epochs", "lr", "batch_size"],
        )
        .unwrap();
        assert_eq!(rc.get("epochs"), Some("5"));
        assert_eq!(rc.get("batch_size"), Some("8"));
        assert_eq!(rc.get("lr"), None);
    }

    #[test]
    fn unknown_file_key_is_a_usage_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "epochz = 3").unwrap();
        let err = RunConfig::resolve(Some(f.path()), vec![], &["epochs"]).unwrap_err();
        assert!(matches!(err, CliError::Usage(ref m) if m.contains("epochz")), "{err}");
    }
}
