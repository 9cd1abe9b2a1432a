//! Flat `key = value` config files. Keys mirror the long flag names of `run`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "problem", "method", "h", "steps", "output", "format", "metadata", "tol", "max-iter", "solver", "jacobian",
];

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("config line {}: expected key = value", n + 1)));
            };
            let k = k.trim().replace('_', "-");
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key {k:?}", n + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// `flag` if given, else the file value for `key`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Usage(format!("config: bad value {v:?} for {key}")))
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let c = ConfigFile::parse("# run\nproblem = faou\nh = 0.16  # step\nmax_iter = 7\n\n").unwrap();
        assert_eq!(c.pick::<String>(None, "problem").unwrap().as_deref(), Some("faou"));
        assert_eq!(c.pick(Some(0.5), "h").unwrap(), Some(0.5));
        assert_eq!(c.pick::<f64>(None, "h").unwrap(), Some(0.16));
        assert_eq!(c.pick::<usize>(None, "max-iter").unwrap(), Some(7));
        assert_eq!(c.pick::<usize>(None, "steps").unwrap(), None);
    }

    #[test]
    fn rejects_garbage() {
        assert!(ConfigFile::parse("problem faou").is_err());
        assert!(ConfigFile::parse("colour = red").is_err());
        let c = ConfigFile::parse("h = fast").unwrap();
        assert!(c.pick::<f64>(None, "h").is_err());
    }
}
