//! `key = value` run configuration.
//!
//! Each subcommand declares the keys it understands together with their
//! defaults. Values are layered: defaults, then the `--config` file, then
//! `--set` overrides, then `--seed`. The effective result is echoed as
//! `config.txt` into the run directory, and that file can be fed back with
//! `--config` to repeat the run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

/// Bad invocation: unknown key, unparsable value, missing argument.
/// Mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const SEED: Key = key("seed", "0", "seed for every random stream of the run");

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(
        command: &str,
        keys: &[Key],
        file: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .chain(std::iter::once(&SEED))
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        let mut apply = |pairs: Vec<(String, String)>| -> Result<()> {
            for (k, v) in pairs {
                match values.get_mut(&k) {
                    Some(slot) => *slot = v,
                    None => {
                        let known: Vec<&str> = keys.iter().map(|k| k.name).chain(["seed"]).collect();
                        return usage(format!(
                            "unknown key `{k}` for `{command}`; known keys: {}",
                            known.join(", ")
                        ));
                    }
                }
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            let pairs = parse_pairs(&text, &path.display().to_string())?;
            // an echoed config carries its command name
            let pairs = pairs.into_iter().filter(|(k, _)| k != "command").collect();
            apply(pairs)?;
        }
        for s in sets {
            apply(parse_pairs(s, "--set")?)?;
        }
        if let Some(seed) = seed {
            apply(vec![("seed".into(), seed.to_string())])?;
        }
        let cfg = Self {
            command: command.to_string(),
            values,
        };
        cfg.get::<u64>("seed")?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a declared key of `{}`", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| UsageError(format!("bad value `{raw}` for `{key}`: {e}")).into())
    }

    /// Empty string means unset.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").expect("checked in resolve")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn describe(keys: &[Key]) -> String {
    let mut s = String::from("config keys:\n");
    for k in keys.iter().chain(std::iter::once(&SEED)) {
        let d = if k.default.is_empty() { "<unset>" } else { k.default };
        s.push_str(&format!("  {:<22} {:<10} {}\n", k.name, d, k.help));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[key("alpha", "1", ""), key("name", "", "")];

    #[test]
    fn layering_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "# comment\nalpha = 2\nseed=5\n").unwrap();
        let c = RunConfig::resolve("x", KEYS, Some(&file), &["alpha=3".into()], None).unwrap();
        assert_eq!(c.get::<u32>("alpha").unwrap(), 3);
        assert_eq!(c.seed(), 5);
        assert_eq!(c.opt::<String>("name").unwrap(), None);
        let c = RunConfig::resolve("x", KEYS, Some(&file), &[], Some(9)).unwrap();
        assert_eq!(c.seed(), 9);

        let err = RunConfig::resolve("x", KEYS, None, &["beta=1".into()], None).unwrap_err();
        assert!(err
            .downcast_ref::<UsageError>()
            .unwrap()
            .0
            .contains("unknown key `beta`"));
        let c = RunConfig::resolve("x", KEYS, None, &["alpha=z".into()], None).unwrap();
        assert!(c
            .get::<u32>("alpha")
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::resolve("x", KEYS, None, &["name=run a".into()], Some(4)).unwrap();
        c.echo(dir.path()).unwrap();
        let again = RunConfig::resolve("x", KEYS, Some(&dir.path().join("config.txt")), &[], None).unwrap();
        assert_eq!(again, c);
    }
}
