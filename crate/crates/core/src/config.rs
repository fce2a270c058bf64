//! TOML run configs with `key=value` overrides.
//!
//! A config is the command's defaults, overlaid with the file (if any),
//! overlaid with `--set a.b=value` pairs, then deserialized strictly.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let next = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Integers written where the defaults hold floats become floats.
fn coerce(default: &toml::Value, v: &mut toml::Value) {
    match (default, v) {
        (toml::Value::Float(_), v @ toml::Value::Integer(_)) => {
            *v = toml::Value::Float(v.as_integer().expect("integer") as f64);
        }
        (toml::Value::Array(d), toml::Value::Array(a)) => {
            if let Some(first) = d.first() {
                a.iter_mut().for_each(|x| coerce(first, x));
            }
        }
        (toml::Value::Table(d), toml::Value::Table(t)) => {
            for (k, x) in t.iter_mut() {
                if let Some(dv) = d.get(k) {
                    coerce(dv, x);
                }
            }
        }
        _ => {}
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    let s = toml::to_string(v).map_err(|e| Error::Config(e.to_string()))?;
    toml::from_str(&s).map_err(|e| Error::Config(e.to_string()))
}

/// Resolve a config from defaults, an optional file and overrides.
pub fn resolve<T>(file: Option<&str>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let defaults = to_table(&T::default())?;
    let mut table = defaults.clone();
    if let Some(text) = file {
        let t: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, t);
    }
    for o in overrides {
        let (path, v) = parse_override(o)?;
        set_path(&mut table, &path, v)?;
    }
    let mut value = toml::Value::Table(table);
    coerce(&toml::Value::Table(defaults), &mut value);
    let table = match value {
        toml::Value::Table(t) => t,
        _ => unreachable!(),
    };
    let cfg: T = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let text = path.map(std::fs::read_to_string).transpose()?;
    resolve(text.as_deref(), overrides)
}

/// TOML text of a resolved config, for the run directory.
pub fn snapshot<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn check_schema(version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "schema_version {version} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        lr: f64,
        range: (f64, f64),
    }

    impl Default for Inner {
        fn default() -> Self {
            Self { lr: 0.1, range: (1.0, 3.0) }
        }
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        seed: u64,
        name: String,
        train: Inner,
    }

    #[test]
    fn layers_apply_in_order() {
        let c: Outer = resolve(Some("seed = 4\n[train]\nlr = 0.5\n"), &["train.range=[2, 5]".into(), "name=abc".into()]).unwrap();
        assert_eq!(
            c,
            Outer {
                seed: 4,
                name: "abc".into(),
                train: Inner { lr: 0.5, range: (2.0, 5.0) }
            }
        );
        let c: Outer = resolve(None, &["train.lr=2".into()]).unwrap();
        assert_eq!(c.train.lr, 2.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = resolve::<Outer>(Some("sede = 1\n"), &[]).unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(resolve::<Outer>(None, &["train.momentum=0.9".into()]).is_err());
        assert!(resolve::<Outer>(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c: Outer = resolve(None, &["seed=9".into()]).unwrap();
        let back: Outer = resolve(Some(&snapshot(&c).unwrap()), &[]).unwrap();
        assert_eq!(back, c);
    }
}
