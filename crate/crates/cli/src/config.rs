//! TOML run configuration with dotted-key overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

/// A loaded configuration: the master seed plus the raw table.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    table: Table,
}

/// Parses `key=value`; the value is read as TOML and falls back to a string.
fn parse_override(item: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("override {item:?} is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value =
        format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = table;
    for (i, part) in parents.iter().enumerate() {
        let entry = cur.entry(part.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Usage(format!("{} is not a table", path[..=i].join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for item in overrides {
            let (key, value) = parse_override(item)?;
            set_path(&mut table, &key, value)?;
        }
        let seed = match table.get("seed") {
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(other) => return Err(CliError::Usage(format!("seed must be a non-negative integer, got {other}"))),
            None => return Err(CliError::Usage("master seed is required (set `seed` in the config or pass --set seed=N)".into())),
        };
        Ok(Self { seed, table })
    }

    fn raw_section(&self, name: &str) -> Result<Table, CliError> {
        match self.table.get(name) {
            None => Ok(Table::new()),
            Some(Value::Table(t)) => Ok(t.clone()),
            Some(_) => Err(CliError::Usage(format!("[{name}] must be a table"))),
        }
    }

    /// Deserializes section `name`; a missing section yields the defaults.
    pub fn section<T: DeserializeOwned>(&self, name: &str) -> Result<T, CliError> {
        Value::Table(self.raw_section(name)?).try_into().map_err(|e| CliError::Usage(format!("[{name}]: {e}")))
    }

    /// Splits section `name` into the keys in `own` and a pipeline config `T`.
    /// Top-level keys of `T` are checked against its serialized defaults and
    /// the seed always comes from the master seed.
    pub fn pipeline_section<T>(&self, name: &str, own: &[&str]) -> Result<(Table, T), CliError>
    where
        T: DeserializeOwned + Serialize + Default,
    {
        let mut rest = self.raw_section(name)?;
        let mut mine = Table::new();
        for key in own {
            if let Some(v) = rest.remove(*key) {
                mine.insert((*key).to_string(), v);
            }
        }
        let known = Value::try_from(T::default()).map_err(|e| CliError::Usage(e.to_string()))?;
        let known = known.as_table().expect("config serializes to a table");
        for key in rest.keys() {
            if key == "seed" {
                return Err(CliError::Usage(format!("[{name}].seed: the seed is set once at the top level")));
            }
            if !known.contains_key(key) {
                return Err(CliError::Usage(format!("[{name}]: unknown key {key:?}")));
            }
        }
        rest.insert("seed".into(), Value::Integer(self.seed as i64));
        let cfg = Value::Table(rest).try_into().map_err(|e| CliError::Usage(format!("[{name}]: {e}")))?;
        Ok((mine, cfg))
    }
}
