//! Layered run configuration: an optional TOML file, then `--key value`
//! overrides with dotted keys (`--schedule.step.iterations 400`).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tap_core::{Result, TapError};
use toml::{Table, Value};

/// Parse `--key value` and `--key=value` pairs. Values are read as TOML
/// literals where possible (`3`, `1e-4`, `true`, `[8, 16]`, `{ kind = "awgn", sigma = 0.1 }`)
/// and as bare strings otherwise.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| TapError::Config(format!("expected --key, got {arg:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| TapError::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(TapError::Config("empty override key".into()));
        }
        out.push((key.replace('-', "_"), literal(&raw)));
    }
    Ok(out)
}

fn literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| TapError::Config(format!("--{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Merge the file and overrides and deserialize, rejecting unknown keys.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| TapError::Config(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| TapError::Config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for (key, value) in parse_overrides(overrides)? {
        set_dotted(&mut table, &key, value)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| TapError::Config(e.message().trim().to_string()))
}

/// The resolved config as TOML, for the run log.
pub fn render<T: Serialize>(cfg: &T) -> String {
    toml::to_string(cfg).unwrap_or_else(|e| format!("<unprintable config: {e}>"))
}
