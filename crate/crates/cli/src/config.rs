use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::exit::{config_error, Exit};

pub const SEED_ENV: &str = "LORAFUSE_SEED";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>) {
    for (k, v) in layer {
        if !v.is_null() {
            base.insert(k, v);
        }
    }
}

/// Reads a TOML config file. Keys may sit at the top level or in a table
/// named after the subcommand; the table wins. Tables for other
/// subcommands are ignored.
fn file_layer(path: &Path, section: &str, known_sections: &[&str]) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
    let mut top = object(serde_json::to_value(table)?);
    let own = top.remove(section).map(object).unwrap_or_default();
    top.retain(|k, _| !known_sections.contains(&k.as_str()));
    overlay(&mut top, own);
    Ok(top)
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => match s.trim().parse() {
            Ok(seed) => Ok(Some(seed)),
            Err(_) => Err(config_error(format!("{SEED_ENV}=`{s}` is not an unsigned integer")).into()),
        },
        Err(_) => Ok(None),
    }
}

/// Defaults, then `LORAFUSE_SEED`, then the config file, then flags. Unset
/// flags serialize as null or empty lists and leave lower layers alone.
pub fn resolve<T>(section: &str, config: Option<&Path>, flags: &impl Serialize) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut merged = object(serde_json::to_value(T::default())?);
    if merged.contains_key("seed") {
        if let Some(seed) = env_seed()? {
            merged.insert("seed".into(), Value::from(seed));
        }
    }
    if let Some(path) = config {
        overlay(&mut merged, file_layer(path, section, crate::SUBCOMMANDS)?);
    }
    let mut flags = object(serde_json::to_value(flags)?);
    flags.retain(|_, v| !matches!(v, Value::Array(a) if a.is_empty()));
    overlay(&mut merged, flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| config_error(format!("{section} config: {e}")).into())
}

pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, Exit> {
    value
        .as_ref()
        .ok_or_else(|| config_error(format!("missing required setting `{key}` (flag --{})", key.replace('_', "-"))))
}

/// Prints the resolved config and, when given, stores it in `out`.
pub fn echo(config: &impl Serialize, out: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(config)?;
    println!("resolved config:\n{text}");
    if let Some(dir) = out {
        lorafuse_core::io::write_atomic(dir.join(RESOLVED_CONFIG), format!("{text}\n").as_bytes())
            .with_context(|| format!("writing config to {}", dir.display()))?;
    }
    Ok(())
}
