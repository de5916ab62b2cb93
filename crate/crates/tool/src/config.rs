//! Configuration layering: built-in defaults, then a TOML file, then flags.

use std::fs;
use std::path::Path;

use sr_distill_core::degradation::DegradationRecipe;
use sr_distill_core::trainer::TrainConfig;

use crate::error::{Result, ToolError};

/// Parses `text` over the defaults of `T`, rejecting keys `T` does not know.
pub fn parse_layered<T>(text: &str, origin: &Path) -> Result<T>
where
    T: serde::de::DeserializeOwned + serde::Serialize,
{
    let raw: toml::Table = text.parse().map_err(|e| ToolError::format(origin, e))?;
    let value: T = raw
        .clone()
        .try_into()
        .map_err(|e| ToolError::format(origin, e))?;
    let resolved = toml::Table::try_from(&value).map_err(|e| ToolError::format(origin, e))?;
    if let Some(key) = unknown_key(&raw, &resolved, "") {
        return Err(ToolError::Args(format!(
            "{}: unknown key `{key}`",
            origin.display()
        )));
    }
    Ok(value)
}

fn unknown_key(given: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => {
                if let Some(p) = unknown_key(g, kn, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

fn read_layered<T>(path: Option<&Path>) -> Result<T>
where
    T: serde::de::DeserializeOwned + serde::Serialize + Default,
{
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ToolError::io(p, e))?;
            parse_layered(&text, p)
        }
    }
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    read_layered(path)
}

pub fn load_recipe(path: Option<&Path>) -> Result<DegradationRecipe> {
    let r: DegradationRecipe = read_layered(path)?;
    r.validate()?;
    Ok(r)
}
