//! Experiment config loading: TOML file, then `key=value` overrides, then
//! validation.

use std::path::Path;

use deltamask::sim::ExperimentConfig;
use serde::Deserialize;
use toml::{Table, Value};

use crate::CliError;

/// Reads `path` (or the built-in defaults), applies `overrides` in order
/// and validates the result.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config {
                key: p.display().to_string(),
                message: e.to_string(),
            })?;
            text.parse::<Table>().map_err(|e| CliError::Config {
                key: p.display().to_string(),
                message: e.message().to_string(),
            })?
        }
        None => Table::new(),
    };
    let schema = defaults();
    for raw in overrides {
        apply_override(&mut table, &schema, raw)?;
    }
    let config =
        ExperimentConfig::deserialize(Value::Table(table)).map_err(|e| CliError::Config {
            key: path.map_or("overrides".into(), |p| p.display().to_string()),
            message: e.message().to_string(),
        })?;
    config.validate().map_err(|e| CliError::Config {
        key: e.key,
        message: e.message,
    })?;
    Ok(config)
}

/// The resolved config as TOML.
pub fn render(config: &ExperimentConfig) -> String {
    toml::to_string_pretty(config).expect("configs always serialize")
}

fn defaults() -> Table {
    match Value::try_from(ExperimentConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Resolves a bare key such as `rounds` to its dotted path. Top-level keys
/// win; a bare key found in more than one section is ambiguous.
fn resolve(schema: &Table, key: &str) -> Result<Vec<String>, CliError> {
    if key.contains('.') {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        return if lookup(schema, &path).is_some() {
            Ok(path)
        } else {
            Err(unknown(key))
        };
    }
    if schema.get(key).is_some_and(|v| !v.is_table()) {
        return Ok(vec![key.to_string()]);
    }
    let hits: Vec<&String> = schema
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(section, _)| section)
        .collect();
    match hits.as_slice() {
        [section] => Ok(vec![section.to_string(), key.to_string()]),
        [] => Err(unknown(key)),
        many => Err(CliError::Config {
            key: key.into(),
            message: format!(
                "ambiguous, qualify it as one of {}",
                many.iter()
                    .map(|s| format!("{s}.{key}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        }),
    }
}

fn unknown(key: &str) -> CliError {
    CliError::Config {
        key: key.into(),
        message: "unknown config key".into(),
    }
}

fn lookup<'a>(table: &'a Table, path: &[String]) -> Option<&'a Value> {
    let (last, parents) = path.split_last()?;
    let mut t = table;
    for p in parents {
        t = t.get(p)?.as_table()?;
    }
    t.get(last)
}

fn parse_value(raw: &str, like: &Value) -> Value {
    let parsed = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    match (like, parsed) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        // `hidden=96` is shorthand for a one-element list.
        (Value::Array(_), v @ Value::Integer(_)) => Value::Array(vec![v]),
        (Value::Array(_), Value::String(s)) if s.contains(',') => Value::Array(
            s.split(',')
                .map(|x| parse_value(x.trim(), &Value::Integer(0)))
                .collect(),
        ),
        (_, v) => v,
    }
}

fn apply_override(table: &mut Table, schema: &Table, raw: &str) -> Result<(), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{raw}` is not of the form key=value")))?;
    let path = resolve(schema, key.trim())?;
    let like = lookup(schema, &path).expect("resolved paths exist");
    let value = parse_value(value.trim(), like);
    let (last, parents) = path.split_last().expect("paths are non-empty");
    let mut t = table;
    for p in parents {
        let entry = t
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| CliError::Config {
            key: p.clone(),
            message: "expected a section".into(),
        })?;
    }
    t.insert(last.clone(), value);
    Ok(())
}
