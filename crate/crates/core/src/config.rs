//! Run configuration file: `[model]`, `[loss]`, `[train]` and `[data]`
//! sections, plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::loss::LossConfig;
use crate::model::BspMpnetConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: BspMpnetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let cfg: Self = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{}: {e}", path.map(|p| p.display().to_string()).unwrap_or_default())))?;
        if overrides.is_empty() {
            cfg.validate()?;
            return Ok(cfg);
        }
        let defaults = Value::try_from(&cfg).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, &defaults, o)?;
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optional fields that are absent from a serialised default config.
const OPTIONAL_KEYS: &[(&str, &str)] = &[
    ("train.max_steps", "integer"),
    ("train.segment_seconds", "float"),
    ("model.pcs.band_table", "string"),
    ("data.train_manifest", "string"),
    ("data.valid_manifest", "string"),
];

fn parse_scalar(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Sets `key=value` in `table`. The key must exist in `reference` (or be a
/// known optional key) and the value must have the same type; integers are
/// accepted where a float is expected.
pub fn apply_override(table: &mut Table, reference: &Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let expected = {
        let mut cur = Some(reference);
        for seg in &path {
            cur = cur.and_then(|v| v.as_table()).and_then(|t| t.get(*seg));
        }
        match cur {
            Some(Value::Table(_)) => return Err(Error::config(format!("override key `{key}` names a section, not a value"))),
            Some(v) => type_name(v),
            None => OPTIONAL_KEYS
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, t)| *t)
                .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?,
        }
    };
    let mut value = parse_scalar(raw.trim());
    if let (Value::Integer(i), "float") = (&value, expected) {
        value = Value::Float(*i as f64);
    }
    if type_name(&value) != expected {
        return Err(Error::config(format!("override `{key}` expects a {expected}, got {} `{}`", type_name(&value), raw.trim())));
    }
    let (last, parents) = path.split_last().unwrap();
    let mut t = table;
    for seg in parents {
        t = t
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{seg}` in `{key}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}
