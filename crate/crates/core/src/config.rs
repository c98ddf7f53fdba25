//! Flat `key = value` configuration with dotted keys.
//!
//! Every leaf of [`AppConfig`] has a key such as `weights.lambda3` or
//! `mismatch.severities`. Values parse by the type of the default: numbers,
//! booleans, strings, comma-separated lists, and `none` for optional values.
//! Lines starting with `#` are comments. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::flowcore::MismatchExperimentConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub mismatch: MismatchExperimentConfig,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

/// Leaves of a JSON value keyed by dotted path.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefixes are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn parse_scalar(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") {
        return Ok(Value::Null);
    }
    let bad = |what: &str| config_err(key, format!("expected {what}, got `{raw}`"));
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| bad("a non-negative integer")),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().map(Value::from).map_err(|_| bad("an integer")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| bad("a finite number")),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        // Optional integer fields default to `none`
        Value::Null => raw.parse::<u64>().map(Value::from).map_err(|_| bad("an integer or none")),
        Value::Array(_) | Value::Object(_) => Err(bad("a scalar")),
    }
}

fn parse_value(key: &str, raw: &str, like: &Value) -> Result<Value> {
    match like {
        Value::Array(items) => {
            let elem = items
                .first()
                .ok_or_else(|| config_err(key, "cannot infer the element type of an empty default list"))?;
            let raw = raw.trim();
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',').map(|part| parse_scalar(key, part, elem)).collect::<Result<_>>().map(Value::Array)
        }
        _ => parse_scalar(key, raw, like),
    }
}

/// Renders a leaf in config-file syntax.
pub fn format_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(format_value).collect::<Vec<_>>().join(","),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_u64() && !n.is_i64() => format!("{f:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

impl AppConfig {
    /// Every key with its default, sorted.
    pub fn default_entries() -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(AppConfig::default()).expect("config serializes"))
    }

    /// Applies `key = value` assignments in order on top of `self`.
    pub fn with_assignments<'a>(&self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let defaults = Self::default_entries();
        let mut flat = flatten(&serde_json::to_value(self)?);
        for (key, raw) in assignments {
            let key = key.trim();
            let like = defaults.get(key).ok_or_else(|| config_err(key, "unknown key"))?;
            flat.insert(key.to_string(), parse_value(key, raw, like)?);
        }
        let cfg: AppConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| config_err("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| config_err("<config>", e.to_string()))?;
        self.mismatch.validate().map_err(|e| config_err("mismatch", e.to_string()))
    }

    /// Parses config-file text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            pairs.push((k.trim(), v.trim()));
        }
        AppConfig::default().with_assignments(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` override strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(o, "override must look like key=value"))?;
            pairs.push((k, v));
        }
        self.with_assignments(pairs)
    }

    /// The full config in file syntax.
    pub fn render(&self) -> String {
        let flat = flatten(&serde_json::to_value(self).expect("config serializes"));
        let mut s = String::new();
        for (k, v) in &flat {
            writeln!(s, "{k} = {}", format_value(v)).expect("string write");
        }
        s
    }
}

/// Help text listing every key with its default.
pub fn help_text() -> String {
    let mut s = String::from("Config keys (defaults shown; override with --set key=value):\n");
    for (k, v) in AppConfig::default_entries() {
        writeln!(s, "  {k} = {}", format_value(&v)).expect("string write");
    }
    s
}
