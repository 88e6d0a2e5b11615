//! Flat `key = value` configuration files.
//!
//! Keys are dotted paths into a serializable config struct, e.g.
//! `pose.iters = 400` or `freq.weights.lh = 2`. Only keys that exist in the
//! default value are accepted; the value type is taken from the default.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::{Error, Result};

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn lookup_mut<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.')
        .try_fold(root, |v, part| v.as_object_mut()?.get_mut(part))
}

fn parse_scalar(raw: &str, like: &Value, key: &str, line: usize) -> Result<Value> {
    let raw = raw.trim();
    let bad =
        |what: &str| Error::Config(format!("line {line}: `{key}` expects {what}, got `{raw}`"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(
            raw.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?,
        ),
        Value::Number(n) if n.is_i64() => {
            Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?)
        }
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(x).ok_or_else(|| bad("a finite number"))?)
        }
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        Value::Null => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        Value::Array(items) => {
            let elem = items
                .first()
                .cloned()
                .unwrap_or(Value::Number(Number::from_f64(0.0).unwrap()));
            Value::Array(
                raw.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_scalar(s, &elem, key, line))
                    .collect::<Result<_>>()?,
            )
        }
        Value::Object(_) => return Err(bad("a nested table, which cannot be set directly")),
    })
}

/// Applies the assignments in `text` on top of `base`.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let mut root = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let key = key.trim();
        let slot = lookup_mut(&mut root, key)
            .ok_or_else(|| Error::Config(format!("line {}: unknown key `{key}`", n + 1)))?;
        *slot = parse_scalar(value, slot, key, n + 1)?;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}

/// Every addressable key with its current value, one per line.
pub fn to_text<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let mut entries = Vec::new();
    flatten("", &v, &mut entries);
    let mut out = String::new();
    for (k, v) in entries {
        let text = match v {
            Value::String(s) => s,
            Value::Array(a) => a
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", "),
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {text}\n"));
    }
    out
}

/// Dotted keys accepted by [`apply`] for this value.
pub fn keys<T: Serialize>(value: &T) -> Vec<String> {
    let v = serde_json::to_value(value).expect("config serializes");
    let mut entries = Vec::new();
    flatten("", &v, &mut entries);
    entries.into_iter().map(|(k, _)| k).collect()
}
