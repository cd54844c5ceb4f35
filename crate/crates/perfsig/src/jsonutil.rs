//! Shared helpers for walking JSON documents with path-aware errors and
//! strict-mode key checking.

use serde_json::{Map, Value};

/// Error raised while walking a JSON document. `path` is a dotted/indexed
/// locator like `regions[0].cores[1].counts.INSTR_RETIRED`.
#[derive(Debug, Clone)]
pub(crate) struct JsonError {
    pub path: String,
    pub message: String,
}

impl JsonError {
    pub fn new(path: &str, message: impl Into<String>) -> Self {
        JsonError {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

pub(crate) fn parse_document(text: &str) -> Result<Value, JsonError> {
    serde_json::from_str(text).map_err(|e| JsonError {
        path: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

pub(crate) fn as_object<'v>(v: &'v Value, path: &str) -> Result<&'v Map<String, Value>, JsonError> {
    v.as_object()
        .ok_or_else(|| JsonError::new(path, "expected an object"))
}

pub(crate) fn as_array<'v>(v: &'v Value, path: &str) -> Result<&'v Vec<Value>, JsonError> {
    v.as_array()
        .ok_or_else(|| JsonError::new(path, "expected an array"))
}

/// In strict mode, reject keys outside `allowed`.
pub(crate) fn check_keys(
    obj: &Map<String, Value>,
    allowed: &[&str],
    strict: bool,
    path: &str,
) -> Result<(), JsonError> {
    if !strict {
        return Ok(());
    }
    let unknown: Vec<&str> = obj
        .keys()
        .map(String::as_str)
        .filter(|k| !allowed.contains(k))
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(JsonError::new(
            path,
            format!("unknown key(s): {}", unknown.join(", ")),
        ))
    }
}

pub(crate) fn req<'v>(
    obj: &'v Map<String, Value>,
    key: &str,
    path: &str,
) -> Result<&'v Value, JsonError> {
    obj.get(key)
        .ok_or_else(|| JsonError::new(path, format!("missing required key `{key}`")))
}

pub(crate) fn get_string(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, JsonError> {
    let v = req(obj, key, path)?;
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| JsonError::new(&format!("{path}.{key}"), "expected a string"))
}

pub(crate) fn get_f64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64, JsonError> {
    let v = req(obj, key, path)?;
    v.as_f64()
        .ok_or_else(|| JsonError::new(&format!("{path}.{key}"), "expected a number"))
}

pub(crate) fn get_u32(obj: &Map<String, Value>, key: &str, path: &str) -> Result<u32, JsonError> {
    let v = req(obj, key, path)?;
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| JsonError::new(&format!("{path}.{key}"), "expected a non-negative integer"))
}

/// Counter values must be non-negative and integral, but producers commonly
/// write them in scientific notation (`2.74e10`), so integral floats are
/// accepted up to 2^53.
pub(crate) fn count_value(v: &Value, path: &str) -> Result<u64, JsonError> {
    if let Some(n) = v.as_u64() {
        return Ok(n);
    }
    if let Some(f) = v.as_f64() {
        if f >= 0.0 && f.fract() == 0.0 && f <= 9.007_199_254_740_992e15 {
            return Ok(f as u64);
        }
    }
    Err(JsonError::new(
        path,
        "expected a non-negative integral count",
    ))
}
