//! `--config FILE`: a JSON object whose keys are long flag names. Values are
//! appended to the command line for every flag the user did not pass.

use std::collections::HashSet;
use std::path::Path;

use anyhow::Context;
use serde_json::Value;

use crate::usage;

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn scalar(key: &str, v: &Value) -> anyhow::Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(usage(format!("config key {key:?}: unsupported value {other}"))),
    }
}

pub fn inject_config(mut args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {path} is not valid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(usage(format!("config {path} must be a JSON object")));
    };
    let given: HashSet<String> = args
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (key, v) in map {
        let flag = key.replace('_', "-");
        if flag == "config" || given.contains(&flag) {
            continue;
        }
        match &v {
            Value::Bool(true) => args.push(format!("--{flag}")),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    args.push(format!("--{flag}"));
                    args.push(scalar(&key, item)?);
                }
            }
            other => {
                args.push(format!("--{flag}"));
                args.push(scalar(&key, other)?);
            }
        }
    }
    Ok(args)
}
