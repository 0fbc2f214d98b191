//! Reports rendered either as JSON or as `key: value` lines with the same keys.

use serde_json::{Map, Value};

/// Flatten nested objects into dotted keys, in key order.
pub fn flatten(value: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(scalar).collect();
                out.push((prefix.to_string(), parts.join(",")));
            }
            other => out.push((prefix.to_string(), scalar(other))),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn render(value: &Value, json: bool) -> String {
    if json {
        serde_json::to_string_pretty(value).expect("report serializes") + "\n"
    } else {
        flatten(value).into_iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }
}

pub fn object(pairs: Vec<(&str, Value)>) -> Value {
    Value::Object(
        pairs
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<Map<_, _>>(),
    )
}
