//! Structural JSON validation against the committed schema files in
//! `schemas/`.
//!
//! The validator speaks the small dialect those schemas need — `type`,
//! `properties`, `required`, `additionalProperties`, `items`, `enum`,
//! `minItems`/`maxItems` — and rejects any other keyword outright, so a
//! typo in a schema file fails loudly instead of validating nothing.

use serde_json::Value;

pub const DATASET_MANIFEST: &str = include_str!("../schemas/dataset_manifest.schema.json");
pub const MODEL_CONFIG: &str = include_str!("../schemas/model_config.schema.json");
pub const RUN_CONFIG: &str = include_str!("../schemas/run_config.schema.json");
pub const TRAIN_LOG_LINE: &str = include_str!("../schemas/train_log_line.schema.json");
pub const EVAL_OUTPUT: &str = include_str!("../schemas/eval_output.schema.json");
pub const DETECTIONS: &str = include_str!("../schemas/detections.schema.json");

pub fn all_schemas() -> [(&'static str, &'static str); 6] {
    [
        ("dataset_manifest", DATASET_MANIFEST),
        ("model_config", MODEL_CONFIG),
        ("run_config", RUN_CONFIG),
        ("train_log_line", TRAIN_LOG_LINE),
        ("eval_output", EVAL_OUTPUT),
        ("detections", DETECTIONS),
    ]
}

/// Validate `value` against a schema given as JSON text. Returns the first
/// violation found, with a `$.path[2].to.it` locator.
pub fn validate_text(schema_json: &str, value: &Value) -> Result<(), String> {
    let schema: Value =
        serde_json::from_str(schema_json).map_err(|e| format!("schema is not valid JSON: {e}"))?;
    validate(&schema, value)
}

pub fn validate(schema: &Value, value: &Value) -> Result<(), String> {
    check_schema(schema)?;
    check(schema, value, "$")
}

/// Reject unknown keywords or malformed clauses anywhere in a schema,
/// independent of any instance document.
pub fn check_schema(schema: &Value) -> Result<(), String> {
    let obj = schema.as_object().ok_or("schema must be a JSON object")?;
    for (key, clause) in obj {
        match key.as_str() {
            "$schema" | "title" | "description" => {
                clause.as_str().ok_or(format!("`{key}` must be a string"))?;
            }
            "type" => {
                let names: Vec<&Value> = match clause {
                    Value::Array(a) => a.iter().collect(),
                    single => vec![single],
                };
                for name in names {
                    let name = name.as_str().ok_or("`type` entries must be strings")?;
                    if !TYPE_NAMES.contains(&name) {
                        return Err(format!("unknown type `{name}`"));
                    }
                }
            }
            "properties" => {
                let props = clause.as_object().ok_or("`properties` must be an object")?;
                for sub in props.values() {
                    check_schema(sub)?;
                }
            }
            "required" => {
                let names = clause.as_array().ok_or("`required` must be an array")?;
                if !names.iter().all(Value::is_string) {
                    return Err("`required` entries must be strings".to_string());
                }
            }
            "additionalProperties" => {
                if !clause.is_boolean() {
                    check_schema(clause)?;
                }
            }
            "items" => check_schema(clause)?,
            "enum" => {
                let options = clause.as_array().ok_or("`enum` must be an array")?;
                if options.is_empty() {
                    return Err("`enum` must not be empty".to_string());
                }
            }
            "minItems" | "maxItems" => {
                clause.as_u64().ok_or(format!("`{key}` must be a non-negative integer"))?;
            }
            other => return Err(format!("unsupported schema keyword `{other}`")),
        }
    }
    Ok(())
}

const TYPE_NAMES: &[&str] = &["object", "array", "string", "number", "integer", "boolean", "null"];

fn check(schema: &Value, value: &Value, path: &str) -> Result<(), String> {
    let obj = schema.as_object().expect("checked by check_schema");

    if let Some(ty) = obj.get("type") {
        let names: Vec<&str> = match ty {
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            single => vec![single.as_str().expect("checked by check_schema")],
        };
        if !names.iter().any(|n| matches_type(n, value)) {
            return Err(format!(
                "{path}: expected {}, got {}",
                names.join(" or "),
                type_name(value)
            ));
        }
    }

    if let Some(options) = obj.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return Err(format!("{path}: value {value} is not one of the allowed options"));
        }
    }

    if let Some(map) = value.as_object() {
        let props = obj.get("properties").and_then(Value::as_object);
        if let Some(props) = props {
            for (name, sub) in props {
                if let Some(v) = map.get(name) {
                    check(sub, v, &format!("{path}.{name}"))?;
                }
            }
        }
        if let Some(names) = obj.get("required").and_then(Value::as_array) {
            for name in names.iter().filter_map(Value::as_str) {
                if !map.contains_key(name) {
                    return Err(format!("{path}: missing required property `{name}`"));
                }
            }
        }
        let declared = |name: &str| props.is_some_and(|p| p.contains_key(name));
        match obj.get("additionalProperties") {
            Some(Value::Bool(false)) => {
                if let Some(extra) = map.keys().find(|k| !declared(k)) {
                    return Err(format!("{path}: unexpected property `{extra}`"));
                }
            }
            Some(Value::Bool(true)) | None => {}
            Some(sub) => {
                for (name, v) in map {
                    if !declared(name) {
                        check(sub, v, &format!("{path}.{name}"))?;
                    }
                }
            }
        }
    }

    if let Some(arr) = value.as_array() {
        if let Some(items) = obj.get("items") {
            for (i, v) in arr.iter().enumerate() {
                check(items, v, &format!("{path}[{i}]"))?;
            }
        }
        if let Some(n) = obj.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < n {
                return Err(format!("{path}: fewer than {n} items"));
            }
        }
        if let Some(n) = obj.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > n {
                return Err(format!("{path}: more than {n} items"));
            }
        }
    }

    Ok(())
}

fn matches_type(name: &str, value: &Value) -> bool {
    match name {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        "number" => value.is_number(),
        "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
        _ => false,
    }
}

fn type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
