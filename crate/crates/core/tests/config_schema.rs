//! Keeps `configs/config.schema.json` in step with `RunConfig`.

use std::path::PathBuf;

use das_eval::pipeline::RunConfig;
use serde_json::Value;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn schema() -> Value {
    let text = std::fs::read_to_string(configs_dir().join("config.schema.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

// Every key the config serializes must be declared at the matching place in the schema.
fn check(value: &Value, schema: &Value, path: &str) {
    let Value::Object(map) = value else { return };
    let variants: Vec<&Value> = match schema.get("oneOf") {
        Some(Value::Array(v)) => v.iter().collect(),
        _ => vec![schema],
    };
    let kind = map.get("kind");
    let s = variants
        .into_iter()
        .find(|v| kind.is_none() || v["properties"]["kind"]["const"] == *kind.unwrap())
        .unwrap_or_else(|| panic!("{path}: no schema variant for {kind:?}"));
    assert_eq!(s["additionalProperties"], false, "{path}");
    for (k, v) in map {
        let sub = s["properties"]
            .get(k)
            .unwrap_or_else(|| panic!("{path}.{k} missing from schema"));
        check(v, sub, &format!("{path}.{k}"));
    }
}

#[test]
fn schema_declares_every_config_field() {
    let schema = schema();
    check(&serde_json::to_value(RunConfig::default()).unwrap(), &schema, "config");
    let demo = RunConfig::load(&configs_dir().join("demo.toml")).unwrap();
    check(&serde_json::to_value(&demo).unwrap(), &schema, "demo");
}

#[test]
fn schema_defaults_match_code() {
    let schema = schema();
    let cfg = serde_json::to_value(RunConfig::default()).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for (section, s) in props {
        if let Some(d) = s.get("default") {
            assert_eq!(&cfg[section], d, "{section}");
        }
        for (k, sub) in s.get("properties").and_then(Value::as_object).into_iter().flatten() {
            if let Some(d) = sub.get("default") {
                assert_eq!(&cfg[section][k], d, "{section}.{k}");
            }
        }
    }
}
