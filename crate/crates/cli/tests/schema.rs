//! The edits schema in `docs/` must describe exactly what the parser accepts.

use gcrf_core::edits::{Edit, EditSet};
use serde_json::Value;

const SCHEMA: &str = include_str!("../../../docs/edits.schema.json");

fn schema() -> Value {
    serde_json::from_str(SCHEMA).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn schema_keys_match_the_serialized_form() {
    let s = schema();
    let set = EditSet::new(vec![Edit { row: 1, col: 2, a: 3.0, b: 4.0 }], 5.0);
    let v: Value = serde_json::from_str(&set.to_json()).unwrap();
    assert_eq!(keys(&s["properties"]), keys(&v));
    assert_eq!(keys(&s["properties"]["edits"]["items"]["properties"]), keys(&v["edits"][0]));
    assert_eq!(s["additionalProperties"], false);
    assert_eq!(s["properties"]["beta"]["default"], 5.0);
}

#[test]
fn examples_parse_and_reserialize_identically() {
    for example in schema()["examples"].as_array().unwrap() {
        let set = EditSet::from_json(&example.to_string()).unwrap();
        let text = set.to_json();
        assert_eq!(EditSet::from_json(&text).unwrap().to_json(), text);
    }
}

#[test]
fn parser_rejects_what_the_schema_forbids() {
    for bad in [
        r#"{"beta": 5.0}"#,
        r#"{"edits": [], "extra": 1}"#,
        r#"{"edits": [{"row": 0, "col": 0, "a": 1.0}]}"#,
        r#"{"edits": [{"row": 0, "col": 0, "a": 1.0, "b": 2.0, "L": 50}]}"#,
        r#"{"edits": [{"row": 0.5, "col": 0, "a": 1.0, "b": 2.0}]}"#,
        r#"{"beta": 0, "edits": []}"#,
    ] {
        assert!(EditSet::from_json(bad).is_err(), "{bad}");
    }
}
