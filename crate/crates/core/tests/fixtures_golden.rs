use std::collections::BTreeSet;
use std::path::Path;

use kgenv_core::protocol::wrap_observation;
use kgenv_core::retrieval::{execute, ActionCall, ErrorKind, ExecOptions, KgError, Observation};
use kgenv_core::{load_qa_dataset, KnowledgeGraph, Triple};
use serde_json::Value;

fn read(rel: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(rel);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn error_catalogue_fixture_is_reproduced_byte_exactly() {
    let fixture = read("fixtures/error_catalogue.v1.json");
    assert_eq!(fixture["version"], 1);
    let triples: Vec<Triple> = serde_json::from_value(fixture["graph"]["triples"].clone()).unwrap();
    let graph = KnowledgeGraph::from_triples(triples).unwrap();
    let sample = fixture["graph"]["sample_id"].as_str().unwrap();
    let entries = fixture["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 8);
    let mut kinds = BTreeSet::new();
    for e in entries {
        let req = &e["request"];
        let args: Vec<String> = serde_json::from_value(req["args"].clone()).unwrap();
        let call = ActionCall::new(req["action_name"].as_str().unwrap(), args);
        let obs = if req["sample_id"] == sample {
            execute(&graph, &call, ExecOptions::default())
        } else {
            Observation::from_error(KgError::sample_not_found(req["sample_id"].as_str().unwrap()))
        };
        let kind = obs.error_kind().expect("error observation");
        assert_eq!(serde_json::to_value(kind).unwrap(), e["kind"]);
        assert_eq!(kind.code(), e["code"].as_str().unwrap());
        assert_eq!(kind.title(), e["title"].as_str().unwrap());
        assert_eq!(obs.text(), e["text"].as_str().unwrap());
        assert_eq!(wrap_observation(&obs), format!("<information><error>{}</error></information>", e["text"].as_str().unwrap()));
        kinds.insert(kind);
    }
    assert_eq!(kinds, ErrorKind::CATALOGUE.into_iter().collect());
}

#[test]
fn schema_matches_the_loader() {
    let schema = read("schema/qa_sample.schema.json");
    let full = r#"{"sample_id":"s","question":"q","anchor_entities":["A"],"gold_answers":["B"],"triples":[{"head":"A","relation":"r","tail":"B"}],"gold_paths":[{"nodes":["A","B"],"edges":["r"]}]}"#;
    let row: Value = serde_json::from_str(full).unwrap();
    let props: BTreeSet<&str> = schema["properties"].as_object().unwrap().keys().map(String::as_str).collect();
    let mut keys: BTreeSet<&str> = row.as_object().unwrap().keys().map(String::as_str).collect();
    keys.insert("graph");
    assert_eq!(props, keys);
    assert_eq!(load_qa_dataset(full.as_bytes()).samples.len(), 1);
    for field in schema["required"].as_array().unwrap() {
        let mut partial = row.clone();
        partial.as_object_mut().unwrap().remove(field.as_str().unwrap());
        let load = load_qa_dataset(partial.to_string().as_bytes());
        assert_eq!(load.rejected.len(), 1, "row without {field} was accepted");
    }
    let mut neither = row.clone();
    neither.as_object_mut().unwrap().remove("triples");
    assert_eq!(load_qa_dataset(neither.to_string().as_bytes()).rejected.len(), 1);
}
