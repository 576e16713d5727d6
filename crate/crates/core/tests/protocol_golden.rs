//! The normative request/response transcript under testdata/protocol.
//!
//! Set `FETALFLOW_BLESS=1` to rewrite `responses.jsonl` from the builtin mocks.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fetalflow_core::domain::Payload;
use fetalflow_core::json::{canonical_json, from_json};
use fetalflow_core::mocks::{builtin_set, stub_line, MockSpec};
use fetalflow_core::protocol::{ToolRequest, ToolResponse};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata/protocol")
}

fn lines(name: &str) -> Vec<String> {
    std::fs::read_to_string(dir().join(name))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn mocks() -> BTreeMap<String, MockSpec> {
    from_json(&std::fs::read_to_string(dir().join("mocks.json")).unwrap()).unwrap()
}

#[test]
fn builtin_mocks_answer_the_transcript() {
    let tools = builtin_set(&mocks());
    let answers: Vec<String> = lines("requests.jsonl").iter().map(|l| stub_line(&tools, None, l)).collect();
    if std::env::var_os("FETALFLOW_BLESS").is_some() {
        std::fs::write(dir().join("responses.jsonl"), answers.join("\n") + "\n").unwrap();
    }
    let expected = lines("responses.jsonl");
    assert_eq!(answers.len(), expected.len());
    for (i, (got, want)) in answers.iter().zip(&expected).enumerate() {
        assert_eq!(got, want, "response line {}", i + 1);
    }
}

#[test]
fn transcript_reserializes_byte_identically() {
    for line in lines("requests.jsonl") {
        let req: ToolRequest = from_json(&line).unwrap();
        assert_eq!(canonical_json(&req).unwrap(), line);
    }
    for line in lines("responses.jsonl") {
        let resp: ToolResponse = from_json(&line).unwrap();
        assert_eq!(canonical_json(&resp).unwrap(), line);
    }
}

#[test]
fn transcript_covers_every_outcome() {
    let responses: Vec<ToolResponse> = lines("responses.jsonl").iter().map(|l| from_json(l).unwrap()).collect();
    let requests: Vec<ToolRequest> = lines("requests.jsonl").iter().map(|l| from_json(l).unwrap()).collect();
    for (req, resp) in requests.iter().zip(&responses) {
        assert_eq!(req.request_id, resp.request_id);
        assert_eq!(req.task, resp.result.task);
    }
    let kinds: Vec<&str> = responses
        .iter()
        .map(|r| r.result.payload.as_ref().map_or("error", Payload::kind))
        .collect();
    for k in ["classification", "mask", "mask_set", "biometry", "text", "error"] {
        assert!(kinds.contains(&k), "no {k} response in the transcript");
    }
}

#[test]
fn malformed_line_gets_error_response() {
    let tools = builtin_set(&mocks());
    let out: ToolResponse = from_json(&stub_line(&tools, None, r#"{"request_id":"x-1","task":"aop","bad":"#)).unwrap();
    assert!(!out.result.is_ok());
    let out: ToolResponse =
        from_json(&stub_line(&tools, None, r#"{"request_id":"x-2","task":"aop","prompt":1}"#)).unwrap();
    assert_eq!(out.request_id, "x-2");
    assert!(out.result.error_message().unwrap().starts_with("protocol"));
}
