//! Remote retriever, remote condenser and distillation teacher against a
//! local mock server.

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use recon_core::backend::{BackendError, HttpGenerationBackend, HttpJsonClient, Sampling};
use recon_core::condenser::{AspectId, Condenser, RemoteCondenser};
use recon_core::distill::{emit_dataset, DistillTriplet, EmitOptions};
use recon_core::io::read_jsonl;
use recon_core::retrieval::{Document, RemoteRetriever, Retriever};

struct Mock {
    url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
}

/// Serve every request with `reply(body) -> (status, response body)` until
/// the test process exits.
fn mock(reply: impl Fn(&Value) -> (u16, String) + Send + 'static) -> Mock {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", server.server_addr().to_ip().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    thread::spawn(move || {
        for mut request in server.incoming_requests() {
            let mut raw = String::new();
            request.as_reader().read_to_string(&mut raw).unwrap();
            let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
            let (status, out) = reply(&body);
            seen.lock().unwrap().push(body);
            let _ = request.respond(tiny_http::Response::from_string(out).with_status_code(status));
        }
    });
    Mock { url, bodies }
}

fn client() -> HttpJsonClient {
    HttpJsonClient::new(Duration::from_secs(5))
}

fn unreachable_url() -> String {
    // bind and drop to get a port nobody listens on
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/")
}

#[test]
fn remote_retrieve_round_trip() {
    let m = mock(|body| {
        let k = body["k"].as_u64().unwrap();
        let docs: Vec<Value> = (0..k)
            .map(|i| json!({"id": format!("d{i}"), "title": "T", "text": format!("text {i}")}))
            .collect();
        (200, json!({ "documents": docs }).to_string())
    });
    let r = RemoteRetriever::new(&m.url, client());
    let docs = r.search("who wrote it", 2).unwrap();
    assert_eq!(docs, vec![Document::new("d0", "T", "text 0"), Document::new("d1", "T", "text 1")]);
    assert_eq!(m.bodies.lock().unwrap()[0], json!({"query": "who wrote it", "k": 2}));
}

#[test]
fn remote_retrieve_empty_and_missing_title() {
    let m = mock(|body| {
        if body["query"] == "none" {
            (200, r#"{"documents": []}"#.into())
        } else {
            (200, r#"{"documents": [{"id": "x", "text": "plain"}]}"#.into())
        }
    });
    let r = RemoteRetriever::new(&m.url, client());
    assert!(r.search("none", 3).unwrap().is_empty());
    assert_eq!(r.search("some", 3).unwrap(), vec![Document::new("x", "", "plain")]);
}

#[test]
fn malformed_body_is_a_schema_error_with_excerpt() {
    let m = mock(|_| (200, "<html>gateway hiccup</html>".into()));
    let err = RemoteRetriever::new(&m.url, client()).remote_retrieve("q", 1).unwrap_err();
    match err {
        BackendError::Schema { excerpt, .. } => assert!(excerpt.contains("gateway hiccup")),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn error_status_keeps_body_excerpt() {
    let m = mock(|_| (503, "overloaded, retry later".into()));
    let err = RemoteRetriever::new(&m.url, client()).remote_retrieve("q", 1).unwrap_err();
    assert_eq!(
        err,
        BackendError::Status {
            status: 503,
            excerpt: "overloaded, retry later".into()
        }
    );
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let err = RemoteRetriever::new(unreachable_url(), client()).remote_retrieve("q", 1).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}

#[test]
fn remote_condenser_sends_prompt_with_default_sampling() {
    let m = mock(|_| (200, json!({"text": "  condensed facts  ", "finish_reason": "stop"}).to_string()));
    let backend = HttpGenerationBackend::new(&m.url, client());
    let condenser = RemoteCondenser::new(Box::new(backend), AspectId::Coverage);
    let docs = [Document::new("a", "A", "first"), Document::new("b", "", "second")];
    let s = condenser.condense("the question", "the query", &docs).unwrap();
    assert_eq!(s.text, "condensed facts");
    assert_eq!(s.source_doc_ids, vec!["a", "b"]);
    assert_eq!(s.aspect, AspectId::Coverage);

    let body = m.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["top_k"], 40);
    let prompt = body["prompt"].as_str().unwrap();
    assert!(prompt.contains("Focus Aspect: Coverage\n"));
    assert!(prompt.contains("[Doc 1] (Title: A) first\n[Doc 2] second\n"));
}

#[test]
fn remote_condenser_skips_call_without_documents() {
    let m = mock(|_| (500, String::new()));
    let condenser = RemoteCondenser::new(Box::new(HttpGenerationBackend::new(&m.url, client())), AspectId::Clarity);
    let s = condenser.condense("q", "query", &[]).unwrap();
    assert!(s.text.is_empty());
    assert!(m.bodies.lock().unwrap().is_empty());
}

fn triplets(n: usize) -> Vec<DistillTriplet> {
    (0..n)
        .map(|i| DistillTriplet {
            source_question: "q".into(),
            step_query: format!("query {i}"),
            documents: vec![Document::new("d", "", "t")],
            aspect: AspectId::ALL[i % 6],
            rendered_prompt: format!("prompt {i}"),
            teacher_summary: None,
        })
        .collect()
}

#[test]
fn teacher_echo_fills_every_summary() {
    let m = mock(|_| (200, json!({"text": "S", "finish_reason": "stop"}).to_string()));
    let teacher = HttpGenerationBackend::new(&m.url, client());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.jsonl");
    let opts = EmitOptions {
        dataset: "nq".into(),
        ..EmitOptions::default()
    };
    let stats = emit_dataset(&triplets(12), &path, Some(&teacher), &opts).unwrap();
    assert_eq!(stats.written, 12);
    assert_eq!(stats.teacher_filled, 12);
    assert_eq!(stats.per_dataset["nq"], 12);
    assert!(stats.per_aspect.values().all(|&n| n == 2));
    let back: Vec<DistillTriplet> = read_jsonl(&path).unwrap();
    assert!(back.iter().all(|t| t.teacher_summary.as_deref() == Some("S")));
    let bodies = m.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 12);
    assert!(bodies.iter().all(|b| b["temperature"] == 0.7));
}

#[test]
fn teacher_retries_transient_failures() {
    let calls = Arc::new(Mutex::new(0));
    let c = Arc::clone(&calls);
    let m = mock(move |_| {
        let mut n = c.lock().unwrap();
        *n += 1;
        if *n == 1 {
            (503, "busy".into())
        } else {
            (200, json!({"text": "ok", "finish_reason": "stop"}).to_string())
        }
    });
    let teacher = HttpGenerationBackend::new(&m.url, client());
    let dir = tempfile::tempdir().unwrap();
    let opts = EmitOptions {
        max_in_flight: 1,
        backoff_ms: 1,
        ..EmitOptions::default()
    };
    let stats = emit_dataset(&triplets(1), &dir.path().join("o.jsonl"), Some(&teacher), &opts).unwrap();
    assert_eq!(stats.teacher_filled, 1);
    assert_eq!(*calls.lock().unwrap(), 2);
}

#[test]
fn teacher_transport_failure_leaves_null_summary() {
    let teacher = HttpGenerationBackend::new(unreachable_url(), client());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.jsonl");
    let opts = EmitOptions {
        retries: 1,
        backoff_ms: 1,
        sampling: Sampling::SUMMARIZER,
        ..EmitOptions::default()
    };
    let stats = emit_dataset(&triplets(3), &path, Some(&teacher), &opts).unwrap();
    assert_eq!(stats.written, 3);
    assert_eq!(stats.teacher_filled, 0);
    assert_eq!(stats.teacher_errors.len(), 3);
    let back: Vec<DistillTriplet> = read_jsonl(&path).unwrap();
    assert!(back.iter().all(|t| t.teacher_summary.is_none()));
}
