//! Wire-level tests for the HTTP embedding provider and the external scorer,
//! against a minimal scripted HTTP server.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use router_core::embedding::{
    EmbedError, EmbeddingBackend, HttpEmbeddingBackend, ProviderConfig,
};
use router_core::engine::{
    external_scorer, route, FallbackDecision, PredictorError, RouteTarget, ScorerConfig,
    WinPredictor,
};

/// One scripted response: status line + body, with an optional delay.
#[derive(Clone)]
struct Scripted {
    status: &'static str,
    body: String,
    delay: Duration,
}

impl Scripted {
    fn ok(body: impl Into<String>) -> Self {
        Self {
            status: "200 OK",
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    fn status(status: &'static str, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }
}

/// Serve the scripted responses in order on an ephemeral port; returns the
/// base URL and a counter of requests actually received.
fn scripted_server(responses: Vec<Scripted>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let hits_thread = hits.clone();
    std::thread::spawn(move || {
        for response in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(s) => s,
                Err(_) => return,
            };
            hits_thread.fetch_add(1, Ordering::SeqCst);
            read_request(&mut stream);
            if !response.delay.is_zero() {
                std::thread::sleep(response.delay);
            }
            let payload = format!(
                "HTTP/1.1 {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                response.status,
                response.body.len(),
                response.body
            );
            let _ = stream.write_all(payload.as_bytes());
        }
    });
    (format!("http://{addr}"), hits)
}

/// Read headers + content-length body, enough for these tests.
fn read_request(stream: &mut TcpStream) {
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    while !buf.ends_with(b"\r\n\r\n") {
        if stream.read(&mut byte).unwrap_or(0) == 0 {
            return;
        }
        buf.push(byte[0]);
    }
    let headers = String::from_utf8_lossy(&buf).to_lowercase();
    let body_len = headers
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; body_len];
    let _ = stream.read_exact(&mut body);
}

fn provider_config(base_url: String) -> ProviderConfig {
    ProviderConfig {
        base_url,
        model: "test-embed".into(),
        api_key_env: None,
        batch_size: 16,
        timeout_ms: 2_000,
        max_retries: 2,
        retry_backoff_ms: 1,
        max_in_flight: 1,
    }
}

fn embeddings_body(vectors: &[&[f32]]) -> String {
    let data: Vec<String> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("{{\"index\":{i},\"embedding\":[{}]}}", values.join(","))
        })
        .collect();
    format!("{{\"data\":[{}]}}", data.join(","))
}

#[test]
fn provider_parses_indexed_vectors() {
    let (url, hits) = scripted_server(vec![Scripted::ok(embeddings_body(&[
        &[1.0, 2.0],
        &[3.0, 4.0],
    ]))]);
    let backend = HttpEmbeddingBackend::new(provider_config(url)).unwrap();
    let out = backend
        .embed_batch(&["a".to_string(), "b".to_string()])
        .unwrap();
    assert_eq!(out[0].values(), &[1.0, 2.0]);
    assert_eq!(out[1].values(), &[3.0, 4.0]);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn provider_retries_transient_failures_then_succeeds() {
    let (url, hits) = scripted_server(vec![
        Scripted::status("500 Internal Server Error", "{}"),
        Scripted::status("429 Too Many Requests", "{}"),
        Scripted::ok(embeddings_body(&[&[0.5]])),
    ]);
    let backend = HttpEmbeddingBackend::new(provider_config(url)).unwrap();
    let out = backend.embed_batch(&["q".to_string()]).unwrap();
    assert_eq!(out[0].values(), &[0.5]);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn provider_gives_up_after_max_retries() {
    let (url, hits) = scripted_server(vec![
        Scripted::status("500 Internal Server Error", "{}"),
        Scripted::status("500 Internal Server Error", "{}"),
        Scripted::status("500 Internal Server Error", "{}"),
    ]);
    let backend = HttpEmbeddingBackend::new(provider_config(url)).unwrap();
    let err = backend.embed_batch(&["q".to_string()]).unwrap_err();
    match err {
        EmbedError::Transport { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("unexpected error: {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn provider_auth_failure_does_not_retry() {
    let (url, hits) = scripted_server(vec![Scripted::status("401 Unauthorized", "{}")]);
    let backend = HttpEmbeddingBackend::new(provider_config(url)).unwrap();
    let err = backend.embed_batch(&["q".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::Auth { status: 401 }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn provider_rejects_count_mismatch() {
    let (url, _) = scripted_server(vec![Scripted::ok(embeddings_body(&[&[1.0]]))]);
    let backend = HttpEmbeddingBackend::new(provider_config(url)).unwrap();
    let err = backend
        .embed_batch(&["a".to_string(), "b".to_string()])
        .unwrap_err();
    assert!(matches!(
        err,
        EmbedError::CountMismatch {
            requested: 2,
            returned: 1
        }
    ));
}

#[test]
fn missing_api_key_env_is_an_error() {
    let mut cfg = provider_config("http://127.0.0.1:1".into());
    cfg.api_key_env = Some("ROUTER_TEST_KEY_THAT_DOES_NOT_EXIST".into());
    assert!(matches!(
        HttpEmbeddingBackend::new(cfg),
        Err(EmbedError::MissingApiKey(_))
    ));
}

#[test]
fn external_scorer_passes_probability_through() {
    let (url, _) = scripted_server(vec![Scripted::ok(r#"{"win_probability":0.42}"#)]);
    let scorer = external_scorer(ScorerConfig {
        url: format!("{url}/score"),
        timeout_ms: 2_000,
    })
    .unwrap();
    assert_eq!(scorer.predict("is this hard?").unwrap(), 0.42);
    assert_eq!(scorer.name(), "external");
}

#[test]
fn external_scorer_rejects_out_of_range() {
    let (url, _) = scripted_server(vec![Scripted::ok(r#"{"win_probability":1.7}"#)]);
    let scorer = external_scorer(ScorerConfig {
        url: format!("{url}/score"),
        timeout_ms: 2_000,
    })
    .unwrap();
    assert!(matches!(
        scorer.predict("q").unwrap_err(),
        PredictorError::OutOfRange(p) if p == 1.7
    ));
}

#[test]
fn external_scorer_timeout_takes_fallback_route() {
    let (url, _) = scripted_server(vec![Scripted {
        status: "200 OK",
        body: r#"{"win_probability":0.9}"#.into(),
        delay: Duration::from_millis(500),
    }]);
    let scorer = external_scorer(ScorerConfig {
        url: format!("{url}/score"),
        timeout_ms: 50,
    })
    .unwrap();
    let decision = route("q", &scorer, 0.5, FallbackDecision::Strong).unwrap();
    assert_eq!(decision.target, RouteTarget::Strong);
    assert!(decision.fallback_error.is_some());
}
