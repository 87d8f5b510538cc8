use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use sift_core::embedding::client::{EmbedRequest, WireEmbedding};
use sift_core::embedding::{fetch_embeddings, ClientConfig, EmbeddingError, EmbeddingKey};

#[derive(Clone, Default)]
struct Counters {
    ok: Arc<AtomicUsize>,
    flaky: Arc<AtomicUsize>,
    down: Arc<AtomicUsize>,
    reject: Arc<AtomicUsize>,
}

/// Deterministic vector for a key: its text bytes, cycled.
fn vector_for(key: &EmbeddingKey, dim: usize) -> Vec<f32> {
    let text = key.to_string();
    let bytes = text.as_bytes();
    (0..dim).map(|i| bytes[i % bytes.len()] as f32 / 8.0).collect()
}

fn reply(req: &EmbedRequest, dim: usize, drop_last: bool) -> Value {
    let mut embeddings: Vec<WireEmbedding> = req
        .keys
        .iter()
        .map(|k| WireEmbedding {
            key: k.clone(),
            vector: vector_for(k, dim),
        })
        .collect();
    if drop_last {
        embeddings.pop();
    }
    // Reverse so the client has to match by key, not position.
    embeddings.reverse();
    json!({ "schema_version": 1, "dimension": dim, "embeddings": embeddings })
}

fn start() -> (String, Counters) {
    let counters = Counters::default();
    let app = Router::new()
        .route(
            "/ok",
            post(|State(c): State<Counters>, Json(req): Json<EmbedRequest>| async move {
                c.ok.fetch_add(1, Ordering::SeqCst);
                Json(reply(&req, 768, false))
            }),
        )
        .route(
            "/dim512",
            post(|Json(req): Json<EmbedRequest>| async move { Json(reply(&req, 512, false)) }),
        )
        .route(
            "/partial",
            post(|Json(req): Json<EmbedRequest>| async move { Json(reply(&req, 768, true)) }),
        )
        .route(
            "/flaky",
            post(|State(c): State<Counters>, Json(req): Json<EmbedRequest>| async move {
                if c.flaky.fetch_add(1, Ordering::SeqCst) < 2 {
                    Err(StatusCode::SERVICE_UNAVAILABLE)
                } else {
                    Ok(Json(reply(&req, 768, false)))
                }
            }),
        )
        .route(
            "/down",
            post(|State(c): State<Counters>| async move {
                c.down.fetch_add(1, Ordering::SeqCst);
                StatusCode::SERVICE_UNAVAILABLE
            }),
        )
        .route(
            "/reject",
            post(|State(c): State<Counters>| async move {
                c.reject.fetch_add(1, Ordering::SeqCst);
                (StatusCode::BAD_REQUEST, "unknown key")
            }),
        )
        .route(
            "/garbled",
            post(|| async { (StatusCode::OK, "not json") }),
        )
        .with_state(counters.clone());

    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), counters)
}

fn config(base: &str, path: &str) -> ClientConfig {
    ClientConfig {
        endpoint: format!("{base}{path}"),
        batch_size: 3,
        expected_dimension: Some(768),
        max_retries: 3,
        initial_backoff_ms: 1,
        max_backoff_ms: 4,
        timeout_secs: 10,
    }
}

fn keys(n: usize) -> Vec<EmbeddingKey> {
    (0..n)
        .map(|i| EmbeddingKey::caption(format!("img{}", i / 2), format!("c{}", i % 2)))
        .collect()
}

#[test]
fn fixed_vectors_come_back_in_key_order_in_batches() {
    let (base, counters) = start();
    let ks = keys(10);
    let recs = fetch_embeddings(&config(&base, "/ok"), &ks).unwrap();
    assert_eq!(recs.len(), 10);
    for (r, k) in recs.iter().zip(&ks) {
        assert_eq!(&r.key, k);
        assert_eq!(r.vector, vector_for(k, 768));
    }
    // ceil(10 / 3) requests.
    assert_eq!(counters.ok.load(Ordering::SeqCst), 4);
}

#[test]
fn advertised_dimension_must_match() {
    let (base, _) = start();
    let err = fetch_embeddings(&config(&base, "/dim512"), &keys(2)).unwrap_err();
    assert!(
        matches!(
            err,
            EmbeddingError::DimensionMismatch {
                expected: 768,
                found: 512,
                ..
            }
        ),
        "{err}"
    );
    assert_eq!(err.name(), "DimensionMismatch");
}

#[test]
fn partial_response_names_missing_key() {
    let (base, _) = start();
    let err = fetch_embeddings(&config(&base, "/partial"), &keys(3)).unwrap_err();
    match err {
        EmbeddingError::PartialResponse { missing } => assert_eq!(missing, ["img1/c0"]),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn transient_failures_are_retried() {
    let (base, counters) = start();
    let recs = fetch_embeddings(&config(&base, "/flaky"), &keys(2)).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(counters.flaky.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_failure_gives_up_after_retries() {
    let (base, counters) = start();
    let err = fetch_embeddings(&config(&base, "/down"), &keys(2)).unwrap_err();
    assert_eq!(err.name(), "EndpointUnreachable");
    assert_eq!(counters.down.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, counters) = start();
    let err = fetch_embeddings(&config(&base, "/reject"), &keys(2)).unwrap_err();
    assert!(matches!(
        err,
        EmbeddingError::EndpointRejected { status: 400, .. }
    ));
    assert_eq!(counters.reject.load(Ordering::SeqCst), 1);
    let garbled = fetch_embeddings(&config(&base, "/garbled"), &keys(2)).unwrap_err();
    assert_eq!(garbled.name(), "MalformedResponse");
}
