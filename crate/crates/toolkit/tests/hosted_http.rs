//! The hosted adapter against a local fake provider.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use m3cot_core::chat::{BackendError, ChatBackend, ChatRequest, ContentPart, GenerationConfig, ImageRef};
use m3cot_toolkit::gateway::{Gateway, RetryPolicy};
use m3cot_toolkit::http::{Dialect, HostedHttp};
use serde_json::{json, Value};

#[derive(Default)]
struct Seen {
    headers: Vec<HeaderMap>,
    bodies: Vec<Value>,
}

/// Replies with `statuses[k]` on the k-th call (the last one repeats); 200
/// carries a normal completion for the dialect.
struct Fake {
    statuses: Vec<u16>,
    dialect: Dialect,
    calls: AtomicUsize,
    seen: Mutex<Seen>,
}

async fn handle(State(fake): State<Arc<Fake>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let k = fake.calls.fetch_add(1, Ordering::SeqCst);
    {
        let mut seen = fake.seen.lock().unwrap();
        seen.headers.push(headers);
        seen.bodies.push(body);
    }
    let status = fake.statuses[k.min(fake.statuses.len() - 1)];
    let ok = match fake.dialect {
        Dialect::OpenaiChat => json!({
            "choices": [{"message": {"role": "assistant", "content": "B) the pan"}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3}
        }),
        Dialect::Gemini => json!({
            "candidates": [{"content": {"role": "model", "parts": [{"text": "B) the pan"}]}, "finishReason": "STOP"}],
            "usageMetadata": {"promptTokenCount": 12, "candidatesTokenCount": 3}
        }),
    };
    let body = if status == 200 { ok } else { json!({"error": {"message": "slow down"}}) };
    (StatusCode::from_u16(status).unwrap(), Json(body))
}

struct Server {
    fake: Arc<Fake>,
    url: String,
    _runtime: tokio::runtime::Runtime,
}

fn serve(statuses: Vec<u16>, dialect: Dialect) -> Server {
    let fake = Arc::new(Fake { statuses, dialect, calls: AtomicUsize::new(0), seen: Mutex::default() });
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let app = Router::new().route("/v1/chat", post(handle)).with_state(fake.clone());
    runtime.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { fake, url, _runtime: runtime }
}

fn request() -> ChatRequest {
    ChatRequest::single(
        &GenerationConfig::default(),
        "be brief",
        vec![ContentPart::image(ImageRef::inline("RUdP", "image/png")), ContentPart::text("Which tool?")],
    )
}

fn gateway(server: &Server, env: &str, dialect: Dialect, cache: Option<std::path::PathBuf>) -> Gateway {
    let http = HostedHttp::new(&server.url, env, dialect, Duration::from_secs(5)).unwrap();
    Gateway::builder(http)
        .retry(RetryPolicy { max_attempts: 3, base_backoff_ms: 1, max_backoff_ms: 2 })
        .cache_dir(cache)
        .sleeper(|_| {})
        .build()
}

#[test]
fn bearer_key_from_env_and_body_shape() {
    let server = serve(vec![200], Dialect::OpenaiChat);
    std::env::set_var("M3COT_TEST_KEY_A", "sk-test-alpha");
    let gw = gateway(&server, "M3COT_TEST_KEY_A", Dialect::OpenaiChat, None);
    let r = gw.complete(&request()).unwrap();
    assert_eq!(r.text, "B) the pan");
    assert_eq!(r.usage.completion_tokens, 3);
    let seen = server.fake.seen.lock().unwrap();
    assert_eq!(seen.headers[0]["authorization"], "Bearer sk-test-alpha");
    let body = &seen.bodies[0];
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "be brief"}));
    assert_eq!(body["messages"][1]["content"][0]["image_url"]["url"], "data:image/png;base64,RUdP");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn gemini_uses_its_key_header() {
    let server = serve(vec![200], Dialect::Gemini);
    std::env::set_var("M3COT_TEST_KEY_G", "g-key");
    let gw = gateway(&server, "M3COT_TEST_KEY_G", Dialect::Gemini, None);
    assert_eq!(gw.complete(&request()).unwrap().text, "B) the pan");
    let seen = server.fake.seen.lock().unwrap();
    assert_eq!(seen.headers[0]["x-goog-api-key"], "g-key");
    assert!(seen.headers[0].get("authorization").is_none());
    assert_eq!(seen.bodies[0]["contents"][0]["parts"][0]["inline_data"]["data"], "RUdP");
}

#[test]
fn rate_limit_is_retried() {
    let server = serve(vec![429, 503, 200], Dialect::OpenaiChat);
    std::env::set_var("M3COT_TEST_KEY_B", "k");
    let gw = gateway(&server, "M3COT_TEST_KEY_B", Dialect::OpenaiChat, None);
    assert_eq!(gw.complete(&request()).unwrap().text, "B) the pan");
    assert_eq!(server.fake.calls.load(Ordering::SeqCst), 3);
    let attempts = gw.attempts();
    assert_eq!(attempts.iter().map(|a| a.ok).collect::<Vec<_>>(), [false, false, true]);
    assert_eq!(gw.stats().provider_calls, 1);
}

#[test]
fn persistent_5xx_exhausts() {
    let server = serve(vec![500], Dialect::OpenaiChat);
    std::env::set_var("M3COT_TEST_KEY_C", "k");
    let gw = gateway(&server, "M3COT_TEST_KEY_C", Dialect::OpenaiChat, None);
    let err = gw.complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::TransientExhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(server.fake.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn unauthorized_is_auth_and_not_retried() {
    let server = serve(vec![401], Dialect::OpenaiChat);
    std::env::set_var("M3COT_TEST_KEY_D", "wrong");
    let gw = gateway(&server, "M3COT_TEST_KEY_D", Dialect::OpenaiChat, None);
    let err = gw.complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Auth { status: 401, .. }), "{err:?}");
    assert_eq!(server.fake.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn missing_key_fails_before_sending() {
    let server = serve(vec![200], Dialect::OpenaiChat);
    let gw = gateway(&server, "M3COT_TEST_KEY_UNSET", Dialect::OpenaiChat, None);
    let err = gw.complete(&request()).unwrap_err();
    assert!(err.to_string().contains("M3COT_TEST_KEY_UNSET"));
    assert_eq!(server.fake.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn key_never_reaches_disk_or_debug_output() {
    let server = serve(vec![429, 200], Dialect::OpenaiChat);
    let secret = "sk-live-0123456789abcdef";
    std::env::set_var("M3COT_TEST_KEY_E", secret);
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(&server, "M3COT_TEST_KEY_E", Dialect::OpenaiChat, Some(dir.path().to_path_buf()));
    gw.complete(&request()).unwrap();
    assert!(gw.complete(&request()).unwrap().from_cache);
    let http = HostedHttp::new(&server.url, "M3COT_TEST_KEY_E", Dialect::OpenaiChat, Duration::from_secs(1)).unwrap();
    assert!(!format!("{http:?} {gw:?} {:?}", gw.attempts()).contains(secret));
    let mut files = 0;
    for entry in walkdir::WalkDir::new(dir.path()).into_iter().map(Result::unwrap).filter(|e| e.file_type().is_file()) {
        files += 1;
        let bytes = std::fs::read(entry.path()).unwrap();
        assert!(!String::from_utf8_lossy(&bytes).contains(secret), "{}", entry.path().display());
    }
    assert!(files > 0);
}
