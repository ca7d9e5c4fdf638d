use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use chatplan::env::parse_environment;
use chatplan::feedback::{Outcome, Planner};
use chatplan::llm::{AuthStyle, ChatBackend, HttpBackend, HttpConfig, InferenceParams, LlmError};
use chatplan::prompt::{ConversationBuilder, PromptSet, ACKNOWLEDGEMENT};
use chatplan::actions::ActionSet;
use serde_json::{json, Value};

const SHELF_ENV: &str = include_str!("../fixtures/shelf_env.json");
const SHELF_PLAN: &str = include_str!("../fixtures/shelf_plan.json");

#[derive(Clone, Default)]
struct Mock {
    replies: Arc<Mutex<VecDeque<(u16, String, u64)>>>,
    seen: Arc<Mutex<Vec<(HeaderMap, Value)>>>,
}

async fn completions(State(m): State<Mock>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    m.seen.lock().unwrap().push((headers, body));
    let (status, text, delay) = m.replies.lock().unwrap().pop_front().unwrap_or((500, "no reply queued".into(), 0));
    if delay > 0 {
        tokio::time::sleep(Duration::from_millis(delay)).await;
    }
    (StatusCode::from_u16(status).unwrap(), text)
}

fn ok(content: &str) -> (u16, String, u64) {
    (200, json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(), 0)
}

fn start(replies: Vec<(u16, String, u64)>) -> (Mock, HttpConfig) {
    let mock = Mock::default();
    mock.replies.lock().unwrap().extend(replies);
    let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(mock.clone());
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    thread::spawn(move || {
        tokio::runtime::Runtime::new().unwrap().block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    let cfg = HttpConfig {
        endpoint: format!("http://{addr}/v1/chat/completions"),
        api_key: Some("sk-test".into()),
        model: Some("test-model".into()),
        backoff_base_ms: 1,
        timeout_secs: 5,
        ..HttpConfig::default()
    };
    (mock, cfg)
}

fn conversation() -> chatplan::prompt::Conversation {
    let prompts = PromptSet::bundled("lfo").unwrap();
    ConversationBuilder::new(&prompts)
        .build(&parse_environment(SHELF_ENV).unwrap(), "Put the juice on top of the shelf")
        .unwrap()
}

#[test]
fn successful_completion_sends_conversation_in_order() {
    let (mock, cfg) = start(vec![ok("hello")]);
    let backend = HttpBackend::new(cfg).unwrap();
    let conv = conversation();
    let params = InferenceParams { temperature: 0.7, ..InferenceParams::default() };
    assert_eq!(backend.complete(&conv, &params).unwrap(), "hello");

    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let (headers, body) = &seen[0];
    assert_eq!(headers["authorization"], "Bearer sk-test");
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.7);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), conv.turns.len());
    for (m, t) in messages.iter().zip(&conv.turns) {
        assert_eq!(m["content"], t.text.as_str());
    }
    assert_eq!(messages[1]["role"], "assistant");
    assert_eq!(messages[1]["content"], ACKNOWLEDGEMENT);
    assert_eq!(messages.last().unwrap()["role"], "user");
}

#[test]
fn unauthorized_is_a_transport_error_without_retry() {
    let (mock, cfg) = start(vec![(401, r#"{"error": "bad key"}"#.into(), 0), ok("unused")]);
    let err = HttpBackend::new(cfg).unwrap().complete(&conversation(), &InferenceParams::default()).unwrap_err();
    assert!(matches!(err, LlmError::Transport { status: Some(401), .. }), "{err:?}");
    assert_eq!(mock.seen.lock().unwrap().len(), 1);
}

#[test]
fn server_errors_are_retried_until_success() {
    let (mock, cfg) = start(vec![(500, "boom".into(), 0), (429, "slow down".into(), 0), ok("third time")]);
    let text = HttpBackend::new(cfg).unwrap().complete(&conversation(), &InferenceParams::default()).unwrap();
    assert_eq!(text, "third time");
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_stop_at_max_tries() {
    let (mock, cfg) = start(vec![(503, "a".into(), 0), (503, "b".into(), 0), (503, "c".into(), 0), ok("late")]);
    let err = HttpBackend::new(cfg).unwrap().complete(&conversation(), &InferenceParams::default()).unwrap_err();
    assert_eq!(err, LlmError::Transport { status: Some(503), body: "c".into() });
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_not_retried() {
    let (mock, cfg) = start(vec![(200, "{not json".into(), 0), ok("unused")]);
    let err = HttpBackend::new(cfg).unwrap().complete(&conversation(), &InferenceParams::default()).unwrap_err();
    assert!(matches!(err, LlmError::Transport { status: Some(200), .. }));
    assert_eq!(mock.seen.lock().unwrap().len(), 1);
}

#[test]
fn slow_server_times_out() {
    let (_, mut cfg) = start(vec![(200, "late".into(), 3000)]);
    cfg.timeout_secs = 1;
    cfg.max_tries = 1;
    let err = HttpBackend::new(cfg).unwrap().complete(&conversation(), &InferenceParams::default()).unwrap_err();
    assert_eq!(err, LlmError::Timeout { secs: 1 });
}

#[test]
fn api_key_header_style() {
    let (mock, mut cfg) = start(vec![ok("x")]);
    cfg.auth = AuthStyle::ApiKey;
    HttpBackend::new(cfg).unwrap().complete(&conversation(), &InferenceParams::default()).unwrap();
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen[0].0["api-key"], "sk-test");
    assert!(!seen[0].0.contains_key("authorization"));
}

#[test]
fn planner_runs_against_http_backend() {
    let (mock, cfg) = start(vec![ok(SHELF_PLAN)]);
    let planner = Planner::new(
        ActionSet::lfo(),
        Arc::new(PromptSet::bundled("lfo").unwrap()),
        Arc::new(HttpBackend::new(cfg).unwrap()),
    );
    let env = parse_environment(SHELF_ENV).unwrap();
    let result = planner.run_loop(&[], &env, "Put the juice on top of the shelf", None, 3, &mut |_| {}).unwrap();
    assert_eq!(result.outcome, Outcome::Success);
    assert_eq!(result.claim_diff().map(|d| d.is_empty()), Some(true));
    assert_eq!(mock.seen.lock().unwrap().len(), 1);
}
