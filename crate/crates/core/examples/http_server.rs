//! Serves the session API on a local port with a scripted model.
//!
//! ```text
//! cargo run --example http_server
//! curl -s localhost:8080/openapi.json
//! ```

use std::net::SocketAddr;
use std::sync::Arc;

use chatplan::api::serve;
use chatplan::llm::ScriptedBackend;
use chatplan::session::{SessionManager, SessionStore};

const PLAN: &str = include_str!("../fixtures/shelf_plan.json");

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let dir = std::env::temp_dir().join("chatplan-example-sessions");
    let store = SessionStore::open(&dir).expect("session directory");
    let backend = ScriptedBackend::from_responses(std::iter::repeat_n(PLAN, 100));
    let addr: SocketAddr = "127.0.0.1:8080".parse().unwrap();
    println!("listening on http://{addr}, sessions in {}", dir.display());
    serve(addr, SessionManager::new(store, Arc::new(backend))).await
}
