//! Creates a session, plans one step, approves it and reads the step file.

use std::sync::Arc;

use chatplan::env::parse_environment;
use chatplan::llm::ScriptedBackend;
use chatplan::session::{SessionManager, SessionStore};

const ENV: &str = include_str!("../fixtures/shelf_env.json");
const PLAN: &str = include_str!("../fixtures/shelf_plan.json");

fn main() {
    let dir = std::env::temp_dir().join(format!("chatplan-example-{}", std::process::id()));
    let store = SessionStore::open(&dir).unwrap();
    let manager = SessionManager::new(store, Arc::new(ScriptedBackend::from_responses([PLAN])));

    let session = manager.create(parse_environment(ENV).unwrap(), "lfo", "lfo").unwrap();
    let (session, result) = manager.instruct(&session.id, "Put the juice on top of the shelf", None, None, &mut |_| {}).unwrap();
    println!("outcome: {:?}", result.outcome);

    let attempt = session.latest_attempt().unwrap();
    let session = manager.approve(&session.id, attempt).unwrap();
    println!("approved {attempt}; {} step(s) recorded", session.approved_steps().count());

    let store = SessionStore::open(&dir).unwrap();
    println!("{}", store.read_step(&session.id, 1).unwrap());
    println!("chain length: {}", store.verify_chain(&session.id).unwrap());
    std::fs::remove_dir_all(&dir).ok();
}
