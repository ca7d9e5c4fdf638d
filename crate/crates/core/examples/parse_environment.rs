//! Parses an environment description, prints it back and diffs two states.

use chatplan::env::{diff_environments, parse_environment, serialize_environment};

const BEFORE: &str = include_str!("../fixtures/shelf_env.json");

fn main() {
    let env = parse_environment(BEFORE).expect("fixture parses");
    println!("assets: {}", env.assets().len());
    println!("objects: {}", env.objects().len());
    println!("{}", serialize_environment(&env));

    let after_text = BEFORE.replace("on_something(<shelf_bottom>)", "on_something(<shelf_top>)");
    let after = parse_environment(&after_text).expect("edited fixture parses");
    let diff = diff_environments(&env, &after);
    println!("diff: {diff}");
    assert_eq!(diff.apply(&env).unwrap(), after);
}
