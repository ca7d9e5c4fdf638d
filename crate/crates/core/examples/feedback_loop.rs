//! Runs the planner against a scripted model whose first answer is wrong.

use std::sync::Arc;

use chatplan::actions::ActionSet;
use chatplan::env::parse_environment;
use chatplan::feedback::Planner;
use chatplan::llm::ScriptedBackend;
use chatplan::prompt::PromptSet;

const ENV: &str = include_str!("../fixtures/shelf_env.json");
const PLAN: &str = include_str!("../fixtures/shelf_plan.json");

fn main() {
    let wrong = PLAN.replacen("\"grasp_object()\",", "", 1).replacen("\"grasp the juice\",", "", 1);
    let backend = ScriptedBackend::from_responses([wrong, PLAN.to_string()]);
    let planner = Planner::new(ActionSet::lfo(), Arc::new(PromptSet::bundled("lfo").unwrap()), Arc::new(backend));
    let env = parse_environment(ENV).unwrap();

    let result = planner
        .run_loop(&[], &env, "Put the juice on top of the shelf", None, 3, &mut |p| {
            println!("round {}: {} issue(s)", p.round, p.issues);
            if let Some(f) = &p.feedback {
                println!("  -> {f}");
            }
        })
        .unwrap();
    println!("outcome: {:?} after {} feedback message(s)", result.outcome, result.rounds_used);
}
