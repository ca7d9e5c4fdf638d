//! Executes a reference plan symbolically, then a broken variant of it.

use chatplan::actions::ActionSet;
use chatplan::bench::bundled_scenarios;
use chatplan::executor::{check_goal, execute_sequence, WorldState};
use chatplan::feedback::{generate_feedback, Issue};

fn main() {
    let set = ActionSet::virtualhome();
    let scenario = bundled_scenarios().into_iter().find(|s| s.id == "3").unwrap();
    let start = WorldState::from_env(scenario.environment.clone()).unwrap();

    let trace = execute_sequence(&start, &scenario.reference_sequence, &set);
    println!("reference: {} steps, goal met: {}", trace.steps.len(), check_goal(trace.final_state(), &scenario.goal).met);

    let mut broken = scenario.reference_sequence.clone();
    broken.retain(|a| a.name != "Open");
    let trace = execute_sequence(&start, &broken, &set);
    let err = trace.error.expect("the container is still closed");
    println!("broken: {err}");
    if let Some(fb) = generate_feedback(&Issue::Step(err), &set) {
        println!("feedback: {}", fb.text);
    }
}
