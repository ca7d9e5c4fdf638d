//! Builds the conversation sent to the model under shrinking token budgets.

use chatplan::env::parse_environment;
use chatplan::prompt::{ConversationBuilder, Exchange, PromptSet, Turn};

const ENV: &str = include_str!("../fixtures/shelf_env.json");
const PLAN: &str = include_str!("../fixtures/shelf_plan.json");

fn main() {
    let prompts = PromptSet::bundled("lfo").unwrap();
    let env = parse_environment(ENV).unwrap();
    let history: Vec<Exchange> = (0..6)
        .map(|i| Exchange { turns: vec![Turn::user(format!("earlier instruction {i}")), Turn::assistant(PLAN)] })
        .collect();

    for budget in [8_000, 4_500, 3_800, 3_000, 500] {
        match ConversationBuilder::new(&prompts).history(&history).budget(budget).build(&env, "Throw away the spam") {
            Ok(conv) => println!(
                "budget {budget}: {} turns, ~{} tokens, {} of {} past exchanges",
                conv.turns.len(),
                conv.token_estimate,
                conv.history_included,
                history.len()
            ),
            Err(e) => println!("budget {budget}: {e}"),
        }
    }
}
