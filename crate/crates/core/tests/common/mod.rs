//! Generators and property bodies shared by the property tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use chatplan::actions::{ActionInstance, ActionSet};
use chatplan::env::{diff_environments, environment_from_value, parse_environment, serialize_environment, EntityName, Environment, StateKind};
use chatplan::executor::{execute_step, WorldState};
use chatplan::plan::{parse_plan, serialize_plan, ObjectNames, Plan};
use chatplan::prompt::{estimate_tokens, ConversationBuilder, Exchange, PromptError, PromptSet, Turn};
use proptest::prelude::*;
use serde_json::{json, Map, Value};

const ASSETS: [&str; 10] = [
    "table", "shelf_bottom", "shelf_top", "fridge", "drawer", "microwave", "sink", "floor", "stove", "kitchentable",
];
const OBJECTS: [&str; 8] = ["juice", "spam", "pie", "cup", "fridge_handle", "drawer_handle", "sponge", "plate"];

/// Deterministic decoder from generated numbers to choices.
pub struct Dice<'a> {
    pub v: &'a [u16],
    pub i: usize,
}

impl Dice<'_> {
    pub fn roll(&mut self, n: usize) -> usize {
        let x = self.v[self.i % self.v.len()] as usize;
        self.i += 1;
        x % n.max(1)
    }

    pub fn pick<'b, T>(&mut self, items: &'b [T]) -> &'b T {
        &items[self.roll(items.len())]
    }
}

pub fn name(base: &str, d: &mut Dice) -> String {
    match d.roll(5) {
        0 => format!("<{base}#{}>", d.roll(20)),
        _ => format!("<{base}>"),
    }
}

pub fn distinct(pool: &[&str], n: usize, d: &mut Dice) -> Vec<String> {
    let mut left: Vec<&str> = pool.to_vec();
    let mut out = Vec::new();
    while out.len() < n && !left.is_empty() {
        let b = left.remove(d.roll(left.len()));
        out.push(name(b, d));
    }
    out
}

pub fn states(list: Vec<String>) -> Value {
    match list.len() {
        1 => Value::String(list.into_iter().next().unwrap()),
        _ => json!(list),
    }
}

/// A structurally valid environment document.
pub fn env_doc(choices: &[u16]) -> Value {
    let d = &mut Dice { v: choices, i: 0 };
    let assets = distinct(&ASSETS, 1 + d.roll(6), d);
    let objects = distinct(&OBJECTS, 1 + d.roll(4), d);
    let mut asset_states = Map::new();
    for (i, a) in assets.iter().enumerate() {
        let mut s = Vec::new();
        if i > 0 && d.roll(3) == 0 {
            s.push(format!("on_something({})", assets[d.roll(i)]));
        }
        match d.roll(3) {
            0 => s.push("closed()".into()),
            1 => s.push("open()".into()),
            _ => {}
        }
        match d.roll(4) {
            0 => s.push("switched_on()".into()),
            1 => s.push("switched_off()".into()),
            _ => {}
        }
        if !s.is_empty() {
            asset_states.insert(a.clone(), states(s));
        }
    }
    let held = (d.roll(3) == 0).then(|| d.roll(objects.len()));
    let near = (d.roll(2) == 0).then(|| d.roll(assets.len() + objects.len()));
    let mut object_states = Map::new();
    for (j, o) in objects.iter().enumerate() {
        let mut s = Vec::new();
        let free_held = held == Some(j) && d.roll(2) == 0;
        if !free_held {
            match d.roll(4) {
                0 | 1 => s.push(format!("on_something({})", d.pick(&assets))),
                2 => s.push(format!("inside_something({})", d.pick(&assets))),
                _ if j > 0 => s.push(format!("on_something({})", objects[d.roll(j)])),
                _ => s.push(format!("on_something({})", d.pick(&assets))),
            }
        }
        if held == Some(j) {
            s.push("inside_hand()".into());
        }
        if near == Some(assets.len() + j) {
            s.push("near_agent()".into());
        }
        object_states.insert(o.clone(), states(s));
    }
    if let Some(n) = near.filter(|n| *n < assets.len()) {
        let a = &assets[n];
        let mut s: Vec<Value> = match asset_states.remove(a) {
            Some(Value::String(x)) => vec![Value::String(x)],
            Some(Value::Array(xs)) => xs,
            _ => vec![],
        };
        s.push(json!("near_agent()"));
        let s: Vec<String> = s.into_iter().map(|v| v.as_str().unwrap().to_string()).collect();
        asset_states.insert(a.clone(), states(s));
    }
    json!({"assets": assets, "asset_states": asset_states, "objects": objects, "object_states": object_states})
}

pub fn env_from(choices: &[u16]) -> Environment {
    environment_from_value(&env_doc(choices)).expect("generated environment is valid")
}

pub fn choices() -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(any::<u16>(), 48)
}

pub fn entities(env: &Environment) -> Vec<EntityName> {
    env.entities().cloned().collect()
}

/// A random call of `set` over the environment's entities.
pub fn random_call(set: &ActionSet, env: &Environment, d: &mut Dice) -> ActionInstance {
    let spec = d.pick(&set.actions);
    let ents = entities(env);
    ActionInstance {
        name: spec.name.clone(),
        args: (0..spec.arity).map(|_| d.pick(&ents).clone()).collect(),
        implicit_args: false,
    }
}

pub fn random_plan(set: &ActionSet, before: &Environment, after: &Environment, d: &mut Dice) -> Plan {
    let n = d.roll(8);
    let task_sequence: Vec<_> = (0..n).map(|_| random_call(set, before, d)).collect();
    let objects: Vec<EntityName> = before.objects().to_vec();
    let object_name = match d.roll(3) {
        0 => ObjectNames { names: vec![], as_list: false },
        1 => ObjectNames::single(d.pick(&objects).clone()),
        _ => ObjectNames { names: objects.clone(), as_list: true },
    };
    Plan {
        step_instructions: (0..n).map(|i| format!("step \"{i}\" of the plan")).collect(),
        task_sequence,
        object_name,
        environment_before: before.clone(),
        environment_after: after.clone(),
        instruction_summary: "move things around".into(),
        question: if d.roll(4) == 0 { "Which one?".into() } else { String::new() },
    }
}

pub fn set_for(d: &mut Dice) -> ActionSet {
    if d.roll(2) == 0 {
        (*ActionSet::lfo()).clone()
    } else {
        (*ActionSet::virtualhome()).clone()
    }
}

/// Entities whose state lists differ between two environments.
pub fn touched(a: &Environment, b: &Environment) -> BTreeSet<EntityName> {
    let all: BTreeSet<EntityName> = a.entities().chain(b.entities()).cloned().collect();
    all.into_iter()
        .filter(|e| {
            let sa: BTreeSet<_> = a.states_of(e).iter().collect();
            let sb: BTreeSet<_> = b.states_of(e).iter().collect();
            sa != sb
        })
        .collect()
}

pub fn check_cardinality(env: &Environment) -> Result<(), TestCaseError> {
    let held = env.entities().filter(|e| env.has_kind(e, StateKind::InsideHand)).count();
    prop_assert!(held <= 1, "{held} objects in hand:\n{}", serialize_environment(env));
    for e in env.entities() {
        let placements = env.states_of(e).iter().filter(|p| p.kind.is_placement()).count();
        prop_assert!(placements <= 1, "{e} has {placements} placements");
    }
    let near = env.entities().filter(|e| env.has_kind(e, StateKind::NearAgent)).count();
    prop_assert!(near <= 1, "agent near {near} entities");
    Ok(())
}

pub fn picks(n: usize) -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(any::<u16>(), n)
}

pub fn env_round_trip(c: &[u16]) -> Result<(), TestCaseError> {
    let env = env_from(c);
    let text = serialize_environment(&env);
    let back = parse_environment(&text).unwrap();
    prop_assert_eq!(&back, &env);
    prop_assert_eq!(serialize_environment(&back), text);
    Ok(())
}

pub fn plan_round_trip(c: &[u16], c2: &[u16]) -> Result<(), TestCaseError> {
    let d = &mut Dice { v: c, i: 0 };
    let set = set_for(d);
    let before = env_from(c2);
    let after = env_from(c);
    let plan = random_plan(&set, &before, &after, d);
    let text = serialize_plan(&plan);
    let back = parse_plan(&text, &set, &before).unwrap();
    prop_assert_eq!(&back, &plan);
    prop_assert_eq!(serialize_plan(&back), text);
    Ok(())
}

pub fn diff_apply_identity(a: &[u16], b: &[u16]) -> Result<(), TestCaseError> {
    let (a, b) = (env_from(a), env_from(b));
    let diff = diff_environments(&a, &b);
    prop_assert_eq!(diff.apply(&a).unwrap(), b.clone());
    prop_assert!(diff_environments(&a, &a).is_empty());
    prop_assert_eq!(diff.is_empty(), a == b);
    Ok(())
}

/// A successful step changes only its arguments, containers linked to them
/// and the entity the agent walked away from.
pub fn frame(c: &[u16], picks: &[u16]) -> Result<(), TestCaseError> {
    let d = &mut Dice { v: picks, i: 0 };
    let set = set_for(d);
    let state = WorldState::from_env(env_from(c)).unwrap();
    for _ in 0..8 {
        let call = random_call(&set, &state.env, d);
        if let Ok(next) = execute_step(&state, &call, &set, 1) {
            let mut allowed: BTreeSet<EntityName> = call.args.iter().cloned().collect();
            for a in &call.args {
                for (handle, container) in &set.links {
                    if handle.matches(a) {
                        if let Some(c) = state.env.resolve(container) {
                            allowed.insert(c.clone());
                        }
                    }
                }
            }
            allowed.extend(state.agent_near.iter().cloned());
            let changed = touched(&state.env, &next.env);
            prop_assert!(changed.is_subset(&allowed), "{} changed {:?}, allowed {:?}", call, changed, allowed);
            prop_assert_eq!(next.env.assets(), state.env.assets());
            prop_assert_eq!(next.env.objects(), state.env.objects());
        }
    }
    Ok(())
}

/// Random walk of up to 12 executable steps; returns the steps taken.
pub fn random_walk(
    c: &[u16],
    picks: &[u16],
    mut visit: impl FnMut(&WorldState, &WorldState) -> Result<(), TestCaseError>,
) -> Result<usize, TestCaseError> {
    let d = &mut Dice { v: picks, i: 0 };
    let set = set_for(d);
    let mut state = WorldState::from_env(env_from(c)).unwrap();
    let mut executed = 0;
    for step in 1..=12 {
        let next = (0..40).find_map(|_| execute_step(&state, &random_call(&set, &state.env, d), &set, step).ok());
        let Some(next) = next else { break };
        visit(&state, &next)?;
        state = next;
        executed += 1;
    }
    Ok(executed)
}

pub fn cardinality(c: &[u16], picks: &[u16]) -> Result<(), TestCaseError> {
    check_cardinality(&env_from(c))?;
    random_walk(c, picks, |_, next| {
        check_cardinality(&next.env)?;
        prop_assert!(next.env.validate().is_ok());
        prop_assert_eq!(&WorldState::from_env(next.env.clone()).unwrap(), next);
        Ok(())
    })?;
    Ok(())
}

pub fn exchange(sizes: &[usize]) -> Exchange {
    Exchange {
        turns: sizes
            .iter()
            .enumerate()
            .map(|(i, n)| if i % 2 == 0 { Turn::user("u".repeat(*n)) } else { Turn::assistant("a".repeat(*n)) })
            .collect(),
    }
}

pub fn history_sizes() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..4000, 2..5), 0..12)
}

pub fn budgets() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..40_000, 100)
}

/// Over ascending budgets: fixed prompts and the query are always present,
/// kept history is the newest whole exchanges, maximal, and never shrinks.
pub fn budget_monotone(sizes: &[Vec<usize>], budgets: &[usize]) -> Result<(), TestCaseError> {
    let prompts = PromptSet::bundled("lfo").unwrap();
    let env = parse_environment(include_str!("../../fixtures/shelf_env.json")).unwrap();
    let history: Vec<Exchange> = sizes.iter().map(|s| exchange(s)).collect();
    let bare = ConversationBuilder::new(&prompts).budget(usize::MAX).build(&env, "Throw the spam away").unwrap();
    let floor = bare.token_estimate;
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    let mut last = 0;
    for b in budgets {
        let built = ConversationBuilder::new(&prompts).history(&history).budget(b).build(&env, "Throw the spam away");
        if b < floor {
            let is_too_small = matches!(built, Err(PromptError::BudgetTooSmall { .. }));
            prop_assert!(is_too_small);
            continue;
        }
        let conv = built.unwrap();
        prop_assert!(conv.token_estimate <= b);
        prop_assert!(conv.history_included >= last);
        last = conv.history_included;
        prop_assert_eq!(&conv.turns[..10], &bare.turns[..10]);
        prop_assert_eq!(conv.turns.last(), bare.turns.last());
        let k = conv.history_included;
        let kept: Vec<Turn> = history[history.len() - k..].iter().flat_map(|e| e.turns.clone()).collect();
        prop_assert_eq!(&conv.turns[10..conv.turns.len() - 1], &kept[..]);
        if k < history.len() {
            let next_older = &history[history.len() - k - 1];
            let cost: usize = next_older.turns.iter().map(|t| estimate_tokens(&t.text)).sum();
            prop_assert!(conv.token_estimate + cost > b);
        }
    }
    Ok(())
}
