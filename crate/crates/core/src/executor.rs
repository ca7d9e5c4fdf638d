//! Deterministic symbolic execution of action sequences.
//!
//! Each step checks the action's preconditions in declared order against the
//! current state; when all hold, the effects are applied atomically and the
//! resulting environment is re-validated.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actions::{ActionInstance, ActionSet, Condition, Effect, Polarity, Subject, TargetRef, Test};
use crate::env::{
    diff_environments, serialize_environment, EntityName, EnvDiff, EnvError, Environment, StateKind, StatePredicate,
};
use crate::plan::{ObjectNames, Plan};

/// The environment plus the derived hand and agent positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct WorldState {
    pub env: Environment,
    pub hand: Option<EntityName>,
    pub agent_near: Option<EntityName>,
}

impl WorldState {
    /// Derives hand and agent position from `inside_hand()` and `near_agent()`.
    pub fn from_env(env: Environment) -> Result<Self, EnvError> {
        let held: Vec<_> = env.entities_with(StateKind::InsideHand).into_iter().cloned().collect();
        if held.len() > 1 {
            return Err(EnvError::violation(
                "object_states",
                format!("more than one object is held: {}", names(&held)),
            ));
        }
        let near: Vec<_> = env.entities_with(StateKind::NearAgent).into_iter().cloned().collect();
        if near.len() > 1 {
            return Err(EnvError::violation(
                "states",
                format!("the agent is near more than one entity: {}", names(&near)),
            ));
        }
        Ok(WorldState {
            hand: held.into_iter().next(),
            agent_near: near.into_iter().next(),
            env,
        })
    }

    /// Hex SHA-256 of the canonical environment serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serialize_environment(&self.env).as_bytes()))
    }

    /// True when the agent stands at `x`, at something `x` rests on, or at
    /// something resting on `x`.
    pub fn is_near(&self, x: &EntityName) -> bool {
        let Some(at) = &self.agent_near else {
            return false;
        };
        at == x || placement_chain(&self.env, x).contains(at) || placement_chain(&self.env, at).contains(x)
    }
}

fn names(list: &[EntityName]) -> String {
    list.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(", ")
}

/// Entities below `e` following placement targets, nearest first.
fn placement_chain(env: &Environment, e: &EntityName) -> Vec<EntityName> {
    let limit = env.assets().len() + env.objects().len();
    let mut out = Vec::new();
    let mut cur = e.clone();
    while out.len() < limit {
        let Some(next) = env.placement_of(&cur).and_then(|p| p.target.clone()) else {
            break;
        };
        if out.contains(&next) || next == *e {
            break;
        }
        out.push(next.clone());
        cur = next;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum StepErrorKind {
    UnknownAction,
    ArityMismatch,
    UnknownEntity,
    UnresolvedLink,
    PreconditionFailed,
    InvalidResultingState,
}

/// The precondition that failed, with its entities resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FailedCondition {
    /// Position in the action's precondition list.
    pub index: usize,
    pub condition: Condition,
    pub subject: Option<EntityName>,
    pub target: Option<EntityName>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize, schemars::JsonSchema)]
#[error("step {step} ({action}): {reason}")]
pub struct StepError {
    /// 1-based step index.
    pub step: usize,
    pub action: ActionInstance,
    pub kind: StepErrorKind,
    pub failed: Option<FailedCondition>,
    pub reason: String,
}

/// One successful step and the state it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct TraceStep {
    pub action: ActionInstance,
    pub state: WorldState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ExecutionTrace {
    pub start: WorldState,
    pub steps: Vec<TraceStep>,
    pub error: Option<StepError>,
}

impl ExecutionTrace {
    pub fn final_state(&self) -> &WorldState {
        self.steps.last().map_or(&self.start, |s| &s.state)
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    /// One JSON record per executed or failed step.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            let record = json!({
                "index": i + 1,
                "action": s.action.name,
                "args": s.action.args.iter().map(|a| a.as_str()).collect::<Vec<_>>(),
                "ok": true,
                "state_digest": s.state.digest(),
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        if let Some(e) = &self.error {
            let record = json!({
                "index": e.step,
                "action": e.action.name,
                "args": e.action.args.iter().map(|a| a.as_str()).collect::<Vec<_>>(),
                "ok": false,
                "state_digest": self.final_state().digest(),
                "error": e.reason,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }
}

struct Bindings<'a> {
    set: &'a ActionSet,
    args: Vec<EntityName>,
}

impl Bindings<'_> {
    fn subject(&self, s: Subject) -> Result<Option<EntityName>, String> {
        match s {
            Subject::Param(i) => Ok(Some(self.args[i].clone())),
            Subject::Linked(i) => {
                let arg = &self.args[i];
                self.set
                    .links
                    .iter()
                    .find(|(k, _)| k.matches(arg))
                    .map(|(_, v)| Some(v.clone()))
                    .ok_or_else(|| format!("{} is not linked to any container", arg.base()))
            }
            Subject::Hand | Subject::Agent => Ok(None),
        }
    }

    fn target(&self, t: &TargetRef) -> EntityName {
        match t {
            TargetRef::Param(i) => self.args[*i].clone(),
            TargetRef::Entity(e) => e.clone(),
        }
    }
}

fn phrase(kind: StateKind, target: Option<&EntityName>) -> String {
    let t = target.map(|t| t.base().to_string()).unwrap_or_else(|| "something".into());
    match kind {
        StateKind::OnSomething => format!("on {t}"),
        StateKind::InsideSomething => format!("inside {t}"),
        StateKind::InsideHand => "held".into(),
        StateKind::Closed => "closed".into(),
        StateKind::Open => "open".into(),
        StateKind::SwitchedOn => "switched on".into(),
        StateKind::SwitchedOff => "switched off".into(),
        StateKind::NearAgent => "next to the agent".into(),
    }
}

/// The closed container `e` sits inside, if any.
fn closed_container(env: &Environment, e: &EntityName) -> Option<EntityName> {
    env.placement_of(e)
        .filter(|p| p.kind == StateKind::InsideSomething)
        .and_then(|p| p.target.clone())
        .filter(|c| env.has_kind(c, StateKind::Closed))
}

/// Evaluates one condition; `Err` carries the observed fact that breaks it.
fn evaluate(state: &WorldState, c: &Condition, subject: Option<&EntityName>, target: Option<&EntityName>) -> Result<(), String> {
    let env = &state.env;
    let must = c.polarity == Polarity::MustHold;
    let check = |holds: bool, broken: String| if holds == must { Ok(()) } else { Err(broken) };
    match &c.test {
        Test::Holding => {
            let broken = match &state.hand {
                Some(h) => format!("the hand is already holding {}", h.base()),
                None => "the hand is empty".into(),
            };
            check(state.hand.is_some(), broken)
        }
        Test::Near(_) => {
            let t = target.expect("near target resolved");
            let broken = match (&state.agent_near, must) {
                (_, false) => format!("the agent is near {}", t.base()),
                (Some(at), true) => format!("the agent is near {}, not {}", at.base(), t.base()),
                (None, true) => format!("the agent is not near {}", t.base()),
            };
            check(state.is_near(t), broken)
        }
        Test::State { kind, .. } => {
            let e = subject.expect("state subject resolved");
            let found = env
                .states_of(e)
                .iter()
                .find(|p| p.kind == *kind && target.is_none_or(|t| p.target.as_ref().is_some_and(|pt| pt.matches(t))));
            let broken = match found {
                Some(p) => format!("{} is {}", e.base(), phrase(p.kind, p.target.as_ref())),
                None => match env.placement_of(e).filter(|_| kind.is_placement()) {
                    Some(p) => format!("{} is {}, not {}", e.base(), phrase(p.kind, p.target.as_ref()), phrase(*kind, target)),
                    None => format!("{} is not {}", e.base(), phrase(*kind, target)),
                },
            };
            check(found.is_some(), broken)
        }
        Test::Placed => {
            let e = subject.expect("placed subject resolved");
            let broken = match env.placement_of(e) {
                Some(p) => format!("{} is still {}", e.base(), phrase(p.kind, p.target.as_ref())),
                None => format!("{} is not on or inside anything", e.base()),
            };
            check(env.placement_of(e).is_some(), broken)
        }
        Test::Accessible => {
            let e = subject.expect("accessible subject resolved");
            let blocker = closed_container(env, e);
            let broken = match &blocker {
                Some(c) => format!("{} is inside closed {}", e.base(), c.base()),
                None => format!("{} is within reach", e.base()),
            };
            check(blocker.is_none(), broken)
        }
        Test::Openable => {
            let e = subject.expect("openable subject resolved");
            let door = [StateKind::Open, StateKind::Closed].into_iter().find(|k| env.has_kind(e, *k));
            let broken = match door {
                Some(k) => format!("{} is a container with a door (currently {})", e.base(), phrase(k, None)),
                None => format!("{} has no door to open or close", e.base()),
            };
            check(door.is_some(), broken)
        }
    }
}

/// Applies one action to a state.
pub fn execute_step(state: &WorldState, act: &ActionInstance, set: &ActionSet, step: usize) -> Result<WorldState, StepError> {
    let fail = |kind, reason: String, failed| StepError {
        step,
        action: act.clone(),
        kind,
        failed,
        reason,
    };
    let spec = set
        .lookup(&act.name)
        .map_err(|e| fail(StepErrorKind::UnknownAction, e.to_string(), None))?;
    if act.args.len() != spec.arity {
        return Err(fail(
            StepErrorKind::ArityMismatch,
            format!("{} takes {} argument(s), got {}", spec.name, spec.arity, act.args.len()),
            None,
        ));
    }
    let env = &state.env;
    let mut args = Vec::with_capacity(act.args.len());
    for a in &act.args {
        let resolved = env
            .resolve(a)
            .ok_or_else(|| fail(StepErrorKind::UnknownEntity, format!("{} is not in the environment", a.base()), None))?;
        args.push(resolved.clone());
    }
    let bindings = Bindings { set, args };
    let resolve_entity = |e: EntityName| -> Result<EntityName, StepError> {
        env.resolve(&e)
            .cloned()
            .ok_or_else(|| fail(StepErrorKind::UnresolvedLink, format!("{} is not in the environment", e.base()), None))
    };

    for (index, c) in spec.preconditions.iter().enumerate() {
        let subject = bindings
            .subject(c.subject)
            .map_err(|r| fail(StepErrorKind::UnresolvedLink, r, None))?
            .map(&resolve_entity)
            .transpose()?;
        let target = match &c.test {
            Test::Near(t) | Test::State { target: Some(t), .. } => Some(resolve_entity(bindings.target(t))?),
            Test::Accessible => subject.as_ref().and_then(|e| closed_container(env, e)),
            _ => None,
        };
        if let Err(reason) = evaluate(state, c, subject.as_ref(), target.as_ref()) {
            return Err(fail(
                StepErrorKind::PreconditionFailed,
                reason,
                Some(FailedCondition {
                    index,
                    condition: c.clone(),
                    subject,
                    target,
                }),
            ));
        }
    }

    let mut next = env.clone();
    for effect in &spec.effects {
        let subject = bindings
            .subject(effect.subject())
            .map_err(|r| fail(StepErrorKind::UnresolvedLink, r, None))?
            .map(&resolve_entity)
            .transpose()?;
        match effect {
            Effect::Add {
                subject: Subject::Agent,
                target: Some(t),
                ..
            } => {
                let dest = resolve_entity(bindings.target(t))?;
                let marker = StatePredicate::simple(StateKind::NearAgent);
                for e in next.entities_with(StateKind::NearAgent).into_iter().cloned().collect::<Vec<_>>() {
                    next.remove_raw(&e, &marker);
                }
                next.insert_raw(&dest, marker);
            }
            Effect::Add { kind, target, .. } => {
                let e = subject.expect("validated subject");
                let target = target.as_ref().map(|t| resolve_entity(bindings.target(t))).transpose()?;
                let pred = StatePredicate::new(*kind, target).map_err(|r| fail(StepErrorKind::InvalidResultingState, r, None))?;
                next.insert_raw(&e, pred);
            }
            Effect::Remove { kind, target, .. } => {
                let e = subject.expect("validated subject");
                let target = target.as_ref().map(|t| resolve_entity(bindings.target(t))).transpose()?;
                let doomed: Vec<StatePredicate> = next
                    .states_of(&e)
                    .iter()
                    .filter(|p| p.kind == *kind && target.as_ref().is_none_or(|t| p.target.as_ref() == Some(t)))
                    .cloned()
                    .collect();
                for p in &doomed {
                    next.remove_raw(&e, p);
                }
            }
            Effect::ClearPlacement { .. } => {
                let e = subject.expect("validated subject");
                if let Some(p) = next.placement_of(&e).cloned() {
                    next.remove_raw(&e, &p);
                }
            }
        }
    }
    next.validate()
        .map_err(|e| fail(StepErrorKind::InvalidResultingState, e.to_string(), None))?;
    WorldState::from_env(next).map_err(|e| fail(StepErrorKind::InvalidResultingState, e.to_string(), None))
}

/// Runs steps until completion or the first error.
pub fn execute_sequence(start: &WorldState, seq: &[ActionInstance], set: &ActionSet) -> ExecutionTrace {
    let mut steps = Vec::with_capacity(seq.len());
    let mut error = None;
    let mut cur = start.clone();
    for (i, act) in seq.iter().enumerate() {
        match execute_step(&cur, act, set, i + 1) {
            Ok(next) => {
                steps.push(TraceStep {
                    action: act.clone(),
                    state: next.clone(),
                });
                cur = next;
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    ExecutionTrace {
        start: start.clone(),
        steps,
        error,
    }
}

pub fn execute_plan(start: &WorldState, plan: &Plan, set: &ActionSet) -> ExecutionTrace {
    execute_sequence(start, &plan.task_sequence, set)
}

/// Builds a plan for `seq` whose claimed environments are the start state and
/// the state after the last step that executed.
pub fn draft_plan(
    env: &Environment,
    seq: Vec<ActionInstance>,
    set: &ActionSet,
    object: Option<EntityName>,
    summary: &str,
) -> Plan {
    let after = WorldState::from_env(env.clone())
        .map(|start| execute_sequence(&start, &seq, set).final_state().env.clone())
        .unwrap_or_else(|_| env.clone());
    Plan {
        step_instructions: seq.iter().map(|a| a.to_string()).collect(),
        task_sequence: seq,
        object_name: object.map(ObjectNames::single).unwrap_or_default(),
        environment_before: env.clone(),
        environment_after: after,
        instruction_summary: summary.to_string(),
        question: String::new(),
    }
}

/// Difference between the executor's final environment and the one the
/// model claimed; empty means the estimate was accurate.
pub fn verify_claimed_environment(trace: &ExecutionTrace, claimed: &Environment) -> EnvDiff {
    diff_environments(&trace.final_state().env, claimed)
}

/// Predicates a final state must and must not contain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoalSpec {
    pub required: Vec<(EntityName, StatePredicate)>,
    pub forbidden: Vec<(EntityName, StatePredicate)>,
}

fn goal_map(items: &[(EntityName, StatePredicate)]) -> Value {
    let mut grouped: Map<String, Value> = Map::new();
    for (e, p) in items {
        let slot = grouped.entry(e.as_str().to_string()).or_insert_with(|| Value::Array(Vec::new()));
        if let Value::Array(list) = slot {
            list.push(Value::String(p.to_string()));
        }
    }
    Value::Object(grouped)
}

fn goal_items(v: Option<&Value>, key: &str) -> Result<Vec<(EntityName, StatePredicate)>, String> {
    let Some(v) = v else { return Ok(Vec::new()) };
    let map = v.as_object().ok_or_else(|| format!("`{key}` must map entity names to predicate lists"))?;
    let mut out = Vec::new();
    for (name, preds) in map {
        let entity = EntityName::new(name).map_err(|e| e.to_string())?;
        let list: Vec<&Value> = match preds {
            Value::Array(items) => items.iter().collect(),
            other => vec![other],
        };
        for p in list {
            let text = p.as_str().ok_or_else(|| format!("`{key}.{name}` must hold predicate strings"))?;
            out.push((entity.clone(), text.parse()?));
        }
    }
    Ok(out)
}

impl Serialize for GoalSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        json!({"required": goal_map(&self.required), "forbidden": goal_map(&self.forbidden)}).serialize(s)
    }
}

impl<'de> Deserialize<'de> for GoalSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        let obj = v.as_object().ok_or_else(|| serde::de::Error::custom("goal must be a JSON object"))?;
        if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "required" | "forbidden")) {
            return Err(serde::de::Error::custom(format!("unknown goal key `{k}`")));
        }
        Ok(GoalSpec {
            required: goal_items(obj.get("required"), "required").map_err(serde::de::Error::custom)?,
            forbidden: goal_items(obj.get("forbidden"), "forbidden").map_err(serde::de::Error::custom)?,
        })
    }
}

impl schemars::JsonSchema for GoalSpec {
    fn schema_name() -> String {
        "GoalSpec".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        let preds = json!({"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}});
        serde_json::from_value(json!({"type": "object", "properties": {"required": preds, "forbidden": preds}}))
            .expect("static schema")
    }
}

impl GoalSpec {
    /// Checks that every entity named by the goal exists in `env`.
    pub fn validate_against(&self, env: &Environment) -> Result<(), String> {
        for (e, p) in self.required.iter().chain(&self.forbidden) {
            if env.resolve(e).is_none() {
                return Err(format!("goal entity {} is not in the environment", e.as_str()));
            }
            if let Some(t) = &p.target {
                if env.resolve(t).is_none() {
                    return Err(format!("goal target {} is not in the environment", t.as_str()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct GoalCheck {
    pub met: bool,
    /// Required predicates that are missing.
    pub unmet: Vec<(EntityName, StatePredicate)>,
    /// Forbidden predicates that are present.
    pub violated: Vec<(EntityName, StatePredicate)>,
}

impl fmt::Display for GoalCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.met {
            return write!(f, "goal met");
        }
        let mut parts = Vec::new();
        for (e, p) in &self.unmet {
            parts.push(format!("{} should be {p}", e.as_str()));
        }
        for (e, p) in &self.violated {
            parts.push(format!("{} should not be {p}", e.as_str()));
        }
        write!(f, "goal not met: {}", parts.join("; "))
    }
}

fn holds(env: &Environment, e: &EntityName, p: &StatePredicate) -> bool {
    let Some(e) = env.resolve(e) else { return false };
    env.states_of(e).iter().any(|q| {
        q.kind == p.kind
            && match (&q.target, &p.target) {
                (Some(a), Some(b)) => a.matches(b),
                (None, None) => true,
                _ => false,
            }
    })
}

pub fn check_goal(state: &WorldState, goal: &GoalSpec) -> GoalCheck {
    let unmet: Vec<_> = goal.required.iter().filter(|(e, p)| !holds(&state.env, e, p)).cloned().collect();
    let violated: Vec<_> = goal.forbidden.iter().filter(|(e, p)| holds(&state.env, e, p)).cloned().collect();
    GoalCheck {
        met: unmet.is_empty() && violated.is_empty(),
        unmet,
        violated,
    }
}

/// Entities whose states changed between two states, in name order.
pub fn changed_entities(before: &WorldState, after: &WorldState) -> BTreeMap<EntityName, (Vec<StatePredicate>, Vec<StatePredicate>)> {
    let mut out = BTreeMap::new();
    for e in before.env.entities().chain(after.env.entities()) {
        let a = before.env.states_of(e).to_vec();
        let b = after.env.states_of(e).to_vec();
        if a != b {
            out.insert(e.clone(), (a, b));
        }
    }
    out
}
