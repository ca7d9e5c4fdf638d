//! Automatic feedback: turns parse, rule, execution and goal failures into
//! correction messages and re-queries the model until the plan succeeds.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{ActionSet, CallStyle, Effect, Polarity, Subject, Test};
use crate::env::{EntityName, EnvDiff, Environment, StateKind};
use crate::executor::{
    check_goal, execute_plan, verify_claimed_environment, ExecutionTrace, GoalCheck, GoalSpec, StepError,
    StepErrorKind, WorldState,
};
use crate::llm::{ChatBackend, InferenceParams, LlmError};
use crate::plan::{check_structural_rules, environment_before_mismatch, parse_plan, Plan, PlanError, RuleViolation};
use crate::prompt::{
    instantiate_query, ByteEstimate, ConversationBuilder, Exchange, PromptError, PromptSet, TokenCounter, Turn,
    DEFAULT_BUDGET,
};

pub const DEFAULT_MAX_ROUNDS: usize = 5;

/// Something wrong with one attempt, in evaluation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Issue {
    Parse(PlanError),
    Rule(RuleViolation),
    Step(StepError),
    Goal(GoalCheck),
    EnvMismatch(EnvDiff),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Auto,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FeedbackMessage {
    pub source: FeedbackSource,
    pub text: String,
    /// The issue the message answers; always set for automatic feedback.
    pub trigger: Option<Issue>,
}

impl FeedbackMessage {
    pub fn human(text: impl Into<String>) -> Self {
        FeedbackMessage {
            source: FeedbackSource::Human,
            text: text.into(),
            trigger: None,
        }
    }
}

fn call(set: &ActionSet, name: &str, args: &[&EntityName]) -> String {
    let owned: Vec<EntityName> = args.iter().map(|a| (*a).clone()).collect();
    set.render_call(name, &owned)
}

fn state_words(kind: StateKind, target: Option<&EntityName>) -> String {
    let t = target.map_or("something", |t| t.as_str());
    match kind {
        StateKind::OnSomething => format!("on {t}"),
        StateKind::InsideSomething => format!("inside {t}"),
        StateKind::InsideHand => "grasped".into(),
        StateKind::Closed => "closed".into(),
        StateKind::Open => "open".into(),
        StateKind::SwitchedOn => "switched on".into(),
        StateKind::SwitchedOff => "switched off".into(),
        StateKind::NearAgent => "next to the agent".into(),
    }
}

/// An action that brings about `kind` on a single argument, rendered as a call.
fn producing_call(set: &ActionSet, kind: StateKind, subject: &EntityName, target: Option<&EntityName>) -> Option<String> {
    let producer = set.producers_of(kind).find(|a| match target {
        Some(_) => a.arity == 2,
        None => a.arity == 1,
    })?;
    let mut args = vec![subject];
    args.extend(target);
    Some(call(set, &producer.name, &args))
}

fn step_message(e: &StepError, set: &ActionSet) -> String {
    let args: Vec<&EntityName> = e.action.args.iter().collect();
    let shown = match set.lookup(&e.action.name) {
        Ok(spec) => call(set, &spec.name, &args),
        Err(_) => e.action.to_string(),
    };
    let Some(fc) = e.failed.as_ref().filter(|_| e.kind == StepErrorKind::PreconditionFailed) else {
        return format!("Step {} failed: {shown} cannot be executed because {}.", e.step, e.reason);
    };
    let c = &fc.condition;
    let must = c.polarity == Polarity::MustHold;
    let subject = fc.subject.as_ref();
    let target = fc.target.as_ref();
    let (requirement, derived_hint) = match (&c.test, subject) {
        (Test::Holding, _) if must => ("an object in the hand".to_string(), None),
        (Test::Holding, _) => ("an empty hand".to_string(), None),
        (Test::Near(_), _) => {
            let t = target.expect("near target");
            let walk = set
                .actions
                .iter()
                .find(|a| a.effects.iter().any(|ef| matches!(ef, Effect::Add { subject: Subject::Agent, .. })))
                .map(|a| call(set, &a.name, &[t]));
            if must {
                (format!("the agent to be near {}", t.as_str()), walk.map(|w| format!("Add {w} before this step.")))
            } else {
                (format!("the agent not to be near {}", t.as_str()), None)
            }
        }
        (Test::State { kind, .. }, Some(s)) => {
            let wanted = if must { Some(*kind) } else { kind.exclusive_partner() };
            match wanted {
                Some(k) => (
                    format!("{} to be {}", s.as_str(), state_words(k, target)),
                    producing_call(set, k, s, target).map(|c| format!("Add {c} before this step.")),
                ),
                None => (format!("{} not to be {}", s.as_str(), state_words(*kind, target)), None),
            }
        }
        (Test::Placed, Some(s)) if must => (
            format!("{} to be placed on or inside something", s.as_str()),
            set.producers_of(StateKind::OnSomething)
                .find(|a| set.call_style == CallStyle::Nullary || a.arity == 1)
                .map(|a| format!("Add {} before this step.", call(set, &a.name, &[s]))),
        ),
        (Test::Placed, Some(s)) => (
            format!("{} to be free of any plane", s.as_str()),
            set.actions
                .iter()
                .find(|a| a.arity == 1 && a.effects.iter().any(|ef| matches!(ef, Effect::ClearPlacement { .. })))
                .map(|a| format!("Add {} before this step.", call(set, &a.name, &[s]))),
        ),
        (Test::Accessible, Some(s)) => (
            format!("{} not to be inside a closed container", s.as_str()),
            target
                .and_then(|c| producing_call(set, StateKind::Open, c, None))
                .map(|c| format!("Add {c} before this step.")),
        ),
        (Test::Openable, Some(s)) if must => (format!("{} to be something that opens and closes", s.as_str()), None),
        (Test::Openable, Some(s)) => (format!("{} to be a surface without a door", s.as_str()), None),
        (_, None) => (e.reason.clone(), None),
    };
    let hint = c
        .hint
        .as_ref()
        .map(|h| {
            let mut h = h.clone();
            for (i, a) in e.action.args.iter().enumerate() {
                h = h.replace(&format!("{{{i}}}"), a.base());
            }
            h
        })
        .or(derived_hint);
    let mut msg = format!("Step {} failed: {shown} requires {requirement}.", e.step);
    if let Some(h) = hint {
        msg.push(' ');
        msg.push_str(&h);
    }
    msg
}

fn parse_message(e: &PlanError) -> String {
    match e {
        PlanError::NoJsonFound => {
            "Your response did not contain a dictionary. Output the result as a Python dictionary in the format defined above.".into()
        }
        PlanError::MalformedJson(why) => {
            format!("Your response could not be read as a dictionary ({why}). Output a valid dictionary with the five keys.")
        }
        PlanError::MissingKey(k) => {
            format!("The dictionary is missing the key \"{k}\". Include every key of the output format.")
        }
        PlanError::InvalidField { key, reason } => format!("The value of \"{key}\" is invalid: {reason}."),
        PlanError::InvalidEnvironment { key, error } => format!(
            "The \"{key}\" dictionary is invalid: {error}. Use only the assets, objects and states of the \"STATE LIST\"."
        ),
        PlanError::LengthMismatch { actions, instructions } => format!(
            "The task_sequence has {actions} actions but step_instructions has {instructions} entries. Make sure that each element of the [\"step_instructions\"] explains corresponding element of the [\"task_sequence\"]."
        ),
        PlanError::UnknownAction { step, name, suggestion } => match suggestion {
            Some(s) => format!(
                "Step {step} failed: {name} is not in the \"ROBOT ACTION LIST\". Use {s} as defined in the \"ROBOT ACTION LIST\"."
            ),
            None => format!(
                "Step {step} failed: {name} is not in the \"ROBOT ACTION LIST\". Use only the actions defined in the \"ROBOT ACTION LIST\"."
            ),
        },
        PlanError::ArityMismatch { step, name, expected, got } => {
            format!("Step {step} failed: {name} takes {expected} argument(s) but {got} were given.")
        }
        PlanError::UnknownObject(n) => format!(
            "The object_name {n} is not an object of the environment. Use only objects defined in the input dictionary."
        ),
        PlanError::UnknownEntity { step, name } => format!(
            "Step {step} failed: {name} does not exist in the environment. Use only assets and objects defined in the input dictionary."
        ),
        PlanError::MissingArgument { step, name, reason } => {
            format!("Step {step} failed: the arguments of {name} cannot be determined because {reason}.")
        }
    }
}

fn goal_message(g: &GoalCheck, set: &ActionSet) -> String {
    let mut parts = Vec::new();
    let mut hints = Vec::new();
    for (e, p) in &g.unmet {
        parts.push(format!("{} should be {}", e.as_str(), state_words(p.kind, p.target.as_ref())));
        hints.extend(producing_call(set, p.kind, e, p.target.as_ref()));
    }
    for (e, p) in &g.violated {
        parts.push(format!("{} should not be {}", e.as_str(), state_words(p.kind, p.target.as_ref())));
    }
    let mut msg = format!(
        "The sequence can be executed, but the instruction is not completed: {}.",
        parts.join("; ")
    );
    if !hints.is_empty() {
        msg.push_str(&format!(" Consider adding {}.", hints.join(", ")));
    }
    msg
}

/// Verbalizes one issue. An empty environment diff is not an error and
/// yields `None`.
pub fn generate_feedback(issue: &Issue, set: &ActionSet) -> Option<FeedbackMessage> {
    let text = match issue {
        Issue::Parse(e) => parse_message(e),
        Issue::Rule(v) => match v.step {
            Some(s) => format!("Rule {} is violated at step {s}: {}", v.rule_number, v.message),
            None => format!("Rule {} is violated: {}", v.rule_number, v.message),
        },
        Issue::Step(e) => step_message(e, set),
        Issue::Goal(g) if g.met => return None,
        Issue::Goal(g) => goal_message(g, set),
        Issue::EnvMismatch(d) if d.is_empty() => return None,
        Issue::EnvMismatch(d) => format!(
            "The environment_after does not match the result of the actions ({d}). Update environment_after accordingly."
        ),
    };
    Some(FeedbackMessage {
        source: FeedbackSource::Auto,
        text,
        trigger: Some(issue.clone()),
    })
}

/// One model response and what was found in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Round {
    pub response: String,
    pub plan: Option<Plan>,
    pub issues: Vec<Issue>,
    /// Feedback sent after this response, if any.
    pub feedback: Option<FeedbackMessage>,
    /// Executor final environment versus the claimed `environment_after`.
    pub claim_diff: Option<EnvDiff>,
    /// Input environment versus the claimed `environment_before` (a warning).
    pub before_mismatch: Option<EnvDiff>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Transcript {
    pub query: String,
    pub rounds: Vec<Round>,
}

impl Transcript {
    /// Turns after the query: each response followed by its feedback.
    pub fn pending_turns(&self) -> Vec<Turn> {
        let mut out = Vec::new();
        for r in &self.rounds {
            out.push(Turn::assistant(r.response.clone()));
            if let Some(f) = &r.feedback {
                out.push(Turn::user(f.text.clone()));
            }
        }
        out
    }

    /// The whole exchange, for use as history in later queries.
    pub fn to_exchange(&self) -> Exchange {
        let mut turns = vec![Turn::user(self.query.clone())];
        turns.extend(self.pending_turns());
        Exchange { turns }
    }

    pub fn feedback_count(&self) -> usize {
        self.rounds.iter().filter(|r| r.feedback.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Exhausted,
    ClarificationRequested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct LoopResult {
    pub outcome: Outcome,
    /// Feedback messages sent.
    pub rounds_used: usize,
    /// The successful plan, or the last one that parsed.
    pub final_plan: Option<Plan>,
    pub transcript: Transcript,
    /// Trace of `final_plan` from the input environment.
    pub final_trace: Option<ExecutionTrace>,
}

impl LoopResult {
    /// Claimed-versus-executed environment difference of the final plan.
    pub fn claim_diff(&self) -> Option<&EnvDiff> {
        self.transcript.rounds.last().and_then(|r| r.claim_diff.as_ref())
    }
}

/// Progress notification sent after each model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, schemars::JsonSchema)]
pub struct LoopProgress {
    /// 0 for the initial query, then one per feedback message.
    pub round: usize,
    pub issues: usize,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum LoopError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Invalid(String),
}

/// Everything found when checking one response.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub plan: Option<Plan>,
    pub issues: Vec<Issue>,
    pub trace: Option<ExecutionTrace>,
    pub claim_diff: Option<EnvDiff>,
    pub before_mismatch: Option<EnvDiff>,
}

impl Evaluation {
    pub fn is_clarification(&self) -> bool {
        self.plan.as_ref().is_some_and(Plan::is_clarification)
    }

    pub fn is_success(&self) -> bool {
        self.plan.is_some() && self.issues.is_empty() && !self.is_clarification()
    }
}

/// Parses, rule-checks, executes and goal-checks one response.
pub fn evaluate_response(text: &str, set: &ActionSet, env: &Environment, goal: Option<&GoalSpec>) -> Evaluation {
    let plan = match parse_plan(text, set, env) {
        Ok(p) => p,
        Err(e) => {
            return Evaluation {
                plan: None,
                issues: vec![Issue::Parse(e)],
                trace: None,
                claim_diff: None,
                before_mismatch: None,
            }
        }
    };
    let before_mismatch = environment_before_mismatch(&plan, env);
    if plan.is_clarification() {
        return Evaluation {
            plan: Some(plan),
            issues: Vec::new(),
            trace: None,
            claim_diff: None,
            before_mismatch,
        };
    }
    let mut issues: Vec<Issue> = check_structural_rules(&plan, set).into_iter().map(Issue::Rule).collect();
    let (trace, claim_diff) = match WorldState::from_env(env.clone()) {
        Ok(start) => {
            let trace = execute_plan(&start, &plan, set);
            match &trace.error {
                Some(e) => issues.push(Issue::Step(e.clone())),
                None => {
                    if let Some(g) = goal {
                        let check = check_goal(trace.final_state(), g);
                        if !check.met {
                            issues.push(Issue::Goal(check));
                        }
                    }
                }
            }
            let diff = trace.is_ok().then(|| verify_claimed_environment(&trace, &plan.environment_after));
            (Some(trace), diff)
        }
        Err(e) => {
            issues.push(Issue::Parse(PlanError::InvalidEnvironment {
                key: "environment".into(),
                error: e,
            }));
            (None, None)
        }
    };
    Evaluation {
        plan: Some(plan),
        issues,
        trace,
        claim_diff,
        before_mismatch,
    }
}

/// Offline check of one stored plan: parse, rules, execution and the
/// claimed final environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ValidationReport {
    /// No issues and an accurate `environment_after`.
    pub valid: bool,
    pub plan: Option<Plan>,
    pub issues: Vec<Issue>,
    /// Steps that executed before the first failure.
    pub steps_executed: usize,
    pub claim_diff: Option<EnvDiff>,
    pub before_mismatch: Option<EnvDiff>,
}

pub fn validate_plan(text: &str, set: &ActionSet, env: &Environment, goal: Option<&GoalSpec>) -> ValidationReport {
    let eval = evaluate_response(text, set, env, goal);
    let steps_executed = eval.trace.as_ref().map_or(0, |t| t.steps.len());
    let claim_ok = eval.claim_diff.as_ref().is_none_or(EnvDiff::is_empty);
    ValidationReport {
        valid: eval.issues.is_empty() && claim_ok && eval.plan.is_some(),
        plan: eval.plan,
        issues: eval.issues,
        steps_executed,
        claim_diff: eval.claim_diff,
        before_mismatch: eval.before_mismatch,
    }
}

/// A configured model plus the vocabulary and prompts it plans with.
#[derive(Clone)]
pub struct Planner {
    pub set: Arc<ActionSet>,
    pub prompts: Arc<PromptSet>,
    pub backend: Arc<dyn ChatBackend>,
    pub params: InferenceParams,
    pub budget: usize,
    pub counter: Arc<dyn TokenCounter>,
    /// Replies to the fixed prompts from a live warm-up; `None` uses the
    /// synthesized acknowledgement.
    pub acknowledgements: Option<Vec<String>>,
}

impl Planner {
    pub fn new(set: Arc<ActionSet>, prompts: Arc<PromptSet>, backend: Arc<dyn ChatBackend>) -> Self {
        Planner {
            set,
            prompts,
            backend,
            params: InferenceParams::default(),
            budget: DEFAULT_BUDGET,
            counter: Arc::new(ByteEstimate),
            acknowledgements: None,
        }
    }

    /// Sends the fixed prompts one at a time and records the replies.
    pub fn acknowledge_prompts(&mut self) -> Result<(), LoopError> {
        let mut turns = Vec::new();
        let mut acks = Vec::new();
        for p in self.prompts.fixed_prompts() {
            turns.push(Turn::user(p));
            let conv = crate::prompt::Conversation {
                token_estimate: turns.iter().map(|t| self.counter.count(&t.text)).sum(),
                turns: turns.clone(),
                history_included: 0,
            };
            let reply = self.backend.complete(&conv, &self.params)?;
            turns.push(Turn::assistant(reply.clone()));
            acks.push(reply);
        }
        self.acknowledgements = Some(acks);
        Ok(())
    }

    pub fn query_text(&self, env: &Environment, instruction: &str) -> String {
        instantiate_query(&self.prompts.query_template, env, instruction)
    }

    /// Sends the query and iterates automatic feedback up to `max_rounds`
    /// times.
    pub fn run_loop(
        &self,
        history: &[Exchange],
        env: &Environment,
        instruction: &str,
        goal: Option<&GoalSpec>,
        max_rounds: usize,
        observer: &mut dyn FnMut(&LoopProgress),
    ) -> Result<LoopResult, LoopError> {
        let transcript = Transcript {
            query: self.query_text(env, instruction),
            rounds: Vec::new(),
        };
        self.drive(history, env, instruction, goal, transcript, max_rounds, observer)
    }

    /// Appends human feedback verbatim to a finished transcript and resumes;
    /// up to `max_rounds` automatic messages may follow.
    #[allow(clippy::too_many_arguments)]
    pub fn continue_loop(
        &self,
        history: &[Exchange],
        env: &Environment,
        instruction: &str,
        goal: Option<&GoalSpec>,
        mut transcript: Transcript,
        human_feedback: &str,
        max_rounds: usize,
        observer: &mut dyn FnMut(&LoopProgress),
    ) -> Result<LoopResult, LoopError> {
        let last = transcript
            .rounds
            .last_mut()
            .ok_or_else(|| LoopError::Invalid("there is no attempt to give feedback on".into()))?;
        if last.feedback.is_some() {
            return Err(LoopError::Invalid("the last attempt already has feedback".into()));
        }
        last.feedback = Some(FeedbackMessage::human(human_feedback));
        self.drive(history, env, instruction, goal, transcript, max_rounds, observer)
    }

    #[allow(clippy::too_many_arguments)]
    fn drive(
        &self,
        history: &[Exchange],
        env: &Environment,
        instruction: &str,
        goal: Option<&GoalSpec>,
        mut transcript: Transcript,
        max_rounds: usize,
        observer: &mut dyn FnMut(&LoopProgress),
    ) -> Result<LoopResult, LoopError> {
        let mut auto_sent = 0;
        loop {
            let pending = transcript.pending_turns();
            let mut builder = ConversationBuilder::new(&self.prompts)
                .history(history)
                .pending(&pending)
                .budget(self.budget)
                .counter(self.counter.as_ref());
            if let Some(a) = &self.acknowledgements {
                builder = builder.acknowledgements(a);
            }
            let conv = builder.build(env, instruction)?;
            let response = self.backend.complete(&conv, &self.params)?;
            let eval = evaluate_response(&response, &self.set, env, goal);
            let outcome = if eval.is_success() {
                Some(Outcome::Success)
            } else if eval.is_clarification() {
                Some(Outcome::ClarificationRequested)
            } else if auto_sent >= max_rounds {
                Some(Outcome::Exhausted)
            } else {
                None
            };
            let feedback = match outcome {
                Some(_) => None,
                None => eval.issues.first().and_then(|i| generate_feedback(i, &self.set)),
            };
            transcript.rounds.push(Round {
                response,
                plan: eval.plan.clone(),
                issues: eval.issues.clone(),
                feedback: feedback.clone(),
                claim_diff: eval.claim_diff.clone(),
                before_mismatch: eval.before_mismatch.clone(),
            });
            observer(&LoopProgress {
                round: transcript.feedback_count() - usize::from(feedback.is_some()),
                issues: eval.issues.len(),
                feedback: feedback.as_ref().map(|f| f.text.clone()),
            });
            match (outcome, feedback) {
                (Some(outcome), _) => {
                    let final_plan = eval.plan.or_else(|| transcript.rounds.iter().rev().find_map(|r| r.plan.clone()));
                    return Ok(LoopResult {
                        outcome,
                        rounds_used: transcript.feedback_count(),
                        final_plan,
                        final_trace: eval.trace,
                        transcript,
                    });
                }
                (None, Some(_)) => auto_sent += 1,
                (None, None) => {
                    return Err(LoopError::Invalid("a failed attempt produced no feedback".into()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::parse_call;
    use crate::env::parse_environment;

    fn stove_env() -> Environment {
        parse_environment(
            r#"{"assets": ["<kitchentable>", "<stove>"], "asset_states": {"<stove>": ["closed()", "switched_off()"]},
                "objects": ["<pie>"], "object_states": {"<pie>": "on_something(<kitchentable>)"}}"#,
        )
        .unwrap()
    }

    #[test]
    fn closed_container_feedback_names_the_fix() {
        let set = ActionSet::virtualhome();
        let start = WorldState::from_env(stove_env()).unwrap();
        let seq: Vec<_> = [
            "Walktowards(kitchentable)",
            "Grab(pie)",
            "Walktowards(stove)",
            "SwitchOn(stove)",
            "PutIn(pie, stove)",
        ]
        .iter()
        .map(|c| parse_call(c, &set).unwrap())
        .collect();
        let trace = crate::executor::execute_sequence(&start, &seq, &set);
        let err = trace.error.unwrap();
        let msg = generate_feedback(&Issue::Step(err), &set).unwrap();
        assert_eq!(
            msg.text,
            "Step 5 failed: PutIn(pie, stove) requires <stove> to be open. Add Open(stove) before this step."
        );
        assert_eq!(msg.source, FeedbackSource::Auto);
        assert!(msg.trigger.is_some());
    }

    #[test]
    fn verb_confusion_feedback_cites_action_list() {
        let set = ActionSet::virtualhome();
        let issue = Issue::Parse(PlanError::UnknownAction {
            step: 5,
            name: "Putin".into(),
            suggestion: Some("PutIn".into()),
        });
        let msg = generate_feedback(&issue, &set).unwrap();
        assert!(msg.text.contains("\"ROBOT ACTION LIST\""));
        assert!(msg.text.contains("Use PutIn"));
    }

    #[test]
    fn empty_diff_yields_no_message() {
        let set = ActionSet::virtualhome();
        assert!(generate_feedback(&Issue::EnvMismatch(EnvDiff::default()), &set).is_none());
    }

    #[test]
    fn put_into_container_suggests_put_in() {
        let set = ActionSet::virtualhome();
        let start = WorldState::from_env(stove_env()).unwrap();
        let seq: Vec<_> = ["Walktowards(kitchentable)", "Grab(pie)", "Walktowards(stove)", "Open(stove)", "Put(pie, stove)"]
            .iter()
            .map(|c| parse_call(c, &set).unwrap())
            .collect();
        let err = crate::executor::execute_sequence(&start, &seq, &set).error.unwrap();
        let msg = generate_feedback(&Issue::Step(err), &set).unwrap();
        assert_eq!(
            msg.text,
            "Step 5 failed: Put(pie, stove) requires <stove> to be a surface without a door. Use PutIn(pie, stove) to place an object inside a container."
        );
    }

    #[test]
    fn lfo_feedback_uses_nullary_calls() {
        let set = ActionSet::lfo();
        let env = parse_environment(
            r#"{"assets": ["<table>"], "asset_states": {}, "objects": ["<juice>"],
                "object_states": {"<juice>": ["inside_hand()", "on_something(<table>)"]}}"#,
        )
        .unwrap();
        let start = WorldState::from_env(env).unwrap();
        let err = crate::executor::execute_step(
            &start,
            &crate::actions::ActionInstance::new("move_object", &["juice"]).unwrap(),
            &set,
            4,
        )
        .unwrap_err();
        let msg = generate_feedback(&Issue::Step(err), &set).unwrap();
        assert_eq!(
            msg.text,
            "Step 4 failed: move_object() requires <juice> to be free of any plane. Add detach_from_plane() before this step."
        );
    }

    #[test]
    fn goal_feedback_suggests_producer() {
        let set = ActionSet::virtualhome();
        let g = GoalCheck {
            met: false,
            unmet: vec![(EntityName::new("<stove>").unwrap(), "switched_on()".parse().unwrap())],
            violated: vec![],
        };
        let msg = generate_feedback(&Issue::Goal(g), &set).unwrap();
        assert_eq!(
            msg.text,
            "The sequence can be executed, but the instruction is not completed: <stove> should be switched on. Consider adding SwitchOn(stove)."
        );
    }

    fn vh_planner(responses: Vec<String>) -> (Planner, Arc<crate::llm::ScriptedBackend>) {
        let backend = Arc::new(crate::llm::ScriptedBackend::from_responses(responses));
        let planner = Planner::new(
            ActionSet::virtualhome(),
            Arc::new(PromptSet::bundled("virtualhome").unwrap()),
            backend.clone(),
        );
        (planner, backend)
    }

    fn response(calls: &[&str]) -> String {
        let set = ActionSet::virtualhome();
        let seq = calls.iter().map(|c| parse_call(c, &set).unwrap()).collect();
        let plan = crate::executor::draft_plan(&stove_env(), seq, &set, Some(EntityName::new("<pie>").unwrap()), "heat the pie");
        format!("Here is the plan.\n{}", crate::plan::serialize_plan(&plan))
    }

    const FAULTY: [&str; 5] = ["Walktowards(kitchentable)", "Grab(pie)", "Walktowards(stove)", "SwitchOn(stove)", "PutIn(pie, stove)"];
    const FIXED: [&str; 7] = [
        "Walktowards(kitchentable)",
        "Grab(pie)",
        "Walktowards(stove)",
        "Open(stove)",
        "PutIn(pie, stove)",
        "Close(stove)",
        "SwitchOn(stove)",
    ];

    fn goal() -> GoalSpec {
        serde_json::from_str(r#"{"required": {"<pie>": "inside_something(<stove>)", "<stove>": "switched_on()"}}"#).unwrap()
    }

    #[test]
    fn first_try_success_uses_no_feedback() {
        let (planner, backend) = vh_planner(vec![response(&FIXED)]);
        let mut seen = Vec::new();
        let r = planner
            .run_loop(&[], &stove_env(), "heat the pie", Some(&goal()), 5, &mut |p| seen.push(p.clone()))
            .unwrap();
        assert_eq!(r.outcome, Outcome::Success);
        assert_eq!(r.rounds_used, 0);
        assert_eq!(backend.calls(), 1);
        assert!(r.claim_diff().unwrap().is_empty());
        assert_eq!(seen.len(), 1);
        assert_eq!(r.final_trace.unwrap().steps.len(), 7);
    }

    #[test]
    fn two_corrections_then_success() {
        let misspelled = response(&FIXED).replace("PutIn(<pie>, <stove>)", "Putin(<pie>, <stove>)");
        let (planner, backend) = vh_planner(vec![response(&FAULTY), misspelled, response(&FIXED)]);
        let r = planner.run_loop(&[], &stove_env(), "heat the pie", Some(&goal()), 5, &mut |_| {}).unwrap();
        assert_eq!(r.outcome, Outcome::Success);
        assert_eq!(r.rounds_used, 2);
        assert_eq!(backend.calls(), 3);
        let texts: Vec<_> = r.transcript.rounds.iter().filter_map(|x| x.feedback.as_ref()).map(|f| f.text.as_str()).collect();
        assert_eq!(
            texts[0],
            "Step 5 failed: PutIn(pie, stove) requires <stove> to be open. Add Open(stove) before this step."
        );
        assert!(texts[1].contains("Putin") && texts[1].contains("PutIn"));
        let turns = r.transcript.pending_turns();
        assert_eq!(turns.len(), 5);
        assert_eq!(r.transcript.to_exchange().turns.len(), 6);
    }

    #[test]
    fn loop_stops_at_round_cap() {
        let (planner, backend) = vh_planner(vec![response(&FAULTY); 10]);
        let r = planner.run_loop(&[], &stove_env(), "heat the pie", Some(&goal()), 3, &mut |_| {}).unwrap();
        assert_eq!(r.outcome, Outcome::Exhausted);
        assert_eq!(r.rounds_used, 3);
        assert_eq!(backend.calls(), 4);
        assert!(r.final_plan.is_some());
    }

    #[test]
    fn unmet_goal_triggers_feedback() {
        let partial = &FIXED[..6];
        let (planner, _) = vh_planner(vec![response(partial), response(&FIXED)]);
        let r = planner.run_loop(&[], &stove_env(), "heat the pie", Some(&goal()), 5, &mut |_| {}).unwrap();
        assert_eq!(r.rounds_used, 1);
        let fb = r.transcript.rounds[0].feedback.as_ref().unwrap();
        assert!(fb.text.ends_with("Consider adding SwitchOn(stove)."), "{}", fb.text);
    }

    #[test]
    fn clarification_ends_the_loop() {
        let text = response(&FIXED).replace("\"question\": \"\"", "\"question\": \"Which pie do you mean?\"");
        let (planner, _) = vh_planner(vec![text]);
        let r = planner.run_loop(&[], &stove_env(), "heat it", None, 5, &mut |_| {}).unwrap();
        assert_eq!(r.outcome, Outcome::ClarificationRequested);
        assert_eq!(r.rounds_used, 0);
    }

    #[test]
    fn human_feedback_is_forwarded_verbatim() {
        let (planner, backend) = vh_planner(vec![response(&FIXED[..6]), response(&FIXED)]);
        let first = planner.run_loop(&[], &stove_env(), "put the pie in the stove", None, 5, &mut |_| {}).unwrap();
        assert_eq!(first.outcome, Outcome::Success);
        let r = planner
            .continue_loop(&[], &stove_env(), "put the pie in the stove", None, first.transcript, "Also switch on the stove.", 5, &mut |_| {})
            .unwrap();
        assert_eq!(r.outcome, Outcome::Success);
        assert_eq!(backend.calls(), 2);
        let fb = r.transcript.rounds[0].feedback.as_ref().unwrap();
        assert_eq!(fb.source, FeedbackSource::Human);
        assert_eq!(fb.text, "Also switch on the stove.");
        assert_eq!(r.final_trace.unwrap().steps.len(), 7);
    }
}
