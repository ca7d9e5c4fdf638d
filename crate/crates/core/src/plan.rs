//! The model's five-key output dictionary: extraction from chat text, strict
//! validation against an action set and environment, and serialization.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::actions::{ActionInstance, ActionSet, ActionSpec, Effect, RawCall, Subject, TargetRef};
use crate::env::{diff_environments, environment_from_value, EntityName, EnvDiff, EnvError, Environment};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanError {
    #[error("no JSON object found in the response")]
    NoJsonFound,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidField { key: String, reason: String },
    #[error("invalid `{key}`: {error}")]
    InvalidEnvironment { key: String, error: EnvError },
    #[error("task_sequence has {actions} actions but step_instructions has {instructions} entries")]
    LengthMismatch { actions: usize, instructions: usize },
    #[error("step {step}: unknown action `{name}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownAction {
        step: usize,
        name: String,
        suggestion: Option<String>,
    },
    #[error("step {step}: {name} takes {expected} argument(s), got {got}")]
    ArityMismatch {
        step: usize,
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("object_name `{0}` is not an object of environment_before")]
    UnknownObject(String),
    #[error("step {step}: `{name}` is not in the environment")]
    UnknownEntity { step: usize, name: String },
    #[error("step {step}: cannot determine the arguments of {name}: {reason}")]
    MissingArgument {
        step: usize,
        name: String,
        reason: String,
    },
}

/// `object_name` as written: one name or a list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectNames {
    pub names: Vec<EntityName>,
    /// Written as a JSON list (kept so serialization reproduces the input shape).
    pub as_list: bool,
}

impl ObjectNames {
    pub fn single(name: EntityName) -> Self {
        ObjectNames {
            names: vec![name],
            as_list: false,
        }
    }

    pub fn primary(&self) -> Option<&EntityName> {
        match self.names.as_slice() {
            [one] => Some(one),
            _ => None,
        }
    }
}

impl Serialize for ObjectNames {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.as_list {
            self.names.serialize(s)
        } else {
            match self.names.first() {
                Some(n) => n.serialize(s),
                None => s.serialize_str(""),
            }
        }
    }
}

impl schemars::JsonSchema for ObjectNames {
    fn schema_name() -> String {
        "ObjectNames".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        serde_json::from_value(serde_json::json!({
            "oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]
        }))
        .expect("static schema")
    }
}

impl<'de> Deserialize<'de> for ObjectNames {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        object_names(&Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

fn object_names(v: &Value) -> Result<ObjectNames, String> {
    match v {
        Value::String(s) if s.is_empty() => Ok(ObjectNames::default()),
        Value::String(s) => Ok(ObjectNames::single(EntityName::parse_loose(s).map_err(|e| e.to_string())?)),
        Value::Array(items) => Ok(ObjectNames {
            names: items
                .iter()
                .map(|i| {
                    i.as_str()
                        .ok_or_else(|| "expected entity-name strings".to_string())
                        .and_then(|s| EntityName::parse_loose(s).map_err(|e| e.to_string()))
                })
                .collect::<Result<_, _>>()?,
            as_list: true,
        }),
        _ => Err("expected an entity name or a list of entity names".into()),
    }
}

/// A validated plan.
///
/// Serde uses a storage form with resolved call arguments; the five-key
/// document comes from [`serialize_plan`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Plan {
    pub task_sequence: Vec<ActionInstance>,
    pub step_instructions: Vec<String>,
    pub object_name: ObjectNames,
    pub environment_before: Environment,
    pub environment_after: Environment,
    pub instruction_summary: String,
    /// Non-empty when the model asks the user to rephrase.
    pub question: String,
}

impl Plan {
    pub fn is_clarification(&self) -> bool {
        !self.question.trim().is_empty()
    }
}

/// A rule from the action set's structural rules that the plan breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RuleViolation {
    pub rule_number: u32,
    /// 1-based step the violation points at.
    pub step: Option<usize>,
    pub message: String,
}

impl fmt::Display for RuleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(step) => write!(f, "rule {} (step {step}): {}", self.rule_number, self.message),
            None => write!(f, "rule {}: {}", self.rule_number, self.message),
        }
    }
}

/// Finds the first JSON object in free text, tolerating prose, code fences
/// and trailing commas.
pub fn extract_json_object(text: &str) -> Result<Map<String, Value>, PlanError> {
    extract_preferring(text, None)
}

/// Like [`extract_json_object`], but skips parsed objects lacking `key` (such
/// as dictionaries nested inside a malformed outer object).
fn extract_preferring(text: &str, key: Option<&str>) -> Result<Map<String, Value>, PlanError> {
    let mut first_error = None;
    let mut first_object = None;
    for (i, _) in text.match_indices('{') {
        let candidate = &text[i..];
        let parsed = match first_value(candidate) {
            Ok(v) => Ok(v),
            Err(e) => first_value(&strip_trailing_commas(candidate)).map_err(|_| e),
        };
        match parsed {
            Ok(Value::Object(map)) => {
                if key.is_none_or(|k| map.contains_key(k)) {
                    return Ok(map);
                }
                first_object.get_or_insert(map);
            }
            Ok(_) => {}
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    match (first_error, first_object) {
        (Some(e), _) => Err(PlanError::MalformedJson(e)),
        (None, Some(map)) => Ok(map),
        (None, None) => Err(PlanError::NoJsonFound),
    }
}

fn first_value(text: &str) -> Result<Value, String> {
    let mut stream = serde_json::Deserializer::from_str(text).into_iter::<Value>();
    match stream.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(e.to_string()),
        None => Err("empty input".into()),
    }
}

/// Removes commas that directly precede `}` or `]`, outside string literals.
fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, PlanError> {
    obj.get(key).ok_or_else(|| PlanError::MissingKey(path.to_string()))
}

fn string_list(v: &Value, key: &str) -> Result<Vec<String>, PlanError> {
    let invalid = |reason: &str| PlanError::InvalidField {
        key: key.to_string(),
        reason: reason.to_string(),
    };
    v.as_array()
        .ok_or_else(|| invalid("expected a list of strings"))?
        .iter()
        .map(|i| i.as_str().map(str::to_string).ok_or_else(|| invalid("expected a list of strings")))
        .collect()
}

fn text_field(v: &Value, key: &str) -> Result<String, PlanError> {
    v.as_str().map(str::to_string).ok_or_else(|| PlanError::InvalidField {
        key: key.to_string(),
        reason: "expected a string".into(),
    })
}

/// Extracts, parses and validates a plan from an assistant message.
///
/// Call arguments resolve against `env`, the environment the plan was
/// requested for.
pub fn parse_plan(text: &str, set: &ActionSet, env: &Environment) -> Result<Plan, PlanError> {
    let root = extract_preferring(text, Some("task_cohesion"))?;
    plan_from_map(&root, set, env)
}

pub fn plan_from_value(value: &Value, set: &ActionSet, env: &Environment) -> Result<Plan, PlanError> {
    let root = value.as_object().ok_or_else(|| PlanError::InvalidField {
        key: "$".into(),
        reason: "expected a JSON object".into(),
    })?;
    plan_from_map(root, set, env)
}

fn plan_from_map(root: &Map<String, Value>, set: &ActionSet, env: &Environment) -> Result<Plan, PlanError> {
    let cohesion = get(root, "task_cohesion", "task_cohesion")?;
    let cohesion = cohesion.as_object().ok_or_else(|| PlanError::InvalidField {
        key: "task_cohesion".into(),
        reason: "expected a dictionary".into(),
    })?;
    let seq = get(cohesion, "task_sequence", "task_cohesion.task_sequence")?;
    let steps = get(cohesion, "step_instructions", "task_cohesion.step_instructions")?;
    let objects = get(cohesion, "object_name", "task_cohesion.object_name")?;
    let before = get(root, "environment_before", "environment_before")?;
    let after = get(root, "environment_after", "environment_after")?;
    let summary = get(root, "instruction_summary", "instruction_summary")?;
    let question = root.get("question");

    let raw_calls = string_list(seq, "task_cohesion.task_sequence")?;
    let step_instructions = string_list(steps, "task_cohesion.step_instructions")?;
    let object_name = object_names(objects).map_err(|reason| PlanError::InvalidField {
        key: "task_cohesion.object_name".into(),
        reason,
    })?;
    let instruction_summary = text_field(summary, "instruction_summary")?;
    let question = match question {
        None | Some(Value::Null) => String::new(),
        Some(q) => text_field(q, "question")?,
    };

    let environment_before = environment_from_value(before).map_err(|error| PlanError::InvalidEnvironment {
        key: "environment_before".into(),
        error,
    })?;
    let environment_after = environment_from_value(after).map_err(|error| PlanError::InvalidEnvironment {
        key: "environment_after".into(),
        error,
    })?;

    if raw_calls.len() != step_instructions.len() {
        return Err(PlanError::LengthMismatch {
            actions: raw_calls.len(),
            instructions: step_instructions.len(),
        });
    }

    let mut calls = Vec::with_capacity(raw_calls.len());
    for (i, text) in raw_calls.iter().enumerate() {
        let step = i + 1;
        let call: RawCall = text.parse().map_err(|reason| PlanError::InvalidField {
            key: format!("task_cohesion.task_sequence[{i}]"),
            reason,
        })?;
        let spec = set.lookup(&call.name).map_err(|e| PlanError::UnknownAction {
            step,
            name: e.name,
            suggestion: e.suggestion,
        })?;
        if !call.args.is_empty() && call.args.len() != spec.arity {
            return Err(PlanError::ArityMismatch {
                step,
                name: spec.name.clone(),
                expected: spec.arity,
                got: call.args.len(),
            });
        }
        calls.push((step, call, spec));
    }

    let mut resolved_objects = Vec::with_capacity(object_name.names.len());
    for name in &object_name.names {
        let found = environment_before
            .objects()
            .iter()
            .find(|o| o.matches(name))
            .ok_or_else(|| PlanError::UnknownObject(name.as_str().to_string()))?;
        resolved_objects.push(found.clone());
    }
    let object_name = ObjectNames {
        names: resolved_objects,
        as_list: object_name.as_list,
    };

    let mut task_sequence = Vec::with_capacity(calls.len());
    for (step, call, spec) in calls {
        let instance = if call.args.is_empty() && spec.arity > 0 {
            implicit_instance(step, spec, &object_name, &environment_after, env)?
        } else {
            let mut args = Vec::with_capacity(call.args.len());
            for a in &call.args {
                let unknown = || PlanError::UnknownEntity {
                    step,
                    name: a.clone(),
                };
                let name = EntityName::parse_loose(a).map_err(|_| unknown())?;
                args.push(env.resolve(&name).cloned().ok_or_else(unknown)?);
            }
            ActionInstance {
                name: spec.name.clone(),
                args,
                implicit_args: false,
            }
        };
        task_sequence.push(instance);
    }

    Ok(Plan {
        task_sequence,
        step_instructions,
        object_name,
        environment_before,
        environment_after,
        instruction_summary,
        question,
    })
}

/// Fills the arguments of a call written without them: the manipulated
/// object comes from `object_name`; a second argument is read off the
/// placement the action produces in `environment_after`.
fn implicit_instance(
    step: usize,
    spec: &ActionSpec,
    objects: &ObjectNames,
    after: &Environment,
    env: &Environment,
) -> Result<ActionInstance, PlanError> {
    let missing = |reason: String| PlanError::MissingArgument {
        step,
        name: spec.name.clone(),
        reason,
    };
    let object = objects
        .primary()
        .ok_or_else(|| missing("object_name must name exactly one object".into()))?;
    let object = env
        .resolve(object)
        .cloned()
        .ok_or_else(|| PlanError::UnknownEntity {
            step,
            name: object.as_str().to_string(),
        })?;
    let mut args = vec![object.clone()];
    if spec.arity == 2 {
        let kind = spec
            .effects
            .iter()
            .find_map(|e| match e {
                Effect::Add {
                    subject: Subject::Param(0),
                    kind,
                    target: Some(TargetRef::Param(1)),
                } => Some(*kind),
                _ => None,
            })
            .ok_or_else(|| missing("the second argument cannot be inferred".into()))?;
        let target = after
            .states_of(&object)
            .iter()
            .find(|p| p.kind == kind)
            .and_then(|p| p.target.clone())
            .ok_or_else(|| missing(format!("environment_after gives no {kind}() state for {object}")))?;
        let target = env.resolve(&target).cloned().ok_or_else(|| PlanError::UnknownEntity {
            step,
            name: target.as_str().to_string(),
        })?;
        args.push(target);
    }
    Ok(ActionInstance {
        name: spec.name.clone(),
        args,
        implicit_args: true,
    })
}

/// Differences between the plan's `environment_before` and the environment
/// it was requested for; `None` when they agree.
pub fn environment_before_mismatch(plan: &Plan, env: &Environment) -> Option<EnvDiff> {
    let diff = diff_environments(env, &plan.environment_before);
    (!diff.is_empty()).then_some(diff)
}

/// Checks the set's whole-plan rules.
pub fn check_structural_rules(plan: &Plan, set: &ActionSet) -> Vec<RuleViolation> {
    check_rules_on(&plan.task_sequence, set)
}

pub fn check_rules_on(seq: &[ActionInstance], set: &ActionSet) -> Vec<RuleViolation> {
    use crate::actions::PlanRule;
    let mut out = Vec::new();
    if seq.is_empty() {
        return out;
    }
    for rule in &set.structural_rules {
        match rule {
            PlanRule::FirstAction { number, action, message } => {
                if seq[0].name != *action {
                    out.push(RuleViolation {
                        rule_number: *number,
                        step: Some(1),
                        message: message.clone(),
                    });
                }
            }
            PlanRule::LastAction { number, action, message } => {
                if seq[seq.len() - 1].name != *action {
                    out.push(RuleViolation {
                        rule_number: *number,
                        step: Some(seq.len()),
                        message: message.clone(),
                    });
                }
            }
            PlanRule::NoRepeatWithout {
                number,
                action,
                reset_by,
                message,
            } => {
                let mut armed = false;
                for (i, a) in seq.iter().enumerate() {
                    if a.name == *action {
                        if armed {
                            out.push(RuleViolation {
                                rule_number: *number,
                                step: Some(i + 1),
                                message: message.clone(),
                            });
                        }
                        armed = true;
                    } else if reset_by.as_deref() == Some(a.name.as_str()) {
                        armed = false;
                    }
                }
            }
        }
    }
    out
}

/// The five-key document as a JSON value.
pub fn plan_document(plan: &Plan) -> Value {
    let seq: Vec<Value> = plan.task_sequence.iter().map(|a| Value::String(a.to_plan_string())).collect();
    let mut cohesion = Map::new();
    cohesion.insert("task_sequence".into(), Value::Array(seq));
    cohesion.insert(
        "step_instructions".into(),
        Value::Array(plan.step_instructions.iter().cloned().map(Value::String).collect()),
    );
    cohesion.insert(
        "object_name".into(),
        serde_json::to_value(&plan.object_name).expect("object names serialize"),
    );
    let mut root = Map::new();
    root.insert("task_cohesion".into(), Value::Object(cohesion));
    root.insert(
        "environment_before".into(),
        serde_json::to_value(&plan.environment_before).expect("environment serializes"),
    );
    root.insert(
        "environment_after".into(),
        serde_json::to_value(&plan.environment_after).expect("environment serializes"),
    );
    root.insert("instruction_summary".into(), Value::String(plan.instruction_summary.clone()));
    root.insert("question".into(), Value::String(plan.question.clone()));
    Value::Object(root)
}

/// Five-key JSON document in the canonical key order.
pub fn serialize_plan(plan: &Plan) -> String {
    serde_json::to_string_pretty(&plan_document(plan)).expect("plan serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::parse_environment;

    const SHELF_ENV: &str = r#"{"assets": ["<table>", "<shelf_bottom>", "<shelf_top>", "<trash_bin>", "<floor>"],
        "asset_states": {"<shelf_bottom>": "on_something(<table>)", "<trash_bin>": "on_something(<floor>)"},
        "objects": ["<spam>", "<juice>"],
        "object_states": {"<spam>": "on_something(<table>)", "<juice>": "on_something(<shelf_bottom>)"}}"#;

    fn juice_plan_text() -> String {
        let after = SHELF_ENV.replace(
            "\"<juice>\": \"on_something(<shelf_bottom>)\"",
            "\"<juice>\": \"on_something(<shelf_top>)\"",
        );
        format!(
            r#"Sure, here is the plan:
```python
{{
    "task_cohesion": {{
        "task_sequence": [
            "move_hand()",
            "grasp_object()",
            "detach_from_plane()",
            "move_object()",
            "attach_to_plane()",
            "release_object()"
        ],
        "step_instructions": [
            "move the hand near the juice",
            "grasp the juice",
            "pick up the juice",
            "move the juice upward",
            "place the juice",
            "release the juice"
        ],
        "object_name": "<juice>"
    }},
    "environment_before": {SHELF_ENV},
    "environment_after": {after},
    "instruction_summary": "put the juice on top of the shelf",
}}
```
Let me know if anything should change."#
        )
    }

    fn env() -> Environment {
        parse_environment(SHELF_ENV).unwrap()
    }

    #[test]
    fn parses_wrapped_nullary_plan() {
        let set = ActionSet::lfo();
        let plan = parse_plan(&juice_plan_text(), &set, &env()).unwrap();
        let names: Vec<_> = plan.task_sequence.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names.first(), Some(&"move_hand"));
        assert_eq!(names[1], "grasp_object");
        assert_eq!(&names[names.len() - 2..], ["attach_to_plane", "release_object"]);
        assert_eq!(plan.object_name.primary().unwrap().as_str(), "<juice>");
        assert_eq!(plan.question, "");
        assert!(plan.task_sequence[0].args.is_empty());
        let attach = &plan.task_sequence[4];
        assert_eq!(attach.args[1].as_str(), "<shelf_top>");
        assert!(serialize_plan(&plan).contains("\"object_name\": \"<juice>\""));
        assert!(check_structural_rules(&plan, &set).is_empty());
    }

    #[test]
    fn acknowledgement_has_no_json() {
        assert_eq!(
            parse_plan("Waiting for next input.", &ActionSet::lfo(), &env()),
            Err(PlanError::NoJsonFound)
        );
    }

    #[test]
    fn length_mismatch() {
        let text = juice_plan_text().replace("\"pick up the juice\",", "");
        assert_eq!(
            parse_plan(&text, &ActionSet::lfo(), &env()),
            Err(PlanError::LengthMismatch {
                actions: 6,
                instructions: 5
            })
        );
    }

    #[test]
    fn reports_first_failure_in_check_order() {
        let set = ActionSet::lfo();
        let missing = juice_plan_text().replace("\"instruction_summary\"", "\"summary\"");
        assert_eq!(
            parse_plan(&missing, &set, &env()),
            Err(PlanError::MissingKey("instruction_summary".into()))
        );
        let unknown = juice_plan_text().replace("\"move_object()\"", "\"lift_object()\"");
        assert!(matches!(
            parse_plan(&unknown, &set, &env()),
            Err(PlanError::UnknownAction { step: 4, .. })
        ));
        let object = juice_plan_text().replace("\"object_name\": \"<juice>\"", "\"object_name\": \"<milk>\"");
        assert_eq!(
            parse_plan(&object, &set, &env()),
            Err(PlanError::UnknownObject("<milk>".into()))
        );
        let bad_env = juice_plan_text().replacen("on_something(<table>)", "on_something(<ghost>)", 1);
        assert!(matches!(
            parse_plan(&bad_env, &set, &env()),
            Err(PlanError::InvalidEnvironment { .. })
        ));
        let truncated = juice_plan_text().replace("\"instruction_summary\": \"put the juice on top of the shelf\",\n}", "");
        assert!(matches!(parse_plan(&truncated, &set, &env()), Err(PlanError::MalformedJson(_))));
    }

    #[test]
    fn rule_violations() {
        let set = ActionSet::lfo();
        let no_move = juice_plan_text()
            .replace("\"move_hand()\",\n", "")
            .replace("\"move the hand near the juice\",\n", "");
        let plan = parse_plan(&no_move, &set, &env()).unwrap();
        let v = check_structural_rules(&plan, &set);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule_number, 1);
        assert!(v[0].message.contains("move_hand()"));

        let double = juice_plan_text()
            .replace("\"grasp_object()\",", "\"grasp_object()\", \"grasp_object()\",")
            .replace("\"grasp the juice\",", "\"grasp the juice\", \"grasp it again\",");
        let plan = parse_plan(&double, &set, &env()).unwrap();
        let v = check_structural_rules(&plan, &set);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].rule_number, v[0].step), (9, Some(3)));
    }

    #[test]
    fn clarification_plan_round_trips() {
        let text = format!(
            r#"{{"task_cohesion": {{"task_sequence": [], "step_instructions": [], "object_name": ""}},
               "environment_before": {SHELF_ENV}, "environment_after": {SHELF_ENV},
               "instruction_summary": "", "question": "Which shelf?"}}"#
        );
        let plan = parse_plan(&text, &ActionSet::lfo(), &env()).unwrap();
        assert!(plan.is_clarification());
        let doc = serialize_plan(&plan);
        assert!(doc.contains("\"task_sequence\": []"));
        assert!(doc.contains("\"question\": \"Which shelf?\""));
        assert_eq!(parse_plan(&doc, &ActionSet::lfo(), &env()).unwrap(), plan);
    }

    #[test]
    fn serialization_round_trips_and_keeps_key_order() {
        let set = ActionSet::lfo();
        let plan = parse_plan(&juice_plan_text(), &set, &env()).unwrap();
        let doc = serialize_plan(&plan);
        let keys = ["task_cohesion", "task_sequence", "step_instructions", "object_name", "environment_before", "environment_after", "instruction_summary", "question"];
        let positions: Vec<_> = keys.iter().map(|k| doc.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(parse_plan(&doc, &set, &env()).unwrap(), plan);
    }

    #[test]
    fn parameterized_calls() {
        let env = parse_environment(
            r#"{"assets": ["<tvstand>"], "asset_states": {}, "objects": ["<tv>"],
                "object_states": {"<tv>": ["on_something(<tvstand>)", "switched_off()"]}}"#,
        )
        .unwrap();
        let text = format!(
            r#"{{"task_cohesion": {{"task_sequence": ["WalkTowards(tvstand)", "SwitchOn(<tv>)"],
                 "step_instructions": ["walk to the tv stand", "turn on the tv"], "object_name": "<tv>"}},
                 "environment_before": {e}, "environment_after": {e}, "instruction_summary": "turn on the tv", "question": ""}}"#,
            e = crate::env::serialize_environment(&env)
        );
        let set = ActionSet::virtualhome();
        let plan = parse_plan(&text, &set, &env).unwrap();
        assert_eq!(plan.task_sequence[0].to_string(), "Walktowards(tvstand)");
        assert!(check_structural_rules(&plan, &set).is_empty());
        let bad = text.replace("SwitchOn(<tv>)", "SwitchOn(<radio>)");
        assert_eq!(
            parse_plan(&bad, &set, &env),
            Err(PlanError::UnknownEntity {
                step: 2,
                name: "<radio>".into()
            })
        );
        let arity = text.replace("SwitchOn(<tv>)", "SwitchOn(<tv>, <tvstand>)");
        assert!(matches!(parse_plan(&arity, &set, &env), Err(PlanError::ArityMismatch { step: 2, .. })));
    }

    #[test]
    fn trailing_commas_are_tolerated_only_outside_strings() {
        assert_eq!(strip_trailing_commas(r#"{"a": [1, 2,], "b": ",}",}"#), r#"{"a": [1, 2], "b": ",}"}"#);
    }

    #[test]
    fn before_mismatch_is_reported_separately() {
        let set = ActionSet::lfo();
        let plan = parse_plan(&juice_plan_text(), &set, &env()).unwrap();
        assert!(environment_before_mismatch(&plan, &env()).is_none());
        let other = parse_environment(&SHELF_ENV.replace("on_something(<table>)\", \"<juice>", "on_something(<floor>)\", \"<juice>")).unwrap();
        assert!(environment_before_mismatch(&plan, &other).is_some());
    }
}
