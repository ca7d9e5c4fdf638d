//! Action vocabularies: names, arities, preconditions, effects and the
//! structural rules a set imposes on whole plans.
//!
//! Sets are data. Two are bundled (`lfo` and `virtualhome`); user-defined sets
//! load from the same JSON schema via [`load_action_set`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::env::{EntityName, EnvError, StateKind};

pub const LFO_JSON: &str = include_str!("../action_sets/lfo.json");
pub const VIRTUALHOME_JSON: &str = include_str!("../action_sets/virtualhome.json");

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSetError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
}

fn violation(path: impl Into<String>, reason: impl Into<String>) -> ActionSetError {
    ActionSetError::SchemaViolation {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Lookup failure carrying the closest known name.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize, schemars::JsonSchema)]
#[error("unknown action `{name}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
pub struct UnknownAction {
    pub name: String,
    pub suggestion: Option<String>,
}

/// Who a condition or effect is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subject {
    /// The n-th argument of the call.
    Param(usize),
    /// The container linked to the n-th argument through the set's `links`.
    Linked(usize),
    Hand,
    Agent,
}

impl Subject {
    fn param_index(self) -> Option<usize> {
        match self {
            Subject::Param(i) | Subject::Linked(i) => Some(i),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSubject {
    Index(usize),
    Keyword(String),
    Linked { linked: usize },
}

impl Serialize for Subject {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            Subject::Param(i) => RawSubject::Index(i),
            Subject::Linked(i) => RawSubject::Linked { linked: i },
            Subject::Hand => RawSubject::Keyword("hand".into()),
            Subject::Agent => RawSubject::Keyword("agent".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Subject {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match RawSubject::deserialize(d)? {
            RawSubject::Index(i) => Ok(Subject::Param(i)),
            RawSubject::Linked { linked } => Ok(Subject::Linked(linked)),
            RawSubject::Keyword(k) if k == "hand" => Ok(Subject::Hand),
            RawSubject::Keyword(k) if k == "agent" => Ok(Subject::Agent),
            RawSubject::Keyword(k) => Err(serde::de::Error::custom(format!(
                "unknown subject `{k}` (expected a parameter index, \"hand\", \"agent\" or {{\"linked\": n}})"
            ))),
        }
    }
}

/// A parameter reference or a literal entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetRef {
    Param(usize),
    Entity(EntityName),
}

impl Serialize for TargetRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TargetRef::Param(i) => s.serialize_u64(*i as u64),
            TargetRef::Entity(e) => e.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for TargetRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(TargetRef::Param(i)),
            Raw::Name(n) => EntityName::new(&n).map(TargetRef::Entity).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    MustHold,
    MustNotHold,
}

/// What a condition checks about its subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Test {
    /// Hand subject: some object is grasped.
    Holding,
    /// Agent subject: the agent is near the target.
    Near(TargetRef),
    /// The subject carries `kind`, with the given target if one is named.
    State { kind: StateKind, target: Option<TargetRef> },
    /// The subject has an `on_something` or `inside_something` predicate.
    Placed,
    /// The subject is not inside a closed container.
    Accessible,
    /// The subject has an `open` or `closed` predicate.
    Openable,
}

/// A precondition of an action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCondition", into = "RawCondition")]
pub struct Condition {
    pub subject: Subject,
    pub test: Test,
    pub polarity: Polarity,
    /// Corrective hint template; `{0}`, `{1}` expand to argument names.
    pub hint: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCondition {
    subject: Subject,
    test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<StateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<TargetRef>,
    #[serde(default, skip_serializing_if = "is_default")]
    polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hint: Option<String>,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

impl TryFrom<RawCondition> for Condition {
    type Error = String;

    fn try_from(raw: RawCondition) -> Result<Self, String> {
        let test = match raw.test.as_str() {
            "holding" => Test::Holding,
            "near" => Test::Near(raw.target.clone().ok_or("`near` needs a target")?),
            "state" => Test::State {
                kind: raw.kind.ok_or("`state` needs a kind")?,
                target: raw.target.clone(),
            },
            "placed" => Test::Placed,
            "accessible" => Test::Accessible,
            "openable" => Test::Openable,
            other => return Err(format!("unknown test `{other}`")),
        };
        if raw.kind.is_some() && !matches!(test, Test::State { .. }) {
            return Err(format!("`kind` is only valid for `state` tests, not `{}`", raw.test));
        }
        if raw.target.is_some() && !matches!(test, Test::State { .. } | Test::Near(_)) {
            return Err(format!("`target` is not valid for `{}` tests", raw.test));
        }
        let subject_ok = match test {
            Test::Holding => raw.subject == Subject::Hand,
            Test::Near(_) => raw.subject == Subject::Agent,
            _ => matches!(raw.subject, Subject::Param(_) | Subject::Linked(_)),
        };
        if !subject_ok {
            return Err(format!("subject {:?} cannot be used with `{}`", raw.subject, raw.test));
        }
        Ok(Condition {
            subject: raw.subject,
            test,
            polarity: raw.polarity,
            hint: raw.hint,
        })
    }
}

impl From<Condition> for RawCondition {
    fn from(c: Condition) -> Self {
        let (test, kind, target) = match c.test {
            Test::Holding => ("holding", None, None),
            Test::Near(t) => ("near", None, Some(t)),
            Test::State { kind, target } => ("state", Some(kind), target),
            Test::Placed => ("placed", None, None),
            Test::Accessible => ("accessible", None, None),
            Test::Openable => ("openable", None, None),
        };
        RawCondition {
            subject: c.subject,
            test: test.to_string(),
            kind,
            target,
            polarity: c.polarity,
            hint: c.hint,
        }
    }
}

impl schemars::JsonSchema for Condition {
    fn schema_name() -> String {
        "Condition".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        serde_json::from_value(serde_json::json!({
            "type": "object",
            "required": ["subject", "test"],
            "properties": {
                "subject": {"oneOf": [
                    {"type": "integer", "minimum": 0},
                    {"type": "string", "enum": ["hand", "agent"]},
                    {"type": "object", "required": ["linked"], "properties": {"linked": {"type": "integer", "minimum": 0}}}
                ]},
                "test": {"type": "string", "enum": ["holding", "near", "state", "placed", "accessible", "openable"]},
                "kind": {"type": "string"},
                "target": {"oneOf": [{"type": "integer", "minimum": 0}, {"type": "string"}]},
                "polarity": {"type": "string", "enum": ["must_hold", "must_not_hold"]},
                "hint": {"type": "string"}
            }
        }))
        .expect("static schema")
    }
}

impl Condition {
    fn references(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.subject.param_index().into_iter().collect();
        match &self.test {
            Test::Near(TargetRef::Param(i)) => out.push(*i),
            Test::State { target: Some(TargetRef::Param(i)), .. } => out.push(*i),
            _ => {}
        }
        out
    }
}

/// A state change applied when an action succeeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Effect {
    Add {
        subject: Subject,
        kind: StateKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<TargetRef>,
    },
    Remove {
        subject: Subject,
        kind: StateKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<TargetRef>,
    },
    /// Drops whichever placement predicate the subject has.
    ClearPlacement { subject: Subject },
}

impl Effect {
    pub fn subject(&self) -> Subject {
        match self {
            Effect::Add { subject, .. } | Effect::Remove { subject, .. } | Effect::ClearPlacement { subject } => {
                *subject
            }
        }
    }

    fn references(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.subject().param_index().into_iter().collect();
        if let Effect::Add { target: Some(TargetRef::Param(i)), .. } | Effect::Remove { target: Some(TargetRef::Param(i)), .. } = self {
            out.push(*i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub name: String,
    pub arity: usize,
    pub description: String,
    #[serde(default)]
    pub preconditions: Vec<Condition>,
    #[serde(default)]
    pub effects: Vec<Effect>,
    /// Alternative exact spellings accepted by [`ActionSet::lookup`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl ActionSpec {
    /// True when the first argument must be grasped for the action to apply.
    pub fn requires_grasp(&self) -> bool {
        self.preconditions.iter().any(|c| {
            c.subject == Subject::Param(0)
                && c.polarity == Polarity::MustHold
                && matches!(c.test, Test::State { kind: StateKind::InsideHand, .. })
        })
    }
}

/// Whole-plan rules such as "the first element should be move_hand()".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanRule {
    FirstAction { number: u32, action: String, message: String },
    LastAction { number: u32, action: String, message: String },
    /// `action` may not occur twice unless `reset_by` occurs in between.
    NoRepeatWithout {
        number: u32,
        action: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reset_by: Option<String>,
        message: String,
    },
}

impl PlanRule {
    fn action_names(&self) -> Vec<&str> {
        match self {
            PlanRule::FirstAction { action, .. } | PlanRule::LastAction { action, .. } => vec![action],
            PlanRule::NoRepeatWithout { action, reset_by, .. } => {
                let mut v = vec![action.as_str()];
                v.extend(reset_by.as_deref());
                v
            }
        }
    }
}

/// How calls are written in prompts and plans.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStyle {
    /// `grasp_object()`, with the object taken from `object_name`.
    #[default]
    Nullary,
    /// `Put(arg1, arg2)`.
    Parameterized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSet {
    pub name: String,
    #[serde(default)]
    pub call_style: CallStyle,
    pub actions: Vec<ActionSpec>,
    #[serde(default)]
    pub structural_rules: Vec<PlanRule>,
    /// Handle-to-container links (e.g. `<fridge_handle>` → `<fridge>`).
    #[serde(default)]
    pub links: BTreeMap<EntityName, EntityName>,
}

/// Parses and validates an action-set definition.
pub fn load_action_set(definition: &str) -> Result<ActionSet, ActionSetError> {
    let value: serde_json::Value =
        serde_json::from_str(definition).map_err(|e| ActionSetError::MalformedJson(e.to_string()))?;
    let set: ActionSet = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        violation(path, e.into_inner().to_string())
    })?;
    set.validate()?;
    Ok(set)
}

impl ActionSet {
    pub fn validate(&self) -> Result<(), ActionSetError> {
        let mut seen = BTreeSet::new();
        for (i, a) in self.actions.iter().enumerate() {
            let path = format!("actions[{i}]");
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(violation(format!("{path}.name"), format!("invalid action name `{}`", a.name)));
            }
            for n in std::iter::once(&a.name).chain(&a.aliases) {
                if !seen.insert(n.as_str()) {
                    return Err(violation(format!("{path}.name"), format!("duplicate action name `{n}`")));
                }
            }
            if a.arity > 2 {
                return Err(violation(format!("{path}.arity"), "arity must be 0, 1 or 2"));
            }
            for (j, c) in a.preconditions.iter().enumerate() {
                if let Some(bad) = c.references().into_iter().find(|&p| p >= a.arity) {
                    return Err(violation(
                        format!("{path}.preconditions[{j}]"),
                        format!("parameter index {bad} out of range for arity {}", a.arity),
                    ));
                }
            }
            for (j, e) in a.effects.iter().enumerate() {
                let epath = format!("{path}.effects[{j}]");
                if let Some(bad) = e.references().into_iter().find(|&p| p >= a.arity) {
                    return Err(violation(
                        epath,
                        format!("parameter index {bad} out of range for arity {}", a.arity),
                    ));
                }
                match e {
                    Effect::Add { subject: Subject::Agent, kind, target } => {
                        if *kind != StateKind::NearAgent || target.is_none() {
                            return Err(violation(epath, "agent effects must add near_agent with a target"));
                        }
                    }
                    Effect::Add { subject: Subject::Hand, .. }
                    | Effect::Remove { subject: Subject::Hand | Subject::Agent, .. }
                    | Effect::ClearPlacement { subject: Subject::Hand | Subject::Agent } => {
                        return Err(violation(epath, "hand and agent effects are limited to walking"));
                    }
                    Effect::Add { kind, target, .. } | Effect::Remove { kind, target, .. } => {
                        if kind.takes_target() && target.is_none() && matches!(e, Effect::Add { .. }) {
                            return Err(violation(epath, format!("adding {kind}() needs a target")));
                        }
                        if !kind.takes_target() && target.is_some() {
                            return Err(violation(epath, format!("{kind}() does not take a target")));
                        }
                    }
                    Effect::ClearPlacement { .. } => {}
                }
            }
        }
        for (i, rule) in self.structural_rules.iter().enumerate() {
            for name in rule.action_names() {
                if !self.actions.iter().any(|a| a.name == name) {
                    return Err(violation(
                        format!("structural_rules[{i}]"),
                        format!("rule references unknown action `{name}`"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn bundled(name: &str) -> Option<Arc<ActionSet>> {
        static LFO: OnceLock<Arc<ActionSet>> = OnceLock::new();
        static VH: OnceLock<Arc<ActionSet>> = OnceLock::new();
        match name {
            "lfo" => Some(
                LFO.get_or_init(|| Arc::new(load_action_set(LFO_JSON).expect("bundled lfo.json is valid")))
                    .clone(),
            ),
            "virtualhome" => Some(
                VH.get_or_init(|| {
                    Arc::new(load_action_set(VIRTUALHOME_JSON).expect("bundled virtualhome.json is valid"))
                })
                .clone(),
            ),
            _ => None,
        }
    }

    pub fn lfo() -> Arc<ActionSet> {
        Self::bundled("lfo").expect("bundled")
    }

    pub fn virtualhome() -> Arc<ActionSet> {
        Self::bundled("virtualhome").expect("bundled")
    }

    /// Returns a copy with additional container links.
    pub fn with_links(&self, links: impl IntoIterator<Item = (EntityName, EntityName)>) -> ActionSet {
        let mut set = self.clone();
        set.links.extend(links);
        set
    }

    /// Exact, case-sensitive lookup by name or alias.
    pub fn lookup(&self, name: &str) -> Result<&ActionSpec, UnknownAction> {
        self.actions
            .iter()
            .find(|a| a.name == name || a.aliases.iter().any(|x| x == name))
            .ok_or_else(|| UnknownAction {
                name: name.to_string(),
                suggestion: self.suggest(name),
            })
    }

    /// Closest action name by edit distance (case-folded first, then raw).
    pub fn suggest(&self, name: &str) -> Option<String> {
        let folded = name.to_lowercase();
        self.actions
            .iter()
            .map(|a| {
                let d_fold = strsim::levenshtein(&folded, &a.name.to_lowercase());
                let d_raw = strsim::levenshtein(name, &a.name);
                (d_fold, d_raw, &a.name)
            })
            .filter(|(d_fold, _, n)| *d_fold <= 3.max(n.len() / 3))
            .min()
            .map(|(_, _, n)| n.clone())
    }

    /// Renders a call in this set's style, using bare entity names.
    pub fn render_call(&self, name: &str, args: &[EntityName]) -> String {
        match self.call_style {
            CallStyle::Nullary => format!("{name}()"),
            CallStyle::Parameterized => {
                let args: Vec<_> = args.iter().map(|a| a.base()).collect();
                format!("{name}({})", args.join(", "))
            }
        }
    }

    /// Actions whose effects add `kind` to their first parameter.
    pub(crate) fn producers_of(&self, kind: StateKind) -> impl Iterator<Item = &ActionSpec> {
        self.actions.iter().filter(move |a| {
            a.effects.iter().any(|e| {
                matches!(e, Effect::Add { subject: Subject::Param(0) | Subject::Linked(0), kind: k, .. } if *k == kind)
            })
        })
    }
}

/// Renders the "ROBOT ACTION LIST" prompt section.
pub fn render_action_prompt(set: &ActionSet) -> String {
    let mut out = String::from("Necessary and sufficient robot actions are defined as follows:\n\"\"\"\n\"ROBOT ACTION LIST\"\n");
    for a in &set.actions {
        let signature = match set.call_style {
            CallStyle::Nullary => String::new(),
            CallStyle::Parameterized => (1..=a.arity).map(|i| format!("arg{i}")).collect::<Vec<_>>().join(", "),
        };
        out.push_str(&format!("- {}({}): {}\n", a.name, signature, a.description));
    }
    out.push_str("\"\"\"\n");
    out
}

/// One step of a plan: an action name and its resolved arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ActionInstance {
    pub name: String,
    pub args: Vec<EntityName>,
    /// The call was written without arguments (`grasp_object()`) and its
    /// arguments were filled in from the plan.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub implicit_args: bool,
}

impl ActionInstance {
    pub fn new(name: &str, args: &[&str]) -> Result<Self, EnvError> {
        Ok(ActionInstance {
            name: name.to_string(),
            args: args.iter().map(|a| EntityName::parse_loose(a)).collect::<Result<_, _>>()?,
            implicit_args: false,
        })
    }

    /// Plan-file spelling: `name()` for implicit calls, `name(<a>, <b>)` otherwise.
    pub fn to_plan_string(&self) -> String {
        if self.implicit_args {
            format!("{}()", self.name)
        } else {
            let args: Vec<_> = self.args.iter().map(|a| a.as_str()).collect();
            format!("{}({})", self.name, args.join(", "))
        }
    }
}

impl fmt::Display for ActionInstance {
    /// Message spelling with bare names: `PutIn(pie, stove)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<_> = self.args.iter().map(|a| a.base()).collect();
        write!(f, "{}({})", self.name, args.join(", "))
    }
}

/// A call as written: `Put(breadslice, plate)`, `Put(<a>, <b>)` or `move_hand()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCall {
    pub name: String,
    pub args: Vec<String>,
}

impl FromStr for RawCall {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (name, rest) = match s.find('(') {
            Some(i) => (&s[..i], &s[i..]),
            None => (s, ""),
        };
        let name = name.trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("`{s}` is not an action call"));
        }
        let args = if rest.is_empty() {
            Vec::new()
        } else {
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| format!("`{s}` has unbalanced parentheses"))?
                .trim();
            if inner.is_empty() {
                Vec::new()
            } else {
                inner.split(',').map(|a| a.trim().trim_matches('"').to_string()).collect()
            }
        };
        Ok(RawCall {
            name: name.to_string(),
            args,
        })
    }
}

/// Parses a fully explicit call against a set, canonicalizing aliases.
pub fn parse_call(text: &str, set: &ActionSet) -> Result<ActionInstance, String> {
    let raw: RawCall = text.parse()?;
    let spec = set.lookup(&raw.name).map_err(|e| e.to_string())?;
    if raw.args.len() != spec.arity {
        return Err(format!(
            "{} takes {} argument(s), got {} in `{text}`",
            spec.name,
            spec.arity,
            raw.args.len()
        ));
    }
    Ok(ActionInstance {
        name: spec.name.clone(),
        args: raw
            .args
            .iter()
            .map(|a| EntityName::parse_loose(a).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?,
        implicit_args: false,
    })
}
