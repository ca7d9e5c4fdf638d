//! Scene environments: assets, objects and their state predicates.
//!
//! The JSON form follows the dictionary layout used in the prompts:
//!
//! ```json
//! {"assets": ["<table>"], "asset_states": {},
//!  "objects": ["<juice>"], "object_states": {"<juice>": "on_something(<table>)"}}
//! ```
//!
//! States are a list per entity. A single string is accepted on input and is
//! emitted on output when the entity has exactly one predicate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
}

impl EnvError {
    pub(crate) fn violation(path: impl Into<String>, reason: impl Into<String>) -> Self {
        EnvError::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

fn name_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^<([a-z0-9_]+)(?:#([0-9]+))?>$").expect("static regex"))
}

/// An angle-bracketed entity identifier such as `<shelf_top>` or `<plate#12>`.
///
/// The optional `#id` suffix carries simulator object IDs. Derived equality is
/// exact; use [`EntityName::matches`] for suffix-tolerant comparison.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityName(String);

impl EntityName {
    pub fn new(text: &str) -> Result<Self, EnvError> {
        if name_pattern().is_match(text) {
            Ok(EntityName(text.to_string()))
        } else {
            Err(EnvError::violation(
                text,
                "entity names must match <[a-z0-9_]+> with an optional #id suffix",
            ))
        }
    }

    /// Accepts both `<plate>` and the bare `plate` spelling.
    pub fn parse_loose(text: &str) -> Result<Self, EnvError> {
        let text = text.trim();
        if text.starts_with('<') {
            Self::new(text)
        } else {
            Self::new(&format!("<{text}>"))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Name without brackets or ID suffix.
    pub fn base(&self) -> &str {
        let inner = &self.0[1..self.0.len() - 1];
        inner.split('#').next().unwrap_or(inner)
    }

    pub fn id(&self) -> Option<u64> {
        let inner = &self.0[1..self.0.len() - 1];
        inner.split_once('#').and_then(|(_, id)| id.parse().ok())
    }

    /// Equality that ignores the ID suffix unless both sides carry one.
    pub fn matches(&self, other: &EntityName) -> bool {
        if self.base() != other.base() {
            return false;
        }
        match (self.id(), other.id()) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }
}

impl fmt::Display for EntityName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for EntityName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EntityName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        EntityName::new(&text).map_err(serde::de::Error::custom)
    }
}

/// The closed STATE LIST vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    OnSomething,
    InsideSomething,
    InsideHand,
    Closed,
    Open,
    SwitchedOn,
    SwitchedOff,
    NearAgent,
}

impl StateKind {
    pub const ALL: [StateKind; 8] = [
        StateKind::OnSomething,
        StateKind::InsideSomething,
        StateKind::InsideHand,
        StateKind::Closed,
        StateKind::Open,
        StateKind::SwitchedOn,
        StateKind::SwitchedOff,
        StateKind::NearAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::OnSomething => "on_something",
            StateKind::InsideSomething => "inside_something",
            StateKind::InsideHand => "inside_hand",
            StateKind::Closed => "closed",
            StateKind::Open => "open",
            StateKind::SwitchedOn => "switched_on",
            StateKind::SwitchedOff => "switched_off",
            StateKind::NearAgent => "near_agent",
        }
    }

    pub fn takes_target(self) -> bool {
        self.is_placement()
    }

    pub fn is_placement(self) -> bool {
        matches!(self, StateKind::OnSomething | StateKind::InsideSomething)
    }

    /// The mutually exclusive partner kind, if any.
    pub fn exclusive_partner(self) -> Option<StateKind> {
        match self {
            StateKind::Closed => Some(StateKind::Open),
            StateKind::Open => Some(StateKind::Closed),
            StateKind::SwitchedOn => Some(StateKind::SwitchedOff),
            StateKind::SwitchedOff => Some(StateKind::SwitchedOn),
            _ => None,
        }
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown state kind `{s}`"))
    }
}

/// One state such as `on_something(<table>)` or `closed()`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatePredicate {
    pub kind: StateKind,
    pub target: Option<EntityName>,
}

impl StatePredicate {
    pub fn new(kind: StateKind, target: Option<EntityName>) -> Result<Self, String> {
        match (kind.takes_target(), &target) {
            (true, None) => Err(format!("{kind}() requires a target entity")),
            (false, Some(t)) => Err(format!("{kind}() does not take a target, got {t}")),
            _ => Ok(StatePredicate { kind, target }),
        }
    }

    pub fn simple(kind: StateKind) -> Self {
        debug_assert!(!kind.takes_target());
        StatePredicate { kind, target: None }
    }

    pub fn placed(kind: StateKind, target: EntityName) -> Self {
        debug_assert!(kind.takes_target());
        StatePredicate {
            kind,
            target: Some(target),
        }
    }
}

impl fmt::Display for StatePredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.target {
            Some(t) => write!(f, "{}({})", self.kind, t),
            None => write!(f, "{}()", self.kind),
        }
    }
}

impl FromStr for StatePredicate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let open = s
            .find('(')
            .ok_or_else(|| format!("`{s}` is not of the form kind(<target>)"))?;
        if !s.ends_with(')') {
            return Err(format!("`{s}` is not of the form kind(<target>)"));
        }
        let kind: StateKind = s[..open].trim().parse()?;
        let inner = s[open + 1..s.len() - 1].trim();
        let target = if inner.is_empty() {
            None
        } else {
            Some(EntityName::new(inner).map_err(|e| e.to_string())?)
        };
        StatePredicate::new(kind, target)
    }
}

impl Serialize for StatePredicate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StatePredicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Asset,
    Object,
}

/// A validated scene description.
///
/// Entity order is preserved for rendering; equality treats the entity lists
/// as sets. Predicate lists are kept sorted so that equal scenes render to
/// identical text.
#[derive(Debug, Clone, Default)]
pub struct Environment {
    assets: Vec<EntityName>,
    asset_states: BTreeMap<EntityName, Vec<StatePredicate>>,
    objects: Vec<EntityName>,
    object_states: BTreeMap<EntityName, Vec<StatePredicate>>,
}

impl PartialEq for Environment {
    fn eq(&self, other: &Self) -> bool {
        let set = |v: &[EntityName]| v.iter().cloned().collect::<BTreeSet<_>>();
        set(&self.assets) == set(&other.assets)
            && set(&self.objects) == set(&other.objects)
            && self.asset_states == other.asset_states
            && self.object_states == other.object_states
    }
}

impl Eq for Environment {}

impl Environment {
    /// Builds and validates an environment. Predicate lists are normalized to
    /// sorted order; empty lists are dropped.
    pub fn new(
        assets: Vec<EntityName>,
        asset_states: BTreeMap<EntityName, Vec<StatePredicate>>,
        objects: Vec<EntityName>,
        object_states: BTreeMap<EntityName, Vec<StatePredicate>>,
    ) -> Result<Self, EnvError> {
        let normalize = |m: BTreeMap<EntityName, Vec<StatePredicate>>| {
            m.into_iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(k, mut v)| {
                    v.sort();
                    (k, v)
                })
                .collect::<BTreeMap<_, _>>()
        };
        let env = Environment {
            assets,
            asset_states: normalize(asset_states),
            objects,
            object_states: normalize(object_states),
        };
        env.validate()?;
        Ok(env)
    }

    pub fn empty() -> Self {
        Environment::default()
    }

    pub fn assets(&self) -> &[EntityName] {
        &self.assets
    }

    pub fn objects(&self) -> &[EntityName] {
        &self.objects
    }

    pub fn asset_states(&self) -> &BTreeMap<EntityName, Vec<StatePredicate>> {
        &self.asset_states
    }

    pub fn object_states(&self) -> &BTreeMap<EntityName, Vec<StatePredicate>> {
        &self.object_states
    }

    /// All entity names, assets first.
    pub fn entities(&self) -> impl Iterator<Item = &EntityName> {
        self.assets.iter().chain(self.objects.iter())
    }

    pub fn class_of(&self, name: &EntityName) -> Option<EntityClass> {
        if self.assets.contains(name) {
            Some(EntityClass::Asset)
        } else if self.objects.contains(name) {
            Some(EntityClass::Object)
        } else {
            None
        }
    }

    pub fn contains(&self, name: &EntityName) -> bool {
        self.class_of(name).is_some()
    }

    /// Finds the entity that suffix-tolerantly matches `name`. Fails when zero
    /// or several entities match.
    pub fn resolve(&self, name: &EntityName) -> Option<&EntityName> {
        if let Some(exact) = self.entities().find(|e| *e == name) {
            return Some(exact);
        }
        let mut hits = self.entities().filter(|e| e.matches(name));
        let first = hits.next()?;
        if hits.next().is_some() {
            None
        } else {
            Some(first)
        }
    }

    pub fn states_of(&self, name: &EntityName) -> &[StatePredicate] {
        self.asset_states
            .get(name)
            .or_else(|| self.object_states.get(name))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn has(&self, name: &EntityName, pred: &StatePredicate) -> bool {
        self.states_of(name).contains(pred)
    }

    pub fn has_kind(&self, name: &EntityName, kind: StateKind) -> bool {
        self.states_of(name).iter().any(|p| p.kind == kind)
    }

    /// The single placement predicate (`on_something` / `inside_something`), if any.
    pub fn placement_of(&self, name: &EntityName) -> Option<&StatePredicate> {
        self.states_of(name).iter().find(|p| p.kind.is_placement())
    }

    /// Entities carrying a predicate of the given kind, in entity order.
    pub fn entities_with(&self, kind: StateKind) -> Vec<&EntityName> {
        self.entities().filter(|e| self.has_kind(e, kind)).collect()
    }

    fn states_mut(&mut self, name: &EntityName) -> Option<&mut BTreeMap<EntityName, Vec<StatePredicate>>> {
        match self.class_of(name)? {
            EntityClass::Asset => Some(&mut self.asset_states),
            EntityClass::Object => Some(&mut self.object_states),
        }
    }

    /// Adds a predicate without validating; callers validate the result.
    pub(crate) fn insert_raw(&mut self, name: &EntityName, pred: StatePredicate) {
        if let Some(map) = self.states_mut(name) {
            let list = map.entry(name.clone()).or_default();
            if !list.contains(&pred) {
                list.push(pred);
                list.sort();
            }
        }
    }

    pub(crate) fn remove_raw(&mut self, name: &EntityName, pred: &StatePredicate) -> bool {
        let Some(map) = self.states_mut(name) else {
            return false;
        };
        let Some(list) = map.get_mut(name) else {
            return false;
        };
        let before = list.len();
        list.retain(|p| p != pred);
        let removed = list.len() != before;
        if list.is_empty() {
            map.remove(name);
        }
        removed
    }

    /// Checks every structural invariant of the schema.
    pub fn validate(&self) -> Result<(), EnvError> {
        let mut seen = BTreeSet::new();
        for (section, list) in [("assets", &self.assets), ("objects", &self.objects)] {
            for name in list {
                if !seen.insert(name) {
                    return Err(EnvError::violation(
                        format!("{section}.{name}"),
                        "duplicate entity name (assets and objects must be disjoint)",
                    ));
                }
            }
        }
        for (section, map, class_list) in [
            ("asset_states", &self.asset_states, &self.assets),
            ("object_states", &self.object_states, &self.objects),
        ] {
            for (name, preds) in map {
                let path = format!("{section}.{name}");
                if !class_list.contains(name) {
                    let listed = if section == "asset_states" { "assets" } else { "objects" };
                    return Err(EnvError::violation(path, format!("entity is not listed in {listed}")));
                }
                check_predicates(self, name, preds, &path)?;
            }
        }
        for obj in &self.objects {
            if self.object_states.get(obj).is_none_or(|v| v.is_empty()) {
                return Err(EnvError::violation(
                    format!("object_states.{obj}"),
                    "every object needs at least one state",
                ));
            }
        }
        Ok(())
    }
}

fn check_predicates(
    env: &Environment,
    name: &EntityName,
    preds: &[StatePredicate],
    path: &str,
) -> Result<(), EnvError> {
    let mut kinds = BTreeSet::new();
    let mut placements = 0;
    for p in preds {
        if let Some(target) = &p.target {
            if !env.contains(target) {
                return Err(EnvError::violation(
                    path,
                    format!("dangling target {target} in {p}: not an asset or object"),
                ));
            }
            if target == name {
                return Err(EnvError::violation(path, format!("{p} refers to the entity itself")));
            }
        }
        if !kinds.insert(p.kind) {
            return Err(EnvError::violation(path, format!("{} appears more than once", p.kind)));
        }
        if p.kind.is_placement() {
            placements += 1;
        }
    }
    if placements > 1 {
        return Err(EnvError::violation(
            path,
            "at most one of on_something/inside_something is allowed",
        ));
    }
    for kind in [StateKind::Closed, StateKind::SwitchedOn] {
        let partner = kind.exclusive_partner().expect("paired kind");
        if kinds.contains(&kind) && kinds.contains(&partner) {
            return Err(EnvError::violation(
                path,
                format!("{kind}() and {partner}() are mutually exclusive"),
            ));
        }
    }
    Ok(())
}

/// Parses either `{"environment": {...}}` or the bare environment object.
pub fn parse_environment(text: &str) -> Result<Environment, EnvError> {
    let value: Value = serde_json::from_str(text).map_err(|e| EnvError::MalformedJson(e.to_string()))?;
    environment_from_value(&value)
}

pub fn environment_from_value(value: &Value) -> Result<Environment, EnvError> {
    let obj = value
        .as_object()
        .ok_or_else(|| EnvError::violation("$", "expected a JSON object"))?;
    let obj = match obj.get("environment") {
        Some(inner) => inner
            .as_object()
            .ok_or_else(|| EnvError::violation("environment", "expected a JSON object"))?,
        None => obj,
    };
    for key in obj.keys() {
        if !matches!(key.as_str(), "assets" | "asset_states" | "objects" | "object_states") {
            return Err(EnvError::violation(key, "unknown environment key"));
        }
    }
    let assets = name_list(obj, "assets")?;
    let objects = name_list(obj, "objects")?;
    let asset_states = state_map(obj, "asset_states")?;
    let object_states = state_map(obj, "object_states")?;
    Environment::new(assets, asset_states, objects, object_states)
}

fn name_list(obj: &Map<String, Value>, key: &str) -> Result<Vec<EntityName>, EnvError> {
    let Some(value) = obj.get(key) else {
        return Err(EnvError::violation(key, "missing key"));
    };
    let items = value
        .as_array()
        .ok_or_else(|| EnvError::violation(key, "expected a list of entity names"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = v
                .as_str()
                .ok_or_else(|| EnvError::violation(format!("{key}[{i}]"), "expected a string"))?;
            EntityName::new(s).map_err(|e| match e {
                EnvError::SchemaViolation { reason, .. } => {
                    EnvError::violation(format!("{key}[{i}]"), reason)
                }
                other => other,
            })
        })
        .collect()
}

fn state_map(
    obj: &Map<String, Value>,
    key: &str,
) -> Result<BTreeMap<EntityName, Vec<StatePredicate>>, EnvError> {
    let Some(value) = obj.get(key) else {
        return Err(EnvError::violation(key, "missing key"));
    };
    let map = value
        .as_object()
        .ok_or_else(|| EnvError::violation(key, "expected a dictionary of entity states"))?;
    let mut out = BTreeMap::new();
    for (name, states) in map {
        let path = format!("{key}.{name}");
        let entity = EntityName::new(name).map_err(|_| {
            EnvError::violation(&path, "entity names must match <[a-z0-9_]+>")
        })?;
        let raw: Vec<&str> = match states {
            Value::String(s) => vec![s.as_str()],
            Value::Array(items) => items
                .iter()
                .map(|v| v.as_str().ok_or_else(|| EnvError::violation(&path, "expected state strings")))
                .collect::<Result<_, _>>()?,
            _ => return Err(EnvError::violation(&path, "expected a state string or list")),
        };
        let mut preds = Vec::with_capacity(raw.len());
        for s in raw {
            let pred: StatePredicate = s.parse().map_err(|reason: String| EnvError::violation(&path, reason))?;
            preds.push(pred);
        }
        out.insert(entity, preds);
    }
    Ok(out)
}

/// Renders the environment in prompt style: `{"assets": [...], "asset_states": {...}, ...}`.
pub fn serialize_environment(env: &Environment) -> String {
    let mut out = String::from("{\"assets\": ");
    write_names(&mut out, &env.assets);
    out.push_str(", \"asset_states\": ");
    write_states(&mut out, &env.assets, &env.asset_states);
    out.push_str(", \"objects\": ");
    write_names(&mut out, &env.objects);
    out.push_str(", \"object_states\": ");
    write_states(&mut out, &env.objects, &env.object_states);
    out.push('}');
    out
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

fn write_names(out: &mut String, names: &[EntityName]) {
    out.push('[');
    for (i, n) in names.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&json_str(n.as_str()));
    }
    out.push(']');
}

fn write_states(out: &mut String, order: &[EntityName], map: &BTreeMap<EntityName, Vec<StatePredicate>>) {
    out.push('{');
    let mut first = true;
    for name in order {
        let Some(preds) = map.get(name) else { continue };
        if !first {
            out.push_str(", ");
        }
        first = false;
        out.push_str(&json_str(name.as_str()));
        out.push_str(": ");
        if preds.len() == 1 {
            out.push_str(&json_str(&preds[0].to_string()));
        } else {
            out.push('[');
            for (i, p) in preds.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&json_str(&p.to_string()));
            }
            out.push(']');
        }
    }
    out.push('}');
}

impl Serialize for Environment {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let value: Value = serde_json::from_str(&serialize_environment(self)).map_err(serde::ser::Error::custom)?;
        value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Environment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        environment_from_value(&value).map_err(serde::de::Error::custom)
    }
}

fn string_schema(description: &str, pattern: Option<&str>) -> schemars::schema::Schema {
    let mut v = serde_json::json!({"type": "string", "description": description});
    if let Some(p) = pattern {
        v["pattern"] = Value::String(p.to_string());
    }
    serde_json::from_value(v).expect("static schema")
}

impl schemars::JsonSchema for EntityName {
    fn schema_name() -> String {
        "EntityName".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        string_schema("Angle-bracketed entity name", Some("^<[a-z0-9_]+(#[0-9]+)?>$"))
    }
}

impl schemars::JsonSchema for StatePredicate {
    fn schema_name() -> String {
        "StatePredicate".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        string_schema("STATE LIST predicate such as on_something(<table>)", None)
    }
}

impl schemars::JsonSchema for Environment {
    fn schema_name() -> String {
        "Environment".to_string()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        let value = serde_json::json!({
            "type": "object",
            "description": "Scene description with assets, objects and STATE LIST predicates",
            "required": ["assets", "asset_states", "objects", "object_states"],
            "properties": {
                "assets": {"type": "array", "items": {"type": "string", "pattern": "^<[a-z0-9_]+(#[0-9]+)?>$"}},
                "asset_states": {"type": "object", "additionalProperties": {"oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]}},
                "objects": {"type": "array", "items": {"type": "string", "pattern": "^<[a-z0-9_]+(#[0-9]+)?>$"}},
                "object_states": {"type": "object", "additionalProperties": {"oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]}}
            }
        });
        serde_json::from_value(value).expect("static schema")
    }
}

/// Predicate-level change for one entity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PredicateChange {
    pub removed: Vec<StatePredicate>,
    pub added: Vec<StatePredicate>,
}

/// Difference between two environments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct EnvDiff {
    pub entities_removed: Vec<(EntityClass, EntityName)>,
    pub entities_added: Vec<(EntityClass, EntityName)>,
    pub changes: BTreeMap<EntityName, PredicateChange>,
}

impl schemars::JsonSchema for EntityClass {
    fn schema_name() -> String {
        "EntityClass".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        serde_json::from_value(serde_json::json!({"type": "string", "enum": ["asset", "object"]}))
            .expect("static schema")
    }
}

impl EnvDiff {
    pub fn is_empty(&self) -> bool {
        self.entities_removed.is_empty() && self.entities_added.is_empty() && self.changes.is_empty()
    }

    /// Number of entities touched by the diff.
    pub fn entity_count(&self) -> usize {
        let mut names: BTreeSet<&EntityName> = self.changes.keys().collect();
        names.extend(self.entities_added.iter().map(|(_, n)| n));
        names.extend(self.entities_removed.iter().map(|(_, n)| n));
        names.len()
    }

    /// Applies the diff and validates the result.
    pub fn apply(&self, env: &Environment) -> Result<Environment, EnvError> {
        let mut next = env.clone();
        for (class, name) in &self.entities_removed {
            match class {
                EntityClass::Asset => {
                    next.assets.retain(|n| n != name);
                    next.asset_states.remove(name);
                }
                EntityClass::Object => {
                    next.objects.retain(|n| n != name);
                    next.object_states.remove(name);
                }
            }
        }
        for (class, name) in &self.entities_added {
            match class {
                EntityClass::Asset => next.assets.push(name.clone()),
                EntityClass::Object => next.objects.push(name.clone()),
            }
        }
        for (name, change) in &self.changes {
            if !next.contains(name) {
                return Err(EnvError::violation(name.as_str(), "diff refers to an unknown entity"));
            }
            for p in &change.removed {
                next.remove_raw(name, p);
            }
            for p in &change.added {
                next.insert_raw(name, p.clone());
            }
        }
        next.validate()?;
        Ok(next)
    }
}

impl fmt::Display for EnvDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (class, name) in &self.entities_removed {
            parts.push(format!("-{class:?} {name}").to_lowercase());
        }
        for (class, name) in &self.entities_added {
            parts.push(format!("+{class:?} {name}").to_lowercase());
        }
        for (name, change) in &self.changes {
            let mut items = Vec::new();
            items.extend(change.removed.iter().map(|p| format!("-{p}")));
            items.extend(change.added.iter().map(|p| format!("+{p}")));
            parts.push(format!("{name}: {}", items.join(" ")));
        }
        if parts.is_empty() {
            f.write_str("(no changes)")
        } else {
            f.write_str(&parts.join("; "))
        }
    }
}

/// Computes `after - before` with deterministic ordering.
pub fn diff_environments(before: &Environment, after: &Environment) -> EnvDiff {
    let mut diff = EnvDiff::default();
    for (class, b_list, a_list) in [
        (EntityClass::Asset, &before.assets, &after.assets),
        (EntityClass::Object, &before.objects, &after.objects),
    ] {
        for name in b_list {
            if !a_list.contains(name) {
                diff.entities_removed.push((class, name.clone()));
            }
        }
        for name in a_list {
            if !b_list.contains(name) {
                diff.entities_added.push((class, name.clone()));
            }
        }
    }
    // entities that disappear take their states with them, so only names
    // present afterwards can carry predicate changes
    let names: BTreeSet<&EntityName> = after.entities().collect();
    for name in names {
        let old: &[StatePredicate] = if before.class_of(name) == after.class_of(name) {
            before.states_of(name)
        } else {
            &[]
        };
        let new = after.states_of(name);
        let removed: Vec<_> = old.iter().filter(|p| !new.contains(p)).cloned().collect();
        let added: Vec<_> = new.iter().filter(|p| !old.contains(p)).cloned().collect();
        if !removed.is_empty() || !added.is_empty() {
            diff.changes.insert(name.clone(), PredicateChange { removed, added });
        }
    }
    diff
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SHELF_ENV: &str = r#"{
        "environment":{
            "assets": ["<table>", "<shelf_bottom>", "<shelf_top>", "<trash_bin>", "<floor>"],
            "asset_states": {"<shelf_bottom>": "on_something(<table>)",
                             "<trash_bin>": "on_something(<floor>)"},
            "objects": ["<spam>", "<juice>"],
            "object_states": {"<spam>": "on_something(<table>)",
                              "<juice>": "on_something(<shelf_bottom>)"}
        }
    }"#;

    fn n(s: &str) -> EntityName {
        EntityName::new(s).unwrap()
    }

    fn on(t: &str) -> StatePredicate {
        StatePredicate::placed(StateKind::OnSomething, n(t))
    }

    #[test]
    fn parses_shelf_environment() {
        let env = parse_environment(SHELF_ENV).unwrap();
        let names: Vec<_> = env.assets().iter().map(|e| e.as_str()).collect();
        assert_eq!(names, ["<table>", "<shelf_bottom>", "<shelf_top>", "<trash_bin>", "<floor>"]);
        let objs: Vec<_> = env.objects().iter().map(|e| e.as_str()).collect();
        assert_eq!(objs, ["<spam>", "<juice>"]);
        assert_eq!(env.states_of(&n("<spam>")), &[on("<table>")]);
        assert_eq!(env.states_of(&n("<juice>")), &[on("<shelf_bottom>")]);
        assert_eq!(env.states_of(&n("<shelf_bottom>")), &[on("<table>")]);
        assert_eq!(env.states_of(&n("<trash_bin>")), &[on("<floor>")]);
        assert!(env.states_of(&n("<shelf_top>")).is_empty());
    }

    #[test]
    fn parses_empty_environment() {
        let env =
            parse_environment(r#"{"environment":{"assets":[],"asset_states":{},"objects":[],"object_states":{}}}"#)
                .unwrap();
        assert_eq!(env, Environment::empty());
        assert_eq!(
            serialize_environment(&env),
            r#"{"assets": [], "asset_states": {}, "objects": [], "object_states": {}}"#
        );
    }

    #[test]
    fn rejects_dangling_target() {
        let text = SHELF_ENV.replace("on_something(<shelf_bottom>)\"}", "on_something(<ghost>)\"}");
        let err = parse_environment(&text).unwrap_err();
        match err {
            EnvError::SchemaViolation { path, reason } => {
                assert_eq!(path, "object_states.<juice>");
                assert!(reason.contains("dangling"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_invariant_breaches() {
        let cases = [
            // overlap
            r#"{"assets":["<a>"],"asset_states":{},"objects":["<a>"],"object_states":{"<a>":"closed()"}}"#,
            // unknown kind
            r#"{"assets":["<a>"],"asset_states":{"<a>":"levitating()"},"objects":[],"object_states":{}}"#,
            // object without states
            r#"{"assets":[],"asset_states":{},"objects":["<a>"],"object_states":{}}"#,
            // two placements
            r#"{"assets":["<t>","<u>"],"asset_states":{},"objects":["<a>"],"object_states":{"<a>":["on_something(<t>)","inside_something(<u>)"]}}"#,
            // exclusive pair
            r#"{"assets":["<f>"],"asset_states":{"<f>":["open()","closed()"]},"objects":[],"object_states":{}}"#,
            // state key in wrong section
            r#"{"assets":["<f>"],"asset_states":{},"objects":[],"object_states":{"<f>":"closed()"}}"#,
            // bad name
            r#"{"assets":["Table"],"asset_states":{},"objects":[],"object_states":{}}"#,
            // target on a non-placement kind
            r#"{"assets":["<f>"],"asset_states":{"<f>":"closed(<f>)"},"objects":[],"object_states":{}}"#,
            // missing target
            r#"{"assets":["<f>"],"asset_states":{"<f>":"on_something()"},"objects":[],"object_states":{}}"#,
        ];
        for c in cases {
            assert!(
                matches!(parse_environment(c), Err(EnvError::SchemaViolation { .. })),
                "accepted {c}"
            );
        }
        assert!(matches!(parse_environment("{"), Err(EnvError::MalformedJson(_))));
    }

    #[test]
    fn renders_single_and_multiple_states() {
        let text = r#"{"assets":["<table>"],"asset_states":{},"objects":["<juice>","<cup>"],
            "object_states":{"<juice>":"inside_hand()","<cup>":["on_something(<table>)","inside_hand()"]}}"#;
        // two objects in hand is a world invariant, not a schema one
        let env = parse_environment(text).unwrap();
        let out = serialize_environment(&env);
        assert!(out.contains(r#""<juice>": "inside_hand()""#), "{out}");
        assert!(out.contains(r#""<cup>": ["on_something(<table>)", "inside_hand()"]"#), "{out}");
        assert_eq!(parse_environment(&out).unwrap(), env);
    }

    #[test]
    fn shelf_environment_round_trips() {
        let env = parse_environment(SHELF_ENV).unwrap();
        let text = serialize_environment(&env);
        let back = parse_environment(&text).unwrap();
        assert_eq!(back, env);
        assert_eq!(serialize_environment(&back), text);
    }

    #[test]
    fn diff_of_relocation() {
        let before = parse_environment(SHELF_ENV).unwrap();
        let after = parse_environment(&SHELF_ENV.replace(
            r#""<juice>": "on_something(<shelf_bottom>)""#,
            r#""<juice>": "on_something(<shelf_top>)""#,
        ))
        .unwrap();
        assert!(diff_environments(&before, &before).is_empty());
        let diff = diff_environments(&before, &after);
        assert_eq!(diff.changes.len(), 1);
        let change = &diff.changes[&n("<juice>")];
        assert_eq!(change.removed, vec![on("<shelf_bottom>")]);
        assert_eq!(change.added, vec![on("<shelf_top>")]);
        assert_eq!(diff.apply(&before).unwrap(), after);
    }

    #[test]
    fn diff_of_fridge_session() {
        let before = parse_environment(
            r#"{"assets":["<fridge>","<floor>"],"asset_states":{"<fridge>":"closed()"},
                "objects":["<juice>"],"object_states":{"<juice>":"inside_something(<fridge>)"}}"#,
        )
        .unwrap();
        let after = parse_environment(
            r#"{"assets":["<fridge>","<floor>"],"asset_states":{"<fridge>":"open()"},
                "objects":["<juice>"],"object_states":{"<juice>":"on_something(<floor>)"}}"#,
        )
        .unwrap();
        let diff = diff_environments(&before, &after);
        assert_eq!(diff.entity_count(), 2);
        assert_eq!(diff.changes[&n("<fridge>")].removed, vec![StatePredicate::simple(StateKind::Closed)]);
        assert_eq!(diff.changes[&n("<fridge>")].added, vec![StatePredicate::simple(StateKind::Open)]);
        assert_eq!(diff.apply(&before).unwrap(), after);
    }

    #[test]
    fn diff_handles_entity_churn() {
        let a = parse_environment(
            r#"{"assets":["<t>","<gone>"],"asset_states":{"<gone>":"on_something(<t>)"},"objects":["<x>"],"object_states":{"<x>":"on_something(<gone>)"}}"#,
        )
        .unwrap();
        let b = parse_environment(
            r#"{"assets":["<t>"],"asset_states":{},"objects":["<x>","<new>"],"object_states":{"<x>":"on_something(<t>)","<new>":"closed()"}}"#,
        )
        .unwrap();
        let diff = diff_environments(&a, &b);
        assert_eq!(diff.apply(&a).unwrap(), b);
        let back = diff_environments(&b, &a);
        assert_eq!(back.apply(&b).unwrap(), a);
    }

    #[test]
    fn id_suffix_matching() {
        let plain = n("<plate>");
        let a = n("<plate#12>");
        let b = n("<plate#13>");
        assert!(plain.matches(&a) && a.matches(&plain));
        assert!(!a.matches(&b));
        assert_eq!(a.base(), "plate");
        assert_eq!(a.id(), Some(12));
        assert_eq!(EntityName::parse_loose("plate").unwrap(), plain);
    }
}
