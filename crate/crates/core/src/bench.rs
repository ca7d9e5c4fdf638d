//! Scenario suites: load-time oracle checks, suite runs against a backend,
//! and tabular reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{parse_call, ActionInstance, ActionSet};
use crate::env::{EnvError, Environment};
use crate::executor::{check_goal, execute_sequence, GoalCheck, GoalSpec, StepError, WorldState};
use crate::feedback::{Outcome, Planner};
use crate::llm::{BackendProvider, InferenceParams, ScriptLibrary};
use crate::prompt::{PromptSet, DEFAULT_BUDGET};

pub const VIRTUALHOME_SCENARIOS: &str = include_str!("../scenarios/virtualhome.json");

const REPLAY_SCRIPTS: [(&str, &str); 14] = [
    ("1", include_str!("../scenarios/replay/1.json")),
    ("2", include_str!("../scenarios/replay/2.json")),
    ("3", include_str!("../scenarios/replay/3.json")),
    ("4", include_str!("../scenarios/replay/4.json")),
    ("5", include_str!("../scenarios/replay/5.json")),
    ("6", include_str!("../scenarios/replay/6.json")),
    ("7", include_str!("../scenarios/replay/7.json")),
    ("8", include_str!("../scenarios/replay/8.json")),
    ("9", include_str!("../scenarios/replay/9.json")),
    ("10", include_str!("../scenarios/replay/10.json")),
    ("11", include_str!("../scenarios/replay/11.json")),
    ("12", include_str!("../scenarios/replay/12.json")),
    ("13", include_str!("../scenarios/replay/13.json")),
    ("14", include_str!("../scenarios/replay/14.json")),
];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("scenario {id}: duplicate id")]
    DuplicateId { id: String },
    #[error("scenario {id}: invalid environment: {error}")]
    InvalidEnvironment { id: String, error: EnvError },
    #[error("scenario {id}: invalid goal: {reason}")]
    InvalidGoal { id: String, reason: String },
    #[error("scenario {id}: reference step {step} `{call}`: {reason}")]
    InvalidReferenceCall {
        id: String,
        step: usize,
        call: String,
        reason: String,
    },
    #[error("scenario {id}: reference sequence fails: {error}")]
    ReferenceSequenceInvalid { id: String, error: StepError },
    #[error("scenario {id}: reference sequence does not reach the goal: {check}")]
    ReferenceGoalUnmet { id: String, check: GoalCheck },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub higher_level_instruction: Option<String>,
    pub environment: Environment,
    pub goal: GoalSpec,
    #[serde(with = "call_list")]
    pub reference_sequence: Vec<ActionInstance>,
}

mod call_list {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::actions::ActionInstance;

    pub fn serialize<S: Serializer>(seq: &[ActionInstance], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(seq.iter().map(|a| a.to_string()))
    }

    /// Calls are resolved against the action set after deserialization.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ActionInstance>, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|name| ActionInstance {
                name,
                args: Vec::new(),
                implicit_args: true,
            })
            .collect())
    }
}

/// Which instruction column a suite run sends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum InstructionVariant {
    #[default]
    Original,
    HigherLevel,
}

impl Scenario {
    pub fn instruction_for(&self, variant: InstructionVariant) -> &str {
        match variant {
            InstructionVariant::Original => &self.instruction,
            InstructionVariant::HigherLevel => self.higher_level_instruction.as_deref().unwrap_or(&self.instruction),
        }
    }

    /// Executes the reference sequence and checks the goal.
    pub fn validate(&self, set: &ActionSet) -> Result<GoalCheck, BenchError> {
        let start = WorldState::from_env(self.environment.clone()).map_err(|error| BenchError::InvalidEnvironment {
            id: self.id.clone(),
            error,
        })?;
        self.goal.validate_against(&self.environment).map_err(|reason| BenchError::InvalidGoal {
            id: self.id.clone(),
            reason,
        })?;
        let trace = execute_sequence(&start, &self.reference_sequence, set);
        if let Some(error) = trace.error {
            return Err(BenchError::ReferenceSequenceInvalid {
                id: self.id.clone(),
                error,
            });
        }
        let check = check_goal(trace.final_state(), &self.goal);
        if !check.met {
            return Err(BenchError::ReferenceGoalUnmet {
                id: self.id.clone(),
                check,
            });
        }
        Ok(check)
    }
}

/// Parses a scenario list, resolves reference calls against `set` and
/// checks every reference sequence.
pub fn load_scenarios(text: &str, set: &ActionSet) -> Result<Vec<Scenario>, BenchError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut scenarios: Vec<Scenario> = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            BenchError::MalformedJson(inner.to_string())
        } else {
            BenchError::SchemaViolation {
                path,
                reason: inner.to_string(),
            }
        }
    })?;
    let mut seen = HashSet::new();
    for s in &mut scenarios {
        if !seen.insert(s.id.clone()) {
            return Err(BenchError::DuplicateId { id: s.id.clone() });
        }
        s.environment.validate().map_err(|error| BenchError::InvalidEnvironment {
            id: s.id.clone(),
            error,
        })?;
        for (i, call) in s.reference_sequence.iter_mut().enumerate() {
            let text = std::mem::take(&mut call.name);
            *call = parse_call(&text, set).map_err(|reason| BenchError::InvalidReferenceCall {
                id: s.id.clone(),
                step: i + 1,
                call: text.clone(),
                reason,
            })?;
        }
        s.validate(set)?;
    }
    Ok(scenarios)
}

pub fn bundled_scenarios() -> Vec<Scenario> {
    load_scenarios(VIRTUALHOME_SCENARIOS, &ActionSet::virtualhome()).expect("bundled scenarios are valid")
}

/// Replay scripts for the bundled scenarios: each starts with the recorded
/// first response and continues with the responses given after feedback.
pub fn bundled_replay_scripts() -> ScriptLibrary {
    ScriptLibrary::from_texts(REPLAY_SCRIPTS)
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub set: Arc<ActionSet>,
    pub prompts: Arc<PromptSet>,
    pub params: InferenceParams,
    pub budget: usize,
    pub trials: usize,
    /// 0 measures first responses only.
    pub max_rounds: usize,
    pub variant: InstructionVariant,
    /// Concurrent cells for nondeterministic backends.
    pub parallelism: usize,
}

impl SuiteConfig {
    pub fn virtualhome(trials: usize, max_rounds: usize) -> Self {
        SuiteConfig {
            set: ActionSet::virtualhome(),
            prompts: Arc::new(PromptSet::bundled("virtualhome").expect("bundled prompts")),
            params: InferenceParams::default(),
            budget: DEFAULT_BUDGET,
            trials,
            max_rounds,
            variant: InstructionVariant::Original,
            parallelism: 4,
        }
    }
}

/// One scenario × trial result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Cell {
    pub success: bool,
    pub outcome: Option<Outcome>,
    pub rounds_used: usize,
    /// Whether the claimed environment_after matched execution; `None` when
    /// no plan executed.
    pub claim_accurate: Option<bool>,
    /// Transport or configuration failure; such cells are excluded from the
    /// rate.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ScenarioResult {
    pub id: String,
    pub trials: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SuiteReport {
    pub variant: InstructionVariant,
    pub trials: usize,
    pub max_rounds: usize,
    pub scenarios: Vec<ScenarioResult>,
}

impl SuiteReport {
    pub fn successes(&self) -> usize {
        self.cells().filter(|c| c.error.is_none() && c.success).count()
    }

    /// Cells that count towards the rate.
    pub fn scored(&self) -> usize {
        self.cells().filter(|c| c.error.is_none()).count()
    }

    pub fn errors(&self) -> usize {
        self.cells().filter(|c| c.error.is_some()).count()
    }

    pub fn rate(&self) -> f64 {
        match self.scored() {
            0 => 0.0,
            n => self.successes() as f64 / n as f64,
        }
    }

    fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.scenarios.iter().flat_map(|s| &s.trials)
    }

    /// Success flags indexed `[trial][scenario]`.
    pub fn success_matrix(&self) -> Vec<Vec<u8>> {
        (0..self.trials)
            .map(|t| self.scenarios.iter().map(|s| u8::from(s.trials[t].success)).collect())
            .collect()
    }

    /// Feedback rounds of the first trial, per scenario.
    pub fn rounds_vector(&self) -> Vec<usize> {
        self.scenarios.iter().map(|s| s.trials.first().map_or(0, |c| c.rounds_used)).collect()
    }

    pub fn rate_line(&self) -> String {
        format!(
            "Success rate: {}/{} ({:.1}%)",
            self.successes(),
            self.scored(),
            self.rate() * 100.0
        )
    }
}

fn run_cell(scenario: &Scenario, provider: &dyn BackendProvider, cfg: &SuiteConfig) -> Cell {
    let backend = match provider.backend_for(&scenario.id) {
        Ok(b) => b,
        Err(e) => return error_cell(e.to_string()),
    };
    let mut planner = Planner::new(cfg.set.clone(), cfg.prompts.clone(), backend);
    planner.params = cfg.params.clone();
    planner.budget = cfg.budget;
    let result = planner.run_loop(
        &[],
        &scenario.environment,
        scenario.instruction_for(cfg.variant),
        Some(&scenario.goal),
        cfg.max_rounds,
        &mut |_| {},
    );
    match result {
        Ok(r) => Cell {
            success: r.outcome == Outcome::Success,
            outcome: Some(r.outcome),
            rounds_used: r.rounds_used,
            claim_accurate: r.claim_diff().map(|d| d.is_empty()),
            error: None,
        },
        Err(e) => error_cell(e.to_string()),
    }
}

fn error_cell(message: String) -> Cell {
    Cell {
        success: false,
        outcome: None,
        rounds_used: 0,
        claim_accurate: None,
        error: Some(message),
    }
}

/// Runs every scenario `cfg.trials` times. Deterministic providers run
/// sequentially; others run up to `cfg.parallelism` cells at once.
pub fn run_suite(scenarios: &[Scenario], provider: &dyn BackendProvider, cfg: &SuiteConfig) -> SuiteReport {
    let jobs: Vec<(usize, usize)> = (0..scenarios.len()).flat_map(|s| (0..cfg.trials).map(move |t| (s, t))).collect();
    let results: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = if provider.is_deterministic() { 1 } else { cfg.parallelism.max(1) };
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(s, _)) = jobs.get(i) else { break };
                let cell = run_cell(&scenarios[s], provider, cfg);
                results.lock().expect("results lock")[i] = Some(cell);
            });
        }
    });
    let mut cells = results.into_inner().expect("results lock").into_iter();
    SuiteReport {
        variant: cfg.variant,
        trials: cfg.trials,
        max_rounds: cfg.max_rounds,
        scenarios: scenarios
            .iter()
            .map(|s| ScenarioResult {
                id: s.id.clone(),
                trials: (0..cfg.trials).map(|_| cells.next().flatten().expect("every cell ran")).collect(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}` (expected md or csv)")),
        }
    }
}

fn flag(c: &Cell) -> String {
    match &c.error {
        Some(_) => "E".into(),
        None => u8::from(c.success).to_string(),
    }
}

pub fn render_report(report: &SuiteReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
    }
}

fn render_markdown(r: &SuiteReport) -> String {
    let mut out = String::new();
    let title = match r.variant {
        InstructionVariant::Original => "Textual instruction",
        InstructionVariant::HigherLevel => "Higher-level textual instruction",
    };
    let _ = writeln!(out, "## {title}, up to {} feedback round(s)\n", r.max_rounds);
    let ids: Vec<&str> = r.scenarios.iter().map(|s| s.id.as_str()).collect();
    let _ = writeln!(out, "| Scenario | {} |", ids.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(ids.len()));
    for t in 0..r.trials {
        let row: Vec<String> = r.scenarios.iter().map(|s| flag(&s.trials[t])).collect();
        let _ = writeln!(out, "| Trial {} | {} |", t + 1, row.join(" | "));
    }
    if r.max_rounds > 0 && r.trials > 0 {
        let row: Vec<String> = r.rounds_vector().iter().map(|n| n.to_string()).collect();
        let _ = writeln!(out, "| Number of feedback | {} |", row.join(" | "));
    }
    let _ = writeln!(out, "\n{}", r.rate_line());
    if r.errors() > 0 {
        let _ = writeln!(
            out,
            "\nE: {} cell(s) failed with a transport or configuration error and are excluded from the rate.",
            r.errors()
        );
        for s in &r.scenarios {
            for (t, c) in s.trials.iter().enumerate() {
                if let Some(e) = &c.error {
                    let _ = writeln!(out, "- scenario {} trial {}: {e}", s.id, t + 1);
                }
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(r: &SuiteReport) -> String {
    let mut out = String::from("scenario,trial,success,rounds_used,outcome,claim_accurate,error\n");
    for s in &r.scenarios {
        for (t, c) in s.trials.iter().enumerate() {
            let outcome = c
                .outcome
                .map(|o| serde_json::to_value(o).expect("outcome serializes").as_str().unwrap_or_default().to_string())
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                csv_field(&s.id),
                t + 1,
                u8::from(c.success),
                c.rounds_used,
                outcome,
                c.claim_accurate.map(|b| b.to_string()).unwrap_or_default(),
                csv_field(c.error.as_deref().unwrap_or_default()),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_suite_loads_and_validates() {
        let s = bundled_scenarios();
        assert_eq!(s.len(), 14);
        assert_eq!(s[9].reference_sequence[4].to_string(), "PutIn(pie, stove)");
    }

    #[test]
    fn omitted_open_is_rejected_at_load() {
        let set = ActionSet::virtualhome();
        let mut v: serde_json::Value = serde_json::from_str(VIRTUALHOME_SCENARIOS).unwrap();
        let seq = v[2]["reference_sequence"].as_array_mut().unwrap();
        seq.retain(|c| c != "Open(microwave)");
        let err = load_scenarios(&v.to_string(), &set).unwrap_err();
        match err {
            BenchError::ReferenceSequenceInvalid { id, error } => {
                assert_eq!(id, "3");
                assert_eq!(error.step, 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_valid() {
        assert!(load_scenarios("[]", &ActionSet::virtualhome()).unwrap().is_empty());
        assert!(matches!(
            load_scenarios("[{\"id\": 1}]", &ActionSet::virtualhome()),
            Err(BenchError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn zero_trials_report() {
        let cfg = SuiteConfig::virtualhome(0, 0);
        let r = run_suite(&bundled_scenarios(), &bundled_replay_scripts(), &cfg);
        assert_eq!(r.rate_line(), "Success rate: 0/0 (0.0%)");
        assert!(render_report(&r, ReportFormat::Markdown).contains("| Scenario | 1 |"));
    }

    #[test]
    fn csv_quotes_fields() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn first_response_replay_matches_recorded_outcomes() {
        let r = run_suite(&bundled_scenarios(), &bundled_replay_scripts(), &SuiteConfig::virtualhome(5, 0));
        let expected = vec![0, 0, 0, 0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0];
        assert!(r.success_matrix().iter().all(|row| *row == expected), "{:?}", r.success_matrix());
        assert_eq!(r.rate_line(), "Success rate: 25/70 (35.7%)");
    }

    #[test]
    fn feedback_replay_matches_recorded_rounds() {
        let r = run_suite(&bundled_scenarios(), &bundled_replay_scripts(), &SuiteConfig::virtualhome(1, 5));
        assert_eq!(r.rounds_vector(), vec![1, 1, 3, 1, 0, 0, 1, 0, 1, 2, 1, 0, 0, 1]);
        assert_eq!(r.successes(), 14);
        assert!(r.scenarios.iter().all(|s| s.trials[0].claim_accurate == Some(true)));
    }
}
