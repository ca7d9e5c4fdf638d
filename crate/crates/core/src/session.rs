//! Multi-step planning sessions and their on-disk store.
//!
//! A session chains instructions: each approved plan's resulting environment
//! becomes the input of the next query. Layout on disk:
//!
//! ```text
//! <root>/<id>/session.json
//! <root>/<id>/step_001.json
//! <root>/<id>/.lock
//! ```
//!
//! Step files hold the approved plan as a five-key plan document.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{load_action_set, ActionSet, ActionSetError};
use crate::env::{diff_environments, EnvDiff, EnvError, Environment};
use crate::executor::{execute_plan, verify_claimed_environment, ExecutionTrace, GoalSpec, StepError, WorldState};
use crate::feedback::{
    FeedbackMessage, Issue, LoopError, LoopProgress, LoopResult, Outcome, Planner, Transcript, DEFAULT_MAX_ROUNDS,
};
use crate::llm::{ChatBackend, InferenceParams};
use crate::plan::{parse_plan, plan_document, serialize_plan, Plan};
use crate::prompt::{load_prompt_set, Exchange, PromptError, PromptSet, DEFAULT_BUDGET};

pub const SESSION_FILE: &str = "session.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("corrupt session store at {path}: {reason}")]
    CorruptStore { path: String, reason: String },
    #[error("attempt {requested} is not the latest attempt{}", latest.map(|l| format!(" (latest is {l})")).unwrap_or_default())]
    NotLatestAttempt {
        requested: AttemptRef,
        latest: Option<AttemptRef>,
    },
    #[error("the claimed environment_after differs from the executed result: {0}")]
    EnvMismatch(EnvDiff),
    #[error("the attempt cannot be executed: {reason}")]
    NotExecutable { reason: String, step_error: Option<StepError> },
    #[error("exchange {0} is already approved")]
    AlreadyApproved(usize),
    #[error("the session has no instruction yet")]
    NoExchange,
    #[error("session `{0}` is locked by another writer")]
    Locked(String),
    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid environment: {0}")]
    Environment(EnvError),
    #[error("invalid action set `{reference}`: {reason}")]
    ActionSet { reference: String, reason: String },
    #[error("invalid prompt set `{reference}`: {error}")]
    PromptSet { reference: String, error: PromptError },
    #[error("invalid goal: {0}")]
    Goal(String),
    #[error(transparent)]
    Loop(LoopError),
    #[error("stored chain broken at step {step}: {reason}")]
    ChainBroken { step: usize, reason: String },
}

impl From<LoopError> for SessionError {
    fn from(e: LoopError) -> Self {
        SessionError::Loop(e)
    }
}

fn io_error(path: &Path, e: io::Error) -> SessionError {
    SessionError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Identifies one model response: `exchange` and `round` are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AttemptRef {
    pub exchange: usize,
    pub round: usize,
}

impl std::fmt::Display for AttemptRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.exchange, self.round)
    }
}

/// What to store when the claimed environment disagrees with execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalPolicy {
    /// Refuse the approval and report the difference.
    #[default]
    Strict,
    /// Approve and store the executor's environment.
    ExecutorTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ApprovedStep {
    /// 1-based step number; the plan lives in `step_<nnn>.json`.
    pub step: usize,
    pub attempt: AttemptRef,
    pub environment_after: Environment,
    /// Claimed-versus-executed difference accepted under
    /// [`ApprovalPolicy::ExecutorTruth`]; empty otherwise.
    pub claim_diff: EnvDiff,
    #[schemars(with = "String")]
    pub approved_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SessionExchange {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<GoalSpec>,
    /// Environment the query was built from.
    pub environment: Environment,
    pub transcript: Transcript,
    pub outcome: Option<Outcome>,
    pub approved: Option<ApprovedStep>,
}

impl SessionExchange {
    pub fn latest_attempt(&self, index: usize) -> Option<AttemptRef> {
        self.transcript.rounds.len().checked_sub(1).map(|round| AttemptRef { exchange: index, round })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Session {
    pub id: String,
    /// Bundled action set name or path to a definition file.
    pub action_set: String,
    /// Bundled prompt set name or path to a prompt directory.
    pub prompt_set: String,
    pub policy: ApprovalPolicy,
    pub initial_env: Environment,
    pub current_env: Environment,
    pub exchanges: Vec<SessionExchange>,
    #[schemars(with = "String")]
    pub created: DateTime<Utc>,
    #[schemars(with = "String")]
    pub updated: DateTime<Utc>,
}

impl Session {
    pub fn latest_attempt(&self) -> Option<AttemptRef> {
        let i = self.exchanges.len().checked_sub(1)?;
        self.exchanges[i].latest_attempt(i)
    }

    pub fn approved_steps(&self) -> impl Iterator<Item = &ApprovedStep> {
        self.exchanges.iter().filter_map(|e| e.approved.as_ref())
    }

    /// Past exchanges as conversation history, oldest first.
    pub fn history(&self) -> Vec<Exchange> {
        self.exchanges.iter().filter(|e| !e.transcript.rounds.is_empty()).map(|e| e.transcript.to_exchange()).collect()
    }

    pub fn plan_at(&self, attempt: AttemptRef) -> Option<&Plan> {
        self.exchanges.get(attempt.exchange)?.transcript.rounds.get(attempt.round)?.plan.as_ref()
    }

    /// Validates `attempt` for approval and returns the plan, its trace from
    /// the current environment and the claimed-versus-executed difference.
    pub fn check_approval(&self, attempt: AttemptRef, set: &ActionSet) -> Result<(Plan, ExecutionTrace, EnvDiff), SessionError> {
        let latest = self.latest_attempt();
        if latest != Some(attempt) {
            return Err(SessionError::NotLatestAttempt { requested: attempt, latest });
        }
        if self.exchanges[attempt.exchange].approved.is_some() {
            return Err(SessionError::AlreadyApproved(attempt.exchange));
        }
        let plan = self.plan_at(attempt).cloned().ok_or_else(|| SessionError::NotExecutable {
            reason: "the attempt did not produce a valid plan".into(),
            step_error: None,
        })?;
        if plan.is_clarification() {
            return Err(SessionError::NotExecutable {
                reason: format!("the model asked a question: {}", plan.question),
                step_error: None,
            });
        }
        let start = WorldState::from_env(self.current_env.clone()).map_err(SessionError::Environment)?;
        let trace = execute_plan(&start, &plan, set);
        if let Some(e) = &trace.error {
            return Err(SessionError::NotExecutable {
                reason: e.to_string(),
                step_error: Some(e.clone()),
            });
        }
        let diff = verify_claimed_environment(&trace, &plan.environment_after);
        Ok((plan, trace, diff))
    }
}

/// One attempt as shown to a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, schemars::JsonSchema)]
pub struct AttemptView {
    pub attempt: AttemptRef,
    /// The five-key plan document, when the response parsed.
    pub plan: Option<serde_json::Value>,
    pub issues: Vec<Issue>,
    pub feedback: Option<FeedbackMessage>,
    /// Claimed environment change from `environment_before` to
    /// `environment_after`.
    pub claimed_change: Option<EnvDiff>,
    /// Claimed-versus-executed difference for executable plans.
    pub claim_diff: Option<EnvDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, schemars::JsonSchema)]
pub struct ExchangeView {
    pub instruction: String,
    pub outcome: Option<Outcome>,
    pub approved_step: Option<usize>,
    pub attempts: Vec<AttemptView>,
}

/// Read model of a session: everything a reviewer needs, derived from the
/// stored session alone.
#[derive(Debug, Clone, PartialEq, Serialize, schemars::JsonSchema)]
pub struct SessionSummary {
    pub id: String,
    pub action_set: String,
    pub prompt_set: String,
    pub policy: ApprovalPolicy,
    pub initial_env: Environment,
    pub current_env: Environment,
    pub latest_attempt: Option<AttemptRef>,
    pub approved_steps: usize,
    pub exchanges: Vec<ExchangeView>,
    #[schemars(with = "String")]
    pub created: DateTime<Utc>,
    #[schemars(with = "String")]
    pub updated: DateTime<Utc>,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        let exchanges = s
            .exchanges
            .iter()
            .enumerate()
            .map(|(i, ex)| ExchangeView {
                instruction: ex.instruction.clone(),
                outcome: ex.outcome,
                approved_step: ex.approved.as_ref().map(|a| a.step),
                attempts: ex
                    .transcript
                    .rounds
                    .iter()
                    .enumerate()
                    .map(|(round, r)| AttemptView {
                        attempt: AttemptRef { exchange: i, round },
                        plan: r.plan.as_ref().map(plan_document),
                        issues: r.issues.clone(),
                        feedback: r.feedback.clone(),
                        claimed_change: r
                            .plan
                            .as_ref()
                            .map(|p| diff_environments(&p.environment_before, &p.environment_after)),
                        claim_diff: r.claim_diff.clone(),
                    })
                    .collect(),
            })
            .collect();
        SessionSummary {
            id: s.id.clone(),
            action_set: s.action_set.clone(),
            prompt_set: s.prompt_set.clone(),
            policy: s.policy,
            initial_env: s.initial_env.clone(),
            current_env: s.current_env.clone(),
            latest_attempt: s.latest_attempt(),
            approved_steps: s.approved_steps().count(),
            exchanges,
            created: s.created,
            updated: s.updated,
        }
    }
}

/// Loads a bundled action set by name, or a definition file by path.
pub fn resolve_action_set(reference: &str) -> Result<Arc<ActionSet>, SessionError> {
    if let Some(set) = ActionSet::bundled(reference) {
        return Ok(set);
    }
    let fail = |reason: String| SessionError::ActionSet {
        reference: reference.to_string(),
        reason,
    };
    let text = fs::read_to_string(reference).map_err(|e| fail(format!("not a bundled set and not readable: {e}")))?;
    load_action_set(&text).map(Arc::new).map_err(|e: ActionSetError| fail(e.to_string()))
}

/// Loads a bundled prompt set by name, or a prompt directory by path.
pub fn resolve_prompt_set(reference: &str) -> Result<Arc<PromptSet>, SessionError> {
    if let Some(p) = PromptSet::bundled(reference) {
        return Ok(Arc::new(p));
    }
    load_prompt_set(Path::new(reference))
        .and_then(|p| p.validate().map(|_| p))
        .map(Arc::new)
        .map_err(|error| SessionError::PromptSet {
            reference: reference.to_string(),
            error,
        })
}

/// Advisory writer lock; released on drop.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Filesystem store: one directory per session.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
    lock_timeout: Duration,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), SessionError> {
    let tmp = path.with_extension("json.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| io_error(&tmp, e))?;
    f.sync_all().map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

pub fn step_file_name(step: usize) -> String {
    format!("step_{step:03}.json")
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_error(&root, e))?;
        Ok(SessionStore {
            root,
            lock_timeout: Duration::from_secs(10),
        })
    }

    pub fn with_lock_timeout(mut self, timeout: Duration) -> Self {
        self.lock_timeout = timeout;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_id(id) && self.dir(id).join(SESSION_FILE).is_file()
    }

    pub fn list(&self) -> Result<Vec<String>, SessionError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| io_error(&self.root, e))? {
            let entry = entry.map_err(|e| io_error(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load(&self, id: &str) -> Result<Session, SessionError> {
        if !valid_id(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        let path = self.dir(id).join(SESSION_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(SessionError::NotFound(id.to_string())),
            Err(e) => return Err(io_error(&path, e)),
        };
        serde_json::from_str(&text).map_err(|e| SessionError::CorruptStore {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn persist(&self, session: &Session) -> Result<(), SessionError> {
        if !valid_id(&session.id) {
            return Err(SessionError::NotFound(session.id.clone()));
        }
        let dir = self.dir(&session.id);
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let text = serde_json::to_string_pretty(session).expect("session serializes");
        write_atomic(&dir.join(SESSION_FILE), &text)
    }

    pub fn write_step(&self, id: &str, step: usize, plan: &Plan) -> Result<PathBuf, SessionError> {
        let path = self.dir(id).join(step_file_name(step));
        write_atomic(&path, &serialize_plan(plan))?;
        Ok(path)
    }

    pub fn read_step(&self, id: &str, step: usize) -> Result<String, SessionError> {
        let path = self.dir(id).join(step_file_name(step));
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => SessionError::CorruptStore {
                path: path.display().to_string(),
                reason: "step file is missing".into(),
            },
            _ => io_error(&path, e),
        })
    }

    /// Takes the session's writer lock, waiting up to the lock timeout.
    pub fn lock(&self, id: &str) -> Result<SessionLock, SessionError> {
        if !self.exists(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        let path = self.dir(id).join(LOCK_FILE);
        let deadline = Instant::now() + self.lock_timeout;
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(SessionLock { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if Instant::now() >= deadline {
                        return Err(SessionError::Locked(id.to_string()));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(io_error(&path, e)),
            }
        }
    }

    /// Re-derives every approved environment from the step files alone and
    /// checks it against the stored session. Returns the number of steps.
    pub fn verify_chain(&self, id: &str) -> Result<usize, SessionError> {
        let session = self.load(id)?;
        let set = resolve_action_set(&session.action_set)?;
        let mut env = session.initial_env.clone();
        let mut count = 0;
        for approved in session.approved_steps() {
            let broken = |reason: String| SessionError::ChainBroken {
                step: approved.step,
                reason,
            };
            if approved.step != count + 1 {
                return Err(broken(format!("expected step {}", count + 1)));
            }
            let text = self.read_step(id, approved.step)?;
            let plan = parse_plan(&text, &set, &env).map_err(|e| broken(e.to_string()))?;
            let start = WorldState::from_env(env.clone()).map_err(|e| broken(e.to_string()))?;
            let trace = execute_plan(&start, &plan, &set);
            if let Some(e) = trace.error {
                return Err(broken(e.to_string()));
            }
            let next = trace.final_state().env.clone();
            if next != approved.environment_after || next != plan.environment_after {
                return Err(broken("recorded environment differs from the executed result".into()));
            }
            env = next;
            count += 1;
        }
        if env != session.current_env {
            return Err(SessionError::ChainBroken {
                step: count,
                reason: "current environment differs from the last approved step".into(),
            });
        }
        Ok(count)
    }
}

type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Runs planning, feedback and approval against stored sessions. Every
/// mutating operation holds the session's writer lock.
#[derive(Clone)]
pub struct SessionManager {
    pub store: SessionStore,
    pub backend: Arc<dyn ChatBackend>,
    pub params: InferenceParams,
    pub budget: usize,
    pub policy: ApprovalPolicy,
    pub max_rounds: usize,
    clock: Clock,
}

impl SessionManager {
    pub fn new(store: SessionStore, backend: Arc<dyn ChatBackend>) -> Self {
        SessionManager {
            store,
            backend,
            params: InferenceParams::default(),
            budget: DEFAULT_BUDGET,
            policy: ApprovalPolicy::default(),
            max_rounds: DEFAULT_MAX_ROUNDS,
            clock: Arc::new(Utc::now),
        }
    }

    /// Replaces the timestamp source; fixed clocks make stored sessions
    /// reproducible.
    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    fn planner(&self, session: &Session) -> Result<Planner, SessionError> {
        let mut planner = Planner::new(
            resolve_action_set(&session.action_set)?,
            resolve_prompt_set(&session.prompt_set)?,
            self.backend.clone(),
        );
        planner.params = self.params.clone();
        planner.budget = self.budget;
        Ok(planner)
    }

    pub fn create(&self, initial_env: Environment, action_set: &str, prompt_set: &str) -> Result<Session, SessionError> {
        self.create_with_id(&uuid::Uuid::new_v4().to_string(), initial_env, action_set, prompt_set)
    }

    pub fn create_with_id(
        &self,
        id: &str,
        initial_env: Environment,
        action_set: &str,
        prompt_set: &str,
    ) -> Result<Session, SessionError> {
        initial_env.validate().map_err(SessionError::Environment)?;
        WorldState::from_env(initial_env.clone()).map_err(SessionError::Environment)?;
        resolve_action_set(action_set)?;
        resolve_prompt_set(prompt_set)?;
        if !valid_id(id) {
            return Err(SessionError::NotFound(id.to_string()));
        }
        let now = (self.clock)();
        let session = Session {
            id: id.to_string(),
            action_set: action_set.to_string(),
            prompt_set: prompt_set.to_string(),
            policy: self.policy,
            current_env: initial_env.clone(),
            initial_env,
            exchanges: Vec::new(),
            created: now,
            updated: now,
        };
        self.store.persist(&session)?;
        Ok(session)
    }

    pub fn load(&self, id: &str) -> Result<Session, SessionError> {
        self.store.load(id)
    }

    /// Plans `text` from the session's current environment and records the
    /// exchange.
    pub fn instruct(
        &self,
        id: &str,
        text: &str,
        goal: Option<GoalSpec>,
        max_rounds: Option<usize>,
        observer: &mut dyn FnMut(&LoopProgress),
    ) -> Result<(Session, LoopResult), SessionError> {
        let _lock = self.store.lock(id)?;
        let mut session = self.store.load(id)?;
        if let Some(g) = &goal {
            g.validate_against(&session.current_env).map_err(SessionError::Goal)?;
        }
        let planner = self.planner(&session)?;
        let env = session.current_env.clone();
        let result = planner.run_loop(
            &session.history(),
            &env,
            text,
            goal.as_ref(),
            max_rounds.unwrap_or(self.max_rounds),
            observer,
        )?;
        session.exchanges.push(SessionExchange {
            instruction: text.to_string(),
            goal,
            environment: env,
            transcript: result.transcript.clone(),
            outcome: Some(result.outcome),
            approved: None,
        });
        session.updated = (self.clock)();
        self.store.persist(&session)?;
        Ok((session, result))
    }

    /// Sends human feedback on the latest attempt and resumes the loop.
    pub fn feedback(
        &self,
        id: &str,
        text: &str,
        max_rounds: Option<usize>,
        observer: &mut dyn FnMut(&LoopProgress),
    ) -> Result<(Session, LoopResult), SessionError> {
        let _lock = self.store.lock(id)?;
        let mut session = self.store.load(id)?;
        let index = session.exchanges.len().checked_sub(1).ok_or(SessionError::NoExchange)?;
        if session.exchanges[index].approved.is_some() {
            return Err(SessionError::AlreadyApproved(index));
        }
        let planner = self.planner(&session)?;
        let history: Vec<Exchange> = session.history()[..index].to_vec();
        let ex = &session.exchanges[index];
        let result = planner.continue_loop(
            &history,
            &ex.environment,
            &ex.instruction,
            ex.goal.as_ref(),
            ex.transcript.clone(),
            text,
            max_rounds.unwrap_or(self.max_rounds),
            observer,
        )?;
        let ex = &mut session.exchanges[index];
        ex.transcript = result.transcript.clone();
        ex.outcome = Some(result.outcome);
        session.updated = (self.clock)();
        self.store.persist(&session)?;
        Ok((session, result))
    }

    /// Approves the latest attempt: writes its step file and advances the
    /// current environment to the executed result.
    pub fn approve(&self, id: &str, attempt: AttemptRef) -> Result<Session, SessionError> {
        let _lock = self.store.lock(id)?;
        let mut session = self.store.load(id)?;
        let set = resolve_action_set(&session.action_set)?;
        let (mut plan, trace, diff) = session.check_approval(attempt, &set)?;
        if !diff.is_empty() && session.policy == ApprovalPolicy::Strict {
            return Err(SessionError::EnvMismatch(diff));
        }
        let after = trace.final_state().env.clone();
        plan.environment_after = after.clone();
        let step = session.approved_steps().count() + 1;
        self.store.write_step(id, step, &plan)?;
        let now = (self.clock)();
        session.exchanges[attempt.exchange].approved = Some(ApprovedStep {
            step,
            attempt,
            environment_after: after.clone(),
            claim_diff: diff,
            approved_at: now,
        });
        session.current_env = after;
        session.updated = now;
        self.store.persist(&session)?;
        Ok(session)
    }

    /// Execution trace of the approved plan with the given 1-based step number.
    pub fn trace(&self, id: &str, step: usize) -> Result<ExecutionTrace, SessionError> {
        let session = self.store.load(id)?;
        let set = resolve_action_set(&session.action_set)?;
        let ex = session
            .exchanges
            .iter()
            .find(|e| e.approved.as_ref().is_some_and(|a| a.step == step))
            .ok_or_else(|| SessionError::NotFound(format!("{id}/step {step}")))?;
        let approved = ex.approved.as_ref().expect("filtered on approval");
        let plan = session.plan_at(approved.attempt).ok_or_else(|| SessionError::CorruptStore {
            path: self.store.dir(id).join(SESSION_FILE).display().to_string(),
            reason: format!("approved attempt {} has no plan", approved.attempt),
        })?;
        let start = WorldState::from_env(ex.environment.clone()).map_err(SessionError::Environment)?;
        Ok(execute_plan(&start, plan, &set))
    }
}
