//! HTTP service over the session manager.
//!
//! Every body is derived from the stored session or an executor run; the
//! only in-memory state is the progress of running loops.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use schemars::gen::{SchemaGenerator, SchemaSettings};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::env::{environment_from_value, Environment};
use crate::executor::{ExecutionTrace, GoalSpec};
use crate::feedback::{LoopError, LoopProgress, LoopResult};
use crate::llm::{InferenceParams, LlmError};
use crate::prompt::PromptError;
use crate::session::{AttemptRef, SessionError, SessionManager, SessionSummary};

/// Error body: a machine code, a message and optional structured detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, detail: Option<Value>) -> Self {
        ApiError {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

fn detail<T: Serialize>(v: &T) -> Option<Value> {
    serde_json::to_value(v).ok()
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use StatusCode as S;
        let msg = e.to_string();
        match &e {
            SessionError::NotFound(_) => ApiError::new(S::NOT_FOUND, "not_found", msg, None),
            SessionError::NotLatestAttempt { .. } => ApiError::new(S::CONFLICT, "not_latest_attempt", msg, detail(&e)),
            SessionError::AlreadyApproved(_) => ApiError::new(S::CONFLICT, "already_approved", msg, None),
            SessionError::NoExchange => ApiError::new(S::CONFLICT, "no_exchange", msg, None),
            SessionError::Locked(_) => ApiError::new(S::CONFLICT, "locked", msg, None),
            SessionError::EnvMismatch(d) => ApiError::new(S::UNPROCESSABLE_ENTITY, "env_mismatch", msg, detail(d)),
            SessionError::NotExecutable { .. } => ApiError::new(S::UNPROCESSABLE_ENTITY, "not_executable", msg, detail(&e)),
            SessionError::Environment(err) => ApiError::new(S::UNPROCESSABLE_ENTITY, "invalid_environment", msg, detail(err)),
            SessionError::ActionSet { .. } => ApiError::new(S::UNPROCESSABLE_ENTITY, "invalid_action_set", msg, None),
            SessionError::PromptSet { error, .. } => {
                ApiError::new(S::UNPROCESSABLE_ENTITY, "invalid_prompt_set", msg, detail(error))
            }
            SessionError::Goal(_) => ApiError::new(S::UNPROCESSABLE_ENTITY, "invalid_goal", msg, None),
            SessionError::Loop(LoopError::Llm(l)) => match l {
                LlmError::InvalidParams(_) => ApiError::new(S::UNPROCESSABLE_ENTITY, "invalid_params", msg, None),
                _ => ApiError::new(S::BAD_GATEWAY, "llm_error", msg, detail(l)),
            },
            SessionError::Loop(LoopError::Prompt(p)) => match p {
                PromptError::BudgetTooSmall { .. } => {
                    ApiError::new(S::UNPROCESSABLE_ENTITY, "budget_too_small", msg, detail(p))
                }
                _ => ApiError::new(S::INTERNAL_SERVER_ERROR, "prompt_error", msg, detail(p)),
            },
            SessionError::Loop(LoopError::Invalid(_)) => ApiError::new(S::CONFLICT, "invalid_loop_state", msg, None),
            SessionError::CorruptStore { .. } => ApiError::new(S::INTERNAL_SERVER_ERROR, "corrupt_store", msg, None),
            SessionError::ChainBroken { .. } => ApiError::new(S::INTERNAL_SERVER_ERROR, "chain_broken", msg, None),
            SessionError::Io { .. } => ApiError::new(S::INTERNAL_SERVER_ERROR, "io_error", msg, None),
        }
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|r| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", r.body_text(), None)
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct CreateSessionRequest {
    pub environment: Value,
    /// Bundled set name or definition path on the server.
    #[serde(default = "default_set")]
    pub action_set: String,
    /// Defaults to the action set name.
    #[serde(default)]
    pub prompt_set: Option<String>,
}

fn default_set() -> String {
    "lfo".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct CreateSessionResponse {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct InstructionRequest {
    pub text: String,
    #[serde(default)]
    pub max_rounds: Option<usize>,
    #[serde(default)]
    pub goal: Option<GoalSpec>,
    #[serde(default)]
    pub params: Option<InferenceParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct FeedbackRequest {
    pub text: String,
    #[serde(default)]
    pub max_rounds: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct ApproveRequest {
    pub attempt_ref: AttemptRef,
}

/// Current state of a session's planning loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProgressView {
    pub active: bool,
    /// Responses received so far in the running or last loop.
    pub responses: usize,
    pub round: usize,
    pub last_feedback: Option<String>,
}

pub struct AppState {
    pub manager: SessionManager,
    progress: Mutex<HashMap<String, ProgressView>>,
}

impl AppState {
    pub fn new(manager: SessionManager) -> Arc<Self> {
        Arc::new(AppState {
            manager,
            progress: Mutex::new(HashMap::new()),
        })
    }

    fn set_progress(&self, id: &str, f: impl FnOnce(&mut ProgressView)) {
        let mut map = self.progress.lock().expect("progress lock");
        f(map.entry(id.to_string()).or_default());
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None)
    })?
}

async fn create_session(
    State(st): State<Shared>,
    payload: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let req = body(payload)?;
    let session = blocking(move || {
        let env: Environment =
            environment_from_value(&req.environment).map_err(|e| ApiError::from(SessionError::Environment(e)))?;
        let prompts = req.prompt_set.clone().unwrap_or_else(|| req.action_set.clone());
        Ok(st.manager.create(env, &req.action_set, &prompts)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(CreateSessionResponse { session_id: session.id })))
}

fn tracked(st: &Shared, id: &str) -> impl FnMut(&LoopProgress) + use<> {
    let st = st.clone();
    let id = id.to_string();
    move |p: &LoopProgress| {
        st.set_progress(&id, |v| {
            v.responses += 1;
            v.round = p.round;
            v.last_feedback = p.feedback.clone();
        })
    }
}

fn run_tracked<T>(st: &Shared, id: &str, f: impl FnOnce(&mut dyn FnMut(&LoopProgress)) -> Result<T, SessionError>) -> Result<T, ApiError> {
    st.set_progress(id, |v| *v = ProgressView { active: true, ..Default::default() });
    let mut observer = tracked(st, id);
    let result = f(&mut observer);
    st.set_progress(id, |v| v.active = false);
    Ok(result?)
}

async fn instruction(
    State(st): State<Shared>,
    Path(id): Path<String>,
    payload: Result<Json<InstructionRequest>, JsonRejection>,
) -> Result<Json<LoopResult>, ApiError> {
    let req = body(payload)?;
    let result = blocking(move || {
        if !st.manager.store.exists(&id) {
            return Err(SessionError::NotFound(id).into());
        }
        let mut manager = st.manager.clone();
        if let Some(p) = req.params {
            p.validate().map_err(|e| SessionError::Loop(e.into()))?;
            manager.params = p;
        }
        run_tracked(&st, &id, |obs| manager.instruct(&id, &req.text, req.goal, req.max_rounds, obs).map(|(_, r)| r))
    })
    .await?;
    Ok(Json(result))
}

async fn feedback(
    State(st): State<Shared>,
    Path(id): Path<String>,
    payload: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<LoopResult>, ApiError> {
    let req = body(payload)?;
    let result = blocking(move || {
        if !st.manager.store.exists(&id) {
            return Err(SessionError::NotFound(id).into());
        }
        run_tracked(&st, &id, |obs| st.manager.feedback(&id, &req.text, req.max_rounds, obs).map(|(_, r)| r))
    })
    .await?;
    Ok(Json(result))
}

async fn approve(
    State(st): State<Shared>,
    Path(id): Path<String>,
    payload: Result<Json<ApproveRequest>, JsonRejection>,
) -> Result<Json<SessionSummary>, ApiError> {
    let req = body(payload)?;
    let session = blocking(move || Ok(st.manager.approve(&id, req.attempt_ref)?)).await?;
    Ok(Json(SessionSummary::from(&session)))
}

async fn get_session(State(st): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    let session = blocking(move || Ok(st.manager.load(&id)?)).await?;
    Ok(Json(SessionSummary::from(&session)))
}

async fn get_trace(
    State(st): State<Shared>,
    Path((id, step)): Path<(String, usize)>,
) -> Result<Json<ExecutionTrace>, ApiError> {
    Ok(Json(blocking(move || Ok(st.manager.trace(&id, step)?)).await?))
}

async fn get_progress(State(st): State<Shared>, Path(id): Path<String>) -> Result<Json<ProgressView>, ApiError> {
    if !st.manager.store.exists(&id) {
        return Err(SessionError::NotFound(id).into());
    }
    let map = st.progress.lock().expect("progress lock");
    Ok(Json(map.get(&id).cloned().unwrap_or_default()))
}

async fn openapi() -> Json<Value> {
    Json(openapi_document())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/instruction", post(instruction))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/approve", post(approve))
        .route("/sessions/{id}/trace/{step}", get(get_trace))
        .route("/sessions/{id}/progress", get(get_progress))
        .route("/openapi.json", get(openapi))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, manager: SessionManager) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(manager))).await
}

fn schema_ref<T: JsonSchema>(gen: &mut SchemaGenerator) -> Value {
    serde_json::to_value(gen.subschema_for::<T>()).expect("schema serializes")
}

fn content(schema: Value) -> Value {
    json!({"application/json": {"schema": schema}})
}

/// OpenAPI 3 description of every route, with schemas generated from the
/// request and response types.
pub fn openapi_document() -> Value {
    let mut gen = SchemaSettings::openapi3().into_generator();
    let error = schema_ref::<ApiError>(&mut gen);
    let id_param = json!({"name": "id", "in": "path", "required": true, "schema": {"type": "string"}});
    let errors = |codes: &[&str]| -> Value {
        let mut m = serde_json::Map::new();
        for c in codes {
            m.insert(c.to_string(), json!({"description": "error", "content": content(error.clone())}));
        }
        Value::Object(m)
    };
    let op = |summary: &str, req: Option<Value>, status: &str, resp: Value, errs: &[&str], params: Vec<Value>| {
        let mut responses = errors(errs);
        responses[status] = json!({"description": "success", "content": content(resp)});
        let mut o = json!({"summary": summary, "parameters": params, "responses": responses});
        if let Some(r) = req {
            o["requestBody"] = json!({"required": true, "content": content(r)});
        }
        o
    };
    let create_req = schema_ref::<CreateSessionRequest>(&mut gen);
    let create_resp = schema_ref::<CreateSessionResponse>(&mut gen);
    let instr_req = schema_ref::<InstructionRequest>(&mut gen);
    let fb_req = schema_ref::<FeedbackRequest>(&mut gen);
    let appr_req = schema_ref::<ApproveRequest>(&mut gen);
    let loop_result = schema_ref::<LoopResult>(&mut gen);
    let summary = schema_ref::<SessionSummary>(&mut gen);
    let trace = schema_ref::<ExecutionTrace>(&mut gen);
    let progress = schema_ref::<ProgressView>(&mut gen);
    let step_param = json!({"name": "step", "in": "path", "required": true, "schema": {"type": "integer", "minimum": 1}});
    let paths = json!({
        "/sessions": {"post": op("Create a session", Some(create_req), "201", create_resp, &["422"], vec![])},
        "/sessions/{id}": {"get": op("Session summary", None, "200", summary.clone(), &["404"], vec![id_param.clone()])},
        "/sessions/{id}/instruction": {"post": op("Plan an instruction with automatic feedback", Some(instr_req), "200", loop_result.clone(), &["404", "409", "422", "502"], vec![id_param.clone()])},
        "/sessions/{id}/feedback": {"post": op("Send human feedback on the latest attempt", Some(fb_req), "200", loop_result, &["404", "409", "422", "502"], vec![id_param.clone()])},
        "/sessions/{id}/approve": {"post": op("Approve the latest attempt", Some(appr_req), "200", summary, &["404", "409", "422"], vec![id_param.clone()])},
        "/sessions/{id}/trace/{step}": {"get": op("Execution trace of an approved step", None, "200", trace, &["404"], vec![id_param.clone(), step_param])},
        "/sessions/{id}/progress": {"get": op("Progress of the running loop", None, "200", progress, &["404"], vec![id_param])},
    });
    let schemas = serde_json::to_value(gen.take_definitions()).expect("schemas serialize");
    json!({
        "openapi": "3.0.3",
        "info": {"title": "chatplan", "version": env!("CARGO_PKG_VERSION")},
        "paths": paths,
        "components": {"schemas": schemas},
    })
}
