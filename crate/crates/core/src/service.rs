//! HTTP API: sessions with SSE turn streams, skill administration, memory,
//! suggestions and reward telemetry.
//!
//! Handlers are thin. Blocking harness calls run on the blocking pool; a
//! turn holds its session's lock and then its workspace's lock for its whole
//! duration, so turns are serialized per session and per user.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::evolution::{
    confirm_suggestion, cumulative_reward, list_rewards, pending_suggestions, run_evolution, EvolutionConfig,
    EvolutionRun, JobQueue,
};
use crate::runtime::{Harness, SessionPhase, SessionState, TurnEvent};
use crate::skills::{parse_skill_text, MaturityLevel, Skill};
use crate::workspace::{init_workspace, UserId, Workspace};

/// Per-user workspaces, opened (and initialized) on first use.
pub struct Workspaces {
    data_root: PathBuf,
    open: Mutex<HashMap<String, Arc<Mutex<Workspace>>>>,
}

impl Workspaces {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            open: Mutex::new(HashMap::new()),
        }
    }

    pub fn data_root(&self) -> &std::path::Path {
        &self.data_root
    }

    pub fn get(&self, user_id: &str) -> Result<Arc<Mutex<Workspace>>> {
        let user = UserId::parse(user_id)?;
        let mut open = self.open.lock().unwrap();
        if let Some(ws) = open.get(user.as_str()) {
            return Ok(ws.clone());
        }
        let ws = Arc::new(Mutex::new(init_workspace(&self.data_root, user.as_str())?));
        open.insert(user.as_str().to_string(), ws.clone());
        Ok(ws)
    }
}

pub struct AppState {
    pub harness: Harness,
    pub workspaces: Arc<Workspaces>,
    pub sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
    pub jobs: Arc<JobQueue>,
    pub evolution: EvolutionConfig,
    pub gamma: f64,
    pub auth_token: Option<String>,
}

impl AppState {
    /// Builds the service from configuration; the auth token comes from the environment.
    pub fn from_config(config: &Config) -> Result<Arc<Self>> {
        let harness = config.harness()?;
        Self::new(harness, config.data_root.clone(), config, config.auth_token())
    }

    pub fn new(
        harness: Harness,
        data_root: PathBuf,
        config: &Config,
        auth_token: Option<String>,
    ) -> Result<Arc<Self>> {
        let workspaces = Arc::new(Workspaces::new(data_root));
        let evolution = config.evolution_config()?;
        let runner = {
            let workspaces = workspaces.clone();
            let chat = harness.chat.clone();
            let embed = harness.embed.clone();
            move |user_id: &str, session_id: &str| {
                let outcome = workspaces.get(user_id).and_then(|ws| {
                    let mut ws = ws.lock().unwrap();
                    run_evolution(&mut ws, session_id, chat.as_ref(), Some(embed.as_ref()), &evolution)
                });
                if let Err(e) = outcome {
                    tracing::warn!(session = session_id, error = %e, "background evolution failed");
                }
            }
        };
        let jobs = JobQueue::start(config.evolution_workers, Arc::new(runner));
        let harness = harness.with_scheduler(jobs.clone());
        Ok(Arc::new(Self {
            harness,
            workspaces,
            sessions: Mutex::new(HashMap::new()),
            jobs,
            evolution,
            gamma: config.reward.gamma,
            auth_token,
        }))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::SessionNotFound(id.to_string()))
    }
}

/// An [`Error`] rendered as `{"error": {"code", "message"}}` with a matching status.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn status_for(error: &Error) -> (StatusCode, &'static str) {
    match error {
        Error::InvalidUserId(_) => (StatusCode::BAD_REQUEST, "invalid_user_id"),
        Error::MalformedSkill(_) => (StatusCode::BAD_REQUEST, "malformed_skill"),
        Error::Config(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
        Error::SkillNotFound(_) => (StatusCode::NOT_FOUND, "skill_not_found"),
        Error::SuggestionNotFound(_) => (StatusCode::NOT_FOUND, "suggestion_not_found"),
        Error::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
        Error::TurnNotFound(_) => (StatusCode::NOT_FOUND, "turn_not_found"),
        Error::TurnWithoutSkill(_) => (StatusCode::UNPROCESSABLE_ENTITY, "turn_without_skill"),
        Error::IllegalPhase { .. } => (StatusCode::CONFLICT, "illegal_phase"),
        Error::ConfirmationRequired => (StatusCode::CONFLICT, "confirmation_required"),
        Error::EvolutionDeferred(_) => (StatusCode::SERVICE_UNAVAILABLE, "evolution_deferred"),
        Error::Provider(_) => (StatusCode::BAD_GATEWAY, "provider_error"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = status_for(&self.0);
        let body = json!({ "error": { "code": code, "message": self.0.to_string() } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(result) => result.map_err(ApiError),
        Err(e) => Err(ApiError(Error::SessionLog(format!("worker panicked: {e}")))),
    }
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    user_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub user_id: String,
    pub phase: SessionPhase,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionDescriptor>)> {
    let app2 = app.clone();
    let state = blocking(move || {
        let ws = app2.workspaces.get(&body.user_id)?;
        let ws = ws.lock().unwrap();
        app2.harness.open_session(&ws)
    })
    .await?;
    let descriptor = SessionDescriptor {
        session_id: state.session_id.clone(),
        user_id: state.user_id.clone(),
        phase: state.phase,
    };
    app.sessions
        .lock()
        .unwrap()
        .insert(state.session_id.clone(), Arc::new(Mutex::new(state)));
    Ok((StatusCode::CREATED, Json(descriptor)))
}

#[derive(Debug, Deserialize)]
struct PostMessage {
    text: String,
}

fn to_sse(event: &TurnEvent) -> Event {
    Event::default()
        .event(event.name())
        .data(serde_json::to_string(event).unwrap_or_else(|_| "{}".into()))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    Json(body): Json<PostMessage>,
) -> ApiResult<Sse<impl Stream<Item = std::result::Result<Event, Infallible>>>> {
    let session = app.session(&session_id)?;
    session.lock().unwrap().require_phase(SessionPhase::Open)?;
    let (tx, rx) = mpsc::channel::<TurnEvent>(256);
    tokio::task::spawn_blocking(move || {
        let mut state = session.lock().unwrap();
        let outcome = app.workspaces.get(&state.user_id).and_then(|ws| {
            let mut ws = ws.lock().unwrap();
            app.harness.run_turn(&mut ws, &mut state, &body.text, &mut |event| {
                let _ = tx.blocking_send(event);
            })
        });
        if let Err(e) = outcome {
            let _ = tx.blocking_send(TurnEvent::Error { message: e.to_string() });
        }
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|event| (Ok(to_sse(&event)), rx))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn end_session(
    State(app): State<Arc<AppState>>,
    Path(session_id): Path<String>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&session_id)?;
    let disposition = blocking(move || {
        let mut state = session.lock().unwrap();
        app.harness.end_session(&mut state)
    })
    .await?;
    Ok(Json(json!({
        "session_id": session_id,
        "phase": SessionPhase::Ended,
        "evolution": disposition,
    })))
}

async fn evolve(State(app): State<Arc<AppState>>, Path(session_id): Path<String>) -> ApiResult<Json<Value>> {
    let session = app.session(&session_id)?;
    blocking(move || {
        let mut state = session.lock().unwrap();
        if state.phase == SessionPhase::Open {
            return Err(Error::IllegalPhase {
                expected: SessionPhase::Ended.to_string(),
                found: state.phase.to_string(),
            });
        }
        let ws = app.workspaces.get(&state.user_id)?;
        let mut ws = ws.lock().unwrap();
        let run = run_evolution(
            &mut ws,
            &state.session_id,
            app.harness.chat.as_ref(),
            Some(app.harness.embed.as_ref()),
            &app.evolution,
        )?;
        state.phase = SessionPhase::Evolved;
        Ok(Json(match run {
            EvolutionRun::Applied(record) => json!({ "status": "applied", "record": record }),
            EvolutionRun::AlreadyEvolved => json!({ "status": "already_evolved" }),
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct Feedback {
    turn_index: u64,
    positive: bool,
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    Json(body): Json<Feedback>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&session_id)?;
    blocking(move || {
        let mut state = session.lock().unwrap();
        let ws = app.workspaces.get(&state.user_id)?;
        let mut ws = ws.lock().unwrap();
        let outcome = app.harness.feedback(&mut ws, &mut state, body.turn_index, body.positive)?;
        Ok(Json(serde_json::to_value(outcome).unwrap_or_default()))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct UserQuery {
    user_id: Option<String>,
}

impl UserQuery {
    fn user(&self) -> Result<String> {
        self.user_id
            .clone()
            .ok_or_else(|| Error::InvalidUserId(String::new()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SkillSummary {
    pub name: String,
    pub description: String,
    pub triggers: Vec<String>,
    pub requires_sub_agent: bool,
    pub usage_count: u64,
    pub success_count: u64,
    pub success_rate: f64,
    pub maturity: MaturityLevel,
}

impl SkillSummary {
    pub fn of(skill: &Skill) -> Self {
        Self {
            name: skill.name.to_string(),
            description: skill.description.clone(),
            triggers: skill.triggers.clone(),
            requires_sub_agent: skill.requires_sub_agent,
            usage_count: skill.meta.usage_count,
            success_count: skill.meta.success_count,
            success_rate: skill.meta.success_rate(),
            maturity: skill.meta.maturity(),
        }
    }
}

fn skill_detail(skill: &Skill) -> Value {
    let mut value = serde_json::to_value(SkillSummary::of(skill)).unwrap_or_default();
    value["instructions"] = json!(skill.instructions);
    value["references"] = json!(skill.references.keys().collect::<Vec<_>>());
    value["sub_agent"] = serde_json::to_value(&skill.sub_agent).unwrap_or_default();
    value
}

async fn list_skills(State(app): State<Arc<AppState>>, Query(q): Query<UserQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ws = app.workspaces.get(&q.user()?)?;
        let ws = ws.lock().unwrap();
        let skills: Vec<SkillSummary> = ws.skills.iter().map(SkillSummary::of).collect();
        Ok(Json(json!({ "skills": skills })))
    })
    .await
}

async fn get_skill(
    State(app): State<Arc<AppState>>,
    Path(name): Path<String>,
    Query(q): Query<UserQuery>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ws = app.workspaces.get(&q.user()?)?;
        let ws = ws.lock().unwrap();
        let skill = ws.skills.get(&name).ok_or(Error::SkillNotFound(name))?;
        Ok(Json(skill_detail(skill)))
    })
    .await
}

/// Body is SKILL.md text. Usage counters of an existing skill are kept.
async fn put_skill(
    State(app): State<Arc<AppState>>,
    Path(name): Path<String>,
    Query(q): Query<UserQuery>,
    body: String,
) -> ApiResult<(StatusCode, Json<Value>)> {
    blocking(move || {
        let ws = app.workspaces.get(&q.user()?)?;
        let mut ws = ws.lock().unwrap();
        let existing = ws.skills.get(&name).cloned();
        let references = existing.as_ref().map(|s| s.references.clone()).unwrap_or_default();
        let mut skill = parse_skill_text(&body, references, Utc::now())?;
        if skill.name.as_str() != name {
            return Err(Error::MalformedSkill(format!(
                "front matter name {} does not match {name}",
                skill.name
            )));
        }
        let status = match &existing {
            Some(old) => {
                skill.meta.usage_count = old.meta.usage_count;
                skill.meta.success_count = old.meta.success_count;
                skill.meta.created_at = old.meta.created_at;
                skill.meta.updated_at = Utc::now();
                StatusCode::OK
            }
            None => {
                skill.meta.usage_count = 0;
                skill.meta.success_count = 0;
                StatusCode::CREATED
            }
        };
        let detail = skill_detail(&skill);
        ws.skills.save_skill(skill)?;
        Ok((status, Json(detail)))
    })
    .await
}

async fn delete_skill(
    State(app): State<Arc<AppState>>,
    Path(name): Path<String>,
    Query(q): Query<UserQuery>,
) -> ApiResult<StatusCode> {
    blocking(move || {
        let ws = app.workspaces.get(&q.user()?)?;
        let mut ws = ws.lock().unwrap();
        ws.skills.delete_skill(&name)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

async fn get_memory(State(app): State<Arc<AppState>>, Path(user_id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ws = app.workspaces.get(&user_id)?;
        let ws = ws.lock().unwrap();
        Ok(Json(json!({
            "user_id": user_id,
            "soul": ws.soul()?,
            "user": ws.user_profile()?,
            "memory": ws.memory()?,
        })))
    })
    .await
}

async fn get_suggestions(
    State(app): State<Arc<AppState>>,
    Path(user_id): Path<String>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ws = app.workspaces.get(&user_id)?;
        let ws = ws.lock().unwrap();
        Ok(Json(json!({ "suggestions": pending_suggestions(&ws)? })))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct Confirm {
    user_id: String,
    #[serde(default = "default_accept")]
    accept: bool,
}

fn default_accept() -> bool {
    true
}

async fn confirm(
    State(app): State<Arc<AppState>>,
    Path(suggestion_id): Path<String>,
    Json(body): Json<Confirm>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ws = app.workspaces.get(&body.user_id)?;
        let mut ws = ws.lock().unwrap();
        let applied = confirm_suggestion(&mut ws, &suggestion_id, body.accept)?;
        Ok(Json(json!({
            "suggestion_id": suggestion_id,
            "accepted": body.accept,
            "applied_chars": applied,
        })))
    })
    .await
}

async fn get_rewards(State(app): State<Arc<AppState>>, Path(user_id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ws = app.workspaces.get(&user_id)?;
        let ws = ws.lock().unwrap();
        let rewards = list_rewards(&ws)?;
        Ok(Json(json!({
            "gamma": app.gamma,
            "cumulative": cumulative_reward(&rewards, app.gamma),
            "rewards": rewards,
        })))
    })
    .await
}

async fn require_token(State(app): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &app.auth_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            let body = json!({ "error": { "code": "unauthorized", "message": "missing or wrong bearer token" } });
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(request).await
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/end", post(end_session))
        .route("/v1/sessions/{id}/evolve", post(evolve))
        .route("/v1/sessions/{id}/feedback", post(feedback))
        .route("/v1/skills", get(list_skills))
        .route("/v1/skills/{name}", get(get_skill).put(put_skill).delete(delete_skill))
        .route("/v1/users/{id}/memory", get(get_memory))
        .route("/v1/users/{id}/suggestions", get(get_suggestions))
        .route("/v1/suggestions/{sid}/confirm", post(confirm))
        .route("/v1/users/{id}/rewards", get(get_rewards))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

/// Binds `config.bind_address` and serves until the process stops.
pub async fn serve(config: &Config) -> Result<()> {
    let app = AppState::from_config(config)?;
    let listener = tokio::net::TcpListener::bind(&config.bind_address)
        .await
        .map_err(|e| Error::Config(format!("bind {}: {e}", config.bind_address)))?;
    tracing::info!(address = %config.bind_address, "serving");
    axum::serve(listener, router(app))
        .await
        .map_err(|e| Error::Config(format!("server: {e}")))
}

