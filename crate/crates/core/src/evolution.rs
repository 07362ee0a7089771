//! The offline loop: review a finished session, apply profile and memory
//! deltas, gate and install extracted skills, queue behavior suggestions and
//! record reward telemetry.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsio;
use crate::matcher::cosine_similarity;
use crate::message::{Message, Role, ToolCall};
use crate::provider::{ChatProvider, ChatPurpose, ChatRequest, EmbeddingProvider};
use crate::runtime::EvolutionScheduler;
use crate::session_log::{is_ended, log_path, transcript, LogRecord, SessionLog};
use crate::skills::{is_valid_slug, Skill, SkillMeta, SkillStore, Slug, SubAgentSpec};
use crate::tools::{ParamSpec, ParamType, ToolDefinition, ToolEffect};
use crate::workspace::{section_body, ProfileDelta, Provenance, Workspace};

pub const REVIEW_INSTRUCTIONS: &str = "You are an offline analyst. Read the finished session \
and extract (1) business facts the user stated explicitly, with update_user_profile, quoting \
the user's own words as evidence; (2) durable facts or conventions worth remembering, with \
update_memory; (3) reusable procedures that worked, with extract_skill. Never record guesses \
as facts: if something is only implied, call update_user_profile with inferred=true. Call no \
tool when nothing qualifies, then reply with a one-line summary.";

pub const EXTRACT_SKILL: &str = "extract_skill";
pub const REVIEW_PROFILE_TOOL: &str = "update_user_profile";
pub const REVIEW_MEMORY_TOOL: &str = "update_memory";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub maturity: f64,
    pub profile: f64,
    pub memory: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            maturity: 1.0 / 3.0,
            profile: 1.0 / 3.0,
            memory: 1.0 / 3.0,
        }
    }
}

impl RewardWeights {
    pub fn new(maturity: f64, profile: f64, memory: f64) -> Result<Self> {
        let weights = Self {
            maturity,
            profile,
            memory,
        };
        weights.validate()?;
        Ok(weights)
    }

    /// Non-negative and summing to 1.
    pub fn validate(&self) -> Result<()> {
        let all = [self.maturity, self.profile, self.memory];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("reward weights must be non-negative".into()));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("reward weights must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    /// Delta size in characters that maps to a term of 1.0.
    pub magnitude_scale: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            magnitude_scale: 2000.0,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub max_steps: usize,
    pub dedup_threshold: f64,
    /// Distinct sessions an inferred fact must appear in before it is suggested.
    pub suggestion_threshold: usize,
    pub reward: RewardConfig,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            dedup_threshold: 0.9,
            suggestion_threshold: 2,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub session_id: String,
    pub maturity_term: f64,
    pub profile_term: f64,
    pub memory_term: f64,
    pub weights: RewardWeights,
    pub reward: f64,
}

fn magnitude_term(chars: usize, scale: f64) -> f64 {
    if scale <= 0.0 {
        return 0.0;
    }
    (chars as f64 / scale).clamp(0.0, 1.0)
}

/// `w1 * maturity + w2 * profile + w3 * memory`, maturity encoded as ordinal / 3.
pub fn compute_reward(
    session_id: &str,
    skill_meta: Option<&SkillMeta>,
    profile_chars: usize,
    memory_chars: usize,
    config: &RewardConfig,
) -> RewardRecord {
    let maturity_term = skill_meta.map_or(0.0, |m| f64::from(m.maturity().ordinal()) / 3.0);
    let profile_term = magnitude_term(profile_chars, config.magnitude_scale);
    let memory_term = magnitude_term(memory_chars, config.magnitude_scale);
    let w = config.weights;
    RewardRecord {
        session_id: session_id.to_string(),
        maturity_term,
        profile_term,
        memory_term,
        weights: w,
        reward: w.maturity * maturity_term + w.profile * profile_term + w.memory * memory_term,
    }
}

/// `sum over t = 1..n of gamma^t * reward_t`.
pub fn cumulative_reward(records: &[RewardRecord], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for record in records {
        discount *= gamma;
        total += discount * record.reward;
    }
    total
}

/// A skill proposed by the review agent, before validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillCandidate {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default)]
    pub instructions: String,
    #[serde(default)]
    pub sub_agent: Option<SubAgentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    InvalidName,
    NameCollision,
    EmptyDescription,
    NoTriggers,
    InvalidTriggers,
    EmptyInstructions,
    NearDuplicate { of: String, similarity: f64 },
    Invalid { detail: String },
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::InvalidName => "invalid_name",
            RejectReason::NameCollision => "name_collision",
            RejectReason::EmptyDescription => "empty_description",
            RejectReason::NoTriggers => "no_triggers",
            RejectReason::InvalidTriggers => "invalid_triggers",
            RejectReason::EmptyInstructions => "empty_instructions",
            RejectReason::NearDuplicate { .. } => "near_duplicate",
            RejectReason::Invalid { .. } => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateDecision {
    Accept(Box<Skill>),
    Reject(RejectReason),
}

/// Checks a candidate against the store. The first failing check is the
/// reason. The near-duplicate check is skipped when `embed` is `None` or fails.
pub fn gate_skill_candidate(
    candidate: &SkillCandidate,
    store: &SkillStore,
    embed: Option<&dyn EmbeddingProvider>,
    cache: &crate::matcher::EmbeddingCache,
    dedup_threshold: f64,
    now: DateTime<Utc>,
) -> GateDecision {
    let name = candidate.name.trim();
    if !is_valid_slug(name) {
        return GateDecision::Reject(RejectReason::InvalidName);
    }
    if store.get(name).is_some() {
        return GateDecision::Reject(RejectReason::NameCollision);
    }
    if candidate.description.trim().is_empty() {
        return GateDecision::Reject(RejectReason::EmptyDescription);
    }
    let triggers: Vec<String> = candidate.triggers.iter().map(|t| t.trim().to_string()).collect();
    if triggers.is_empty() {
        return GateDecision::Reject(RejectReason::NoTriggers);
    }
    let mut seen = BTreeSet::new();
    if triggers.iter().any(|t| t.is_empty() || !seen.insert(t.to_lowercase())) {
        return GateDecision::Reject(RejectReason::InvalidTriggers);
    }
    if candidate.instructions.trim().is_empty() {
        return GateDecision::Reject(RejectReason::EmptyInstructions);
    }
    let mut skill = Skill::new(
        Slug::parse(name).expect("slug checked above"),
        candidate.description.trim(),
        now,
    );
    skill.triggers = triggers;
    skill.instructions = candidate.instructions.trim().to_string();
    if let Some(spec) = &candidate.sub_agent {
        skill.requires_sub_agent = true;
        skill.sub_agent = Some(spec.clone());
    }
    if let Err(e) = skill.validate() {
        return GateDecision::Reject(RejectReason::Invalid { detail: e.to_string() });
    }
    if let Some(embed) = embed {
        match near_duplicate(&skill.description, store, embed, cache) {
            Ok(Some((of, similarity))) if similarity >= dedup_threshold => {
                return GateDecision::Reject(RejectReason::NearDuplicate { of, similarity });
            }
            Ok(_) => {}
            Err(e) => tracing::warn!(error = %e, "dedup check skipped"),
        }
    }
    GateDecision::Accept(Box::new(skill))
}

fn near_duplicate(
    description: &str,
    store: &SkillStore,
    embed: &dyn EmbeddingProvider,
    cache: &crate::matcher::EmbeddingCache,
) -> Result<Option<(String, f64)>> {
    if store.is_empty() {
        return Ok(None);
    }
    let query = embed.embed(description)?;
    let mut best: Option<(String, f64)> = None;
    for skill in store.iter() {
        let vector = cache.vector_with_dimension(skill, embed, query.len())?;
        let score = cosine_similarity(&query, &vector)?;
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((skill.name.to_string(), score));
        }
    }
    cache.flush();
    Ok(best)
}

/// A profile entry the review could not back with the user's own words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedFact {
    pub heading: String,
    pub content: String,
}

impl FlaggedFact {
    pub fn pattern(&self) -> String {
        format!("{}: {}", normalize(&self.heading), normalize(&self.content))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionDelta {
    pub session_id: String,
    pub profile_delta: ProfileDelta,
    pub memory_delta: ProfileDelta,
    pub new_skills: Vec<SkillCandidate>,
    pub suggestions: Vec<Suggestion>,
    pub flagged: Vec<FlaggedFact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub name: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
}

/// Contents of `sessions/{session_id}.evolution.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub session_id: String,
    pub evolved_at: DateTime<Utc>,
    pub delta: EvolutionDelta,
    pub gate: Vec<GateRecord>,
    pub reward: RewardRecord,
    pub review_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvolutionRun {
    Applied(Box<EvolutionRecord>),
    AlreadyEvolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: String,
    pub pattern: String,
    pub delta: ProfileDelta,
    pub sessions: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Observation {
    heading: String,
    content: String,
    sessions: BTreeSet<String>,
    suggested: bool,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn evolution_path(ws: &Workspace, session_id: &str) -> PathBuf {
    ws.sessions_dir().join(format!("{session_id}.evolution.json"))
}

fn suggestions_path(ws: &Workspace) -> PathBuf {
    ws.root().join("suggestions.json")
}

fn observations_path(ws: &Workspace) -> PathBuf {
    ws.root().join("observations.json")
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(ws: &Workspace, path: &PathBuf) -> Result<T> {
    if !ws.fs().is_file(path) {
        return Ok(T::default());
    }
    let text = ws.fs().read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SessionLog(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(ws: &Workspace, path: &PathBuf, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::SessionLog(e.to_string()))?;
    fsio::write_atomic(ws.fs().as_ref(), path, &bytes).map_err(|e| Error::io(path, e))
}

pub fn pending_suggestions(ws: &Workspace) -> Result<Vec<Suggestion>> {
    read_json(ws, &suggestions_path(ws))
}

/// Accepting applies the suggestion as a confirmed delta; either way it leaves the queue.
pub fn confirm_suggestion(ws: &mut Workspace, suggestion_id: &str, accept: bool) -> Result<usize> {
    let mut pending = pending_suggestions(ws)?;
    let position = pending
        .iter()
        .position(|s| s.id == suggestion_id)
        .ok_or_else(|| Error::SuggestionNotFound(suggestion_id.to_string()))?;
    let suggestion = pending.remove(position);
    let mut applied = 0;
    if accept {
        let mut delta = suggestion.delta.clone();
        delta.confirmed = true;
        applied = ws.apply_profile_delta(&delta)?;
    }
    write_json(ws, &suggestions_path(ws), &pending)?;
    Ok(applied)
}

pub fn list_evolution_records(ws: &Workspace) -> Result<Vec<EvolutionRecord>> {
    let dir = ws.sessions_dir();
    if !ws.fs().is_dir(&dir) {
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for path in ws.fs().list_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        if !path.to_string_lossy().ends_with(".evolution.json") {
            continue;
        }
        let text = ws.fs().read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: EvolutionRecord = serde_json::from_str(&text)
            .map_err(|e| Error::SessionLog(format!("{}: {e}", path.display())))?;
        records.push(record);
    }
    records.sort_by(|a, b| {
        a.evolved_at
            .cmp(&b.evolved_at)
            .then_with(|| a.session_id.cmp(&b.session_id))
    });
    Ok(records)
}

/// Reward records of all evolved sessions, oldest first.
pub fn list_rewards(ws: &Workspace) -> Result<Vec<RewardRecord>> {
    Ok(list_evolution_records(ws)?.into_iter().map(|r| r.reward).collect())
}

fn review_tools() -> Vec<ToolDefinition> {
    vec![
        ToolDefinition {
            name: REVIEW_PROFILE_TOOL.into(),
            description: "Propose a user-profile entry stated by the user.".into(),
            parameters: vec![
                ParamSpec::required("heading", ParamType::String, "Profile section title"),
                ParamSpec::required("content", ParamType::String, "The fact, concise"),
                ParamSpec::required("evidence", ParamType::String, "Verbatim quote from a user message"),
                ParamSpec::optional("inferred", ParamType::Boolean, "True when the user only implied it"),
                ParamSpec::optional("mode", ParamType::String, "add (default) or replace"),
            ],
            effect: ToolEffect::WorkspaceWrite,
        },
        ToolDefinition {
            name: REVIEW_MEMORY_TOOL.into(),
            description: "Propose a long-term memory entry.".into(),
            parameters: vec![
                ParamSpec::required("heading", ParamType::String, "Memory section title"),
                ParamSpec::required("content", ParamType::String, "The fact or convention"),
                ParamSpec::optional("mode", ParamType::String, "add (default) or replace"),
            ],
            effect: ToolEffect::WorkspaceWrite,
        },
        ToolDefinition {
            name: EXTRACT_SKILL.into(),
            description: "Propose a reusable skill distilled from this session.".into(),
            parameters: vec![
                ParamSpec::required("name", ParamType::String, "Lowercase slug, [a-z0-9-]+"),
                ParamSpec::required("description", ParamType::String, "One-paragraph description"),
                ParamSpec::required("triggers", ParamType::Array, "Keywords that select the skill"),
                ParamSpec::required("instructions", ParamType::String, "Markdown execution steps"),
                ParamSpec::optional("sub_agent", ParamType::Object, "{name, instructions, tools}"),
            ],
            effect: ToolEffect::WorkspaceWrite,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
enum Proposal {
    Profile {
        heading: String,
        content: String,
        evidence: String,
        inferred: bool,
        replace: bool,
    },
    Memory {
        heading: String,
        content: String,
        replace: bool,
    },
    Skill(SkillCandidate),
}

fn parse_proposal(call: &ToolCall) -> std::result::Result<Proposal, String> {
    let args: Value = serde_json::from_str(&call.arguments).map_err(|e| format!("arguments are not JSON: {e}"))?;
    let text = |key: &str| args.get(key).and_then(Value::as_str).unwrap_or_default().trim().to_string();
    let replace = match args.get("mode").and_then(Value::as_str).unwrap_or("add") {
        "add" => false,
        "replace" => true,
        other => return Err(format!("unknown mode {other:?}")),
    };
    match call.name.as_str() {
        REVIEW_PROFILE_TOOL => {
            let (heading, content) = (text("heading"), text("content"));
            if heading.is_empty() || content.is_empty() {
                return Err("heading and content are required".into());
            }
            Ok(Proposal::Profile {
                heading,
                content,
                evidence: text("evidence"),
                inferred: args.get("inferred").and_then(Value::as_bool).unwrap_or(false),
                replace,
            })
        }
        REVIEW_MEMORY_TOOL => {
            let (heading, content) = (text("heading"), text("content"));
            if heading.is_empty() || content.is_empty() {
                return Err("heading and content are required".into());
            }
            Ok(Proposal::Memory {
                heading,
                content,
                replace,
            })
        }
        EXTRACT_SKILL => serde_json::from_value::<SkillCandidate>(args)
            .map(Proposal::Skill)
            .map_err(|e| format!("invalid skill candidate: {e}")),
        other => Err(format!("unknown tool {other}")),
    }
}

fn render_review_input(ws: &Workspace, messages: &[Message]) -> Result<String> {
    let mut out = String::from("## Current USER.md\n\n");
    out.push_str(&ws.user_profile()?);
    out.push_str("\n## Current MEMORY.md\n\n");
    out.push_str(&ws.memory()?);
    out.push_str("\n## Existing skills\n\n");
    for skill in ws.skills.iter() {
        out.push_str(&format!("- {}: {}\n", skill.name, skill.description));
    }
    out.push_str("\n## Session transcript\n\n");
    for message in messages {
        let role = match message.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        let content: String = message.content.chars().take(4000).collect();
        out.push_str(&format!("[{role}] {content}\n"));
        for call in &message.tool_calls {
            out.push_str(&format!("  -> {}({})\n", call.name, call.arguments));
        }
    }
    Ok(out)
}

/// Runs the review agent. Its tool calls are collected, never executed.
fn review_session(
    ws: &Workspace,
    messages: &[Message],
    chat: &dyn ChatProvider,
    max_steps: usize,
) -> Result<(Vec<Proposal>, String)> {
    let mut history = vec![Message::user(render_review_input(ws, messages)?)];
    let tools = review_tools();
    let mut proposals = Vec::new();
    let mut text = String::new();
    for _ in 0..max_steps.max(1) {
        let request = ChatRequest {
            purpose: ChatPurpose::Review,
            instructions: REVIEW_INSTRUCTIONS.to_string(),
            messages: history.clone(),
            tools: tools.clone(),
        };
        let reply = chat
            .chat(&request)
            .map_err(|e| Error::EvolutionDeferred(e.to_string()))?;
        if !reply.content.is_empty() {
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str(&reply.content);
        }
        if reply.tool_calls.is_empty() {
            return Ok((proposals, text));
        }
        let mut assistant = Message::assistant_calls(reply.tool_calls.clone());
        assistant.content = reply.content;
        history.push(assistant);
        for call in reply.tool_calls {
            let answer = match parse_proposal(&call) {
                Ok(proposal) => {
                    proposals.push(proposal);
                    "recorded".to_string()
                }
                Err(e) => serde_json::json!({ "error": e }).to_string(),
            };
            history.push(Message::tool(call.id, answer));
        }
    }
    Ok((proposals, text))
}

fn appears_in(haystacks: &[String], needle: &str) -> bool {
    let needle = normalize(needle);
    !needle.is_empty() && haystacks.iter().any(|h| h.contains(&needle))
}

fn already_recorded(doc: &str, heading: &str, fragment: &str) -> bool {
    section_body(doc, heading).is_some_and(|body| normalize(body).contains(&normalize(fragment)))
}

/// Reviews an ended session and applies the outcome.
///
/// A second call for the same session is a no-op. A provider failure returns
/// [`Error::EvolutionDeferred`] before anything is written.
pub fn run_evolution(
    ws: &mut Workspace,
    session_id: &str,
    chat: &dyn ChatProvider,
    embed: Option<&dyn EmbeddingProvider>,
    config: &EvolutionConfig,
) -> Result<EvolutionRun> {
    let record_path = evolution_path(ws, session_id);
    if ws.fs().is_file(&record_path) {
        return Ok(EvolutionRun::AlreadyEvolved);
    }
    let log = SessionLog::new(log_path(&ws.sessions_dir(), session_id), ws.fs().clone());
    if !ws.fs().is_file(log.path()) {
        return Err(Error::SessionNotFound(session_id.to_string()));
    }
    let records = log.read()?;
    if !is_ended(&records) {
        return Err(Error::IllegalPhase {
            expected: "ended".into(),
            found: "open".into(),
        });
    }
    let messages = transcript(&records);
    let (proposals, review_text) = review_session(ws, &messages, chat, config.max_steps)?;

    let user_said: Vec<String> = messages
        .iter()
        .filter(|m| m.role == Role::User)
        .map(|m| normalize(&m.content))
        .collect();
    let profile_doc = ws.user_profile()?;
    let memory_doc = ws.memory()?;
    let mut profile_delta = ProfileDelta::new(Provenance::PostSession);
    let mut memory_delta = ProfileDelta::new(Provenance::PostSession);
    let mut flagged = Vec::new();
    let mut candidates = Vec::new();
    for proposal in proposals {
        match proposal {
            Proposal::Profile {
                heading,
                content,
                evidence,
                inferred,
                replace,
            } => {
                if inferred || !appears_in(&user_said, &evidence) {
                    if !normalize(&profile_doc).contains(&normalize(&content)) {
                        flagged.push(FlaggedFact { heading, content });
                    }
                    continue;
                }
                let fragment = format!("- {content} (user said: \"{}\")", evidence.trim());
                if replace {
                    profile_delta = profile_delta.replace(heading, fragment);
                } else if !already_recorded(&profile_doc, &heading, &content) {
                    profile_delta = profile_delta.add(heading, fragment);
                }
            }
            Proposal::Memory {
                heading,
                content,
                replace,
            } => {
                let fragment = format!("- {content}");
                if replace {
                    memory_delta = memory_delta.replace(heading, fragment);
                } else if !already_recorded(&memory_doc, &heading, &content) {
                    memory_delta = memory_delta.add(heading, fragment);
                }
            }
            Proposal::Skill(candidate) => candidates.push(candidate),
        }
    }

    let now = Utc::now();
    let profile_chars = ws.apply_profile_delta(&profile_delta)?;
    let memory_chars = ws.apply_memory_delta(&memory_delta)?;

    let suggestions = update_observations(ws, session_id, &flagged, config.suggestion_threshold, now)?;

    let mut gate = Vec::new();
    for candidate in &candidates {
        let decision = gate_skill_candidate(
            candidate,
            &ws.skills,
            embed,
            &ws.embeddings,
            config.dedup_threshold,
            now,
        );
        match decision {
            GateDecision::Accept(skill) => {
                let name = skill.name.to_string();
                ws.skills.save_skill(*skill)?;
                gate.push(GateRecord {
                    name,
                    accepted: true,
                    reason: None,
                });
            }
            GateDecision::Reject(reason) => gate.push(GateRecord {
                name: candidate.name.clone(),
                accepted: false,
                reason: Some(reason),
            }),
        }
    }

    let last_skill = records.iter().rev().find_map(|r| match r {
        LogRecord::Usage { skill, .. } => Some(skill.clone()),
        _ => None,
    });
    let meta = last_skill.and_then(|name| ws.skills.get(&name).map(|s| s.meta));
    let reward = compute_reward(session_id, meta.as_ref(), profile_chars, memory_chars, &config.reward);
    tracing::info!(session = session_id, reward = reward.reward, "session evolved");

    let record = EvolutionRecord {
        session_id: session_id.to_string(),
        evolved_at: now,
        delta: EvolutionDelta {
            session_id: session_id.to_string(),
            profile_delta,
            memory_delta,
            new_skills: candidates,
            suggestions,
            flagged,
        },
        gate,
        reward,
        review_text,
    };
    write_json(ws, &record_path, &record)?;
    Ok(EvolutionRun::Applied(Box::new(record)))
}

fn update_observations(
    ws: &Workspace,
    session_id: &str,
    flagged: &[FlaggedFact],
    threshold: usize,
    now: DateTime<Utc>,
) -> Result<Vec<Suggestion>> {
    if flagged.is_empty() {
        return Ok(Vec::new());
    }
    let mut observations: BTreeMap<String, Observation> = read_json(ws, &observations_path(ws))?;
    let mut pending = pending_suggestions(ws)?;
    let mut created = Vec::new();
    for fact in flagged {
        let pattern = fact.pattern();
        let observation = observations.entry(pattern.clone()).or_insert_with(|| Observation {
            heading: fact.heading.clone(),
            content: fact.content.clone(),
            ..Observation::default()
        });
        observation.sessions.insert(session_id.to_string());
        if !observation.suggested && observation.sessions.len() >= threshold.max(1) {
            observation.suggested = true;
            let suggestion = Suggestion {
                id: hex::encode(&Sha256::digest(pattern.as_bytes())[..6]),
                pattern,
                delta: ProfileDelta::new(Provenance::BehaviorSuggestion)
                    .add(observation.heading.clone(), format!("- {}", observation.content)),
                sessions: observation.sessions.iter().cloned().collect(),
                created_at: now,
            };
            pending.push(suggestion.clone());
            created.push(suggestion);
        }
    }
    write_json(ws, &observations_path(ws), &observations)?;
    if !created.is_empty() {
        write_json(ws, &suggestions_path(ws), &pending)?;
    }
    Ok(created)
}

type JobRunner = dyn Fn(&str, &str) + Send + Sync;

#[derive(Default)]
struct QueueState {
    jobs: VecDeque<(String, String)>,
    running: usize,
    completed: usize,
    shutdown: bool,
}

/// Background workers for evolution jobs. The runner is responsible for
/// taking the workspace's writer lock, which serializes jobs per workspace.
pub struct JobQueue {
    state: Arc<(Mutex<QueueState>, Condvar)>,
    workers: Mutex<Vec<thread::JoinHandle<()>>>,
}

impl JobQueue {
    pub fn start(workers: usize, runner: Arc<JobRunner>) -> Arc<Self> {
        let state = Arc::new((Mutex::new(QueueState::default()), Condvar::new()));
        let mut handles = Vec::new();
        for _ in 0..workers.max(1) {
            let state = state.clone();
            let runner = runner.clone();
            handles.push(thread::spawn(move || loop {
                let job = {
                    let (lock, cvar) = &*state;
                    let mut guard = lock.lock().unwrap();
                    loop {
                        if let Some(job) = guard.jobs.pop_front() {
                            guard.running += 1;
                            break Some(job);
                        }
                        if guard.shutdown {
                            break None;
                        }
                        guard = cvar.wait(guard).unwrap();
                    }
                };
                let Some((user, session)) = job else { return };
                runner(&user, &session);
                let (lock, cvar) = &*state;
                let mut guard = lock.lock().unwrap();
                guard.running -= 1;
                guard.completed += 1;
                cvar.notify_all();
            }));
        }
        Arc::new(Self {
            state,
            workers: Mutex::new(handles),
        })
    }

    pub fn enqueue(&self, user_id: &str, session_id: &str) {
        let (lock, cvar) = &*self.state;
        lock.lock()
            .unwrap()
            .jobs
            .push_back((user_id.to_string(), session_id.to_string()));
        cvar.notify_all();
    }

    pub fn completed(&self) -> usize {
        self.state.0.lock().unwrap().completed
    }

    /// Blocks until no job is queued or running.
    pub fn wait_idle(&self) {
        let (lock, cvar) = &*self.state;
        let mut guard = lock.lock().unwrap();
        while !guard.jobs.is_empty() || guard.running > 0 {
            guard = cvar.wait(guard).unwrap();
        }
    }

    pub fn shutdown(&self) {
        {
            let (lock, cvar) = &*self.state;
            lock.lock().unwrap().shutdown = true;
            cvar.notify_all();
        }
        for handle in self.workers.lock().unwrap().drain(..) {
            let _ = handle.join();
        }
    }
}

impl EvolutionScheduler for JobQueue {
    fn schedule(&self, user_id: &str, session_id: &str) {
        self.enqueue(user_id, session_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::EmbeddingCache;
    use crate::provider::{AssistantReply, MockChatProvider, MockEmbeddingProvider};
    use crate::runtime::Harness;
    use crate::skills::MaturityLevel;
    use crate::workspace::init_workspace;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn meta(usage: u64, success: u64) -> SkillMeta {
        let mut m = SkillMeta::new(Utc::now());
        m.usage_count = usage;
        m.success_count = success;
        m
    }

    #[test]
    fn reward_examples() {
        let config = RewardConfig::default();
        assert_eq!(compute_reward("s", None, 0, 0, &config).reward, 0.0);
        let proficient = meta(10, 10);
        assert_eq!(proficient.maturity(), MaturityLevel::Proficient);
        let r = compute_reward("s", Some(&proficient), 0, 0, &config);
        assert!((r.reward - 1.0 / 3.0).abs() < 1e-12);
        let only_maturity = RewardConfig {
            weights: RewardWeights::new(1.0, 0.0, 0.0).unwrap(),
            ..config
        };
        let r = compute_reward("s", Some(&meta(4, 4)), 500, 500, &only_maturity);
        assert!((r.reward - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(compute_reward("s", None, 5000, 0, &config).profile_term, 1.0);
        assert!(RewardWeights::new(0.5, 0.5, 0.5).is_err());
        assert!(RewardWeights::new(-0.5, 1.0, 0.5).is_err());
    }

    #[test]
    fn cumulative_examples() {
        let rec = |r: f64| RewardRecord {
            session_id: String::new(),
            maturity_term: 0.0,
            profile_term: 0.0,
            memory_term: 0.0,
            weights: RewardWeights::default(),
            reward: r,
        };
        assert_eq!(cumulative_reward(&[], 0.9), 0.0);
        assert_eq!(cumulative_reward(&[rec(0.4)], 1.0), 0.4);
        assert!((cumulative_reward(&[rec(0.3), rec(0.6)], 0.5) - 0.30).abs() < 1e-12);
    }

    fn candidate(name: &str, desc: &str, triggers: &[&str]) -> SkillCandidate {
        SkillCandidate {
            name: name.into(),
            description: desc.into(),
            triggers: triggers.iter().map(|t| t.to_string()).collect(),
            instructions: "1. Do it.".into(),
            sub_agent: None,
        }
    }

    #[test]
    fn gate_reasons() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = init_workspace(tmp.path(), "u").unwrap();
        let cache = EmbeddingCache::in_memory();
        let gate = |c: &SkillCandidate| gate_skill_candidate(c, &ws.skills, None, &cache, 0.9, Utc::now());
        let code = |d: GateDecision| match d {
            GateDecision::Reject(r) => r.code(),
            GateDecision::Accept(_) => "accept",
        };
        assert_eq!(code(gate(&candidate("quotation", "x", &["y"]))), "name_collision");
        assert_eq!(code(gate(&candidate("Bad Name", "x", &["y"]))), "invalid_name");
        assert_eq!(code(gate(&candidate("new", "x", &[]))), "no_triggers");
        assert_eq!(code(gate(&candidate("new", " ", &["y"]))), "empty_description");
        assert_eq!(code(gate(&candidate("new", "x", &["a", "A"]))), "invalid_triggers");
        let mut no_instr = candidate("new", "x", &["y"]);
        no_instr.instructions.clear();
        assert_eq!(code(gate(&no_instr)), "empty_instructions");
        match gate(&candidate("new", "x", &["y"])) {
            GateDecision::Accept(skill) => {
                skill.validate().unwrap();
                assert_eq!((skill.meta.usage_count, skill.meta.success_count), (0, 0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gate_rejects_near_duplicates() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = init_workspace(tmp.path(), "u").unwrap();
        let existing = ws.skills.get("quotation").unwrap().description.clone();
        let v = vec![1.0, 0.0];
        let near = vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt()];
        let mut embed = MockEmbeddingProvider::new(2).with_vector("dup desc", near).with_vector(existing, v);
        for skill in ws.skills.iter().filter(|s| s.name.as_str() != "quotation") {
            embed.insert(skill.description.clone(), vec![0.0, 1.0]);
        }
        let decision = gate_skill_candidate(
            &candidate("new-one", "dup desc", &["zz"]),
            &ws.skills,
            Some(&embed),
            &EmbeddingCache::in_memory(),
            0.9,
            Utc::now(),
        );
        match decision {
            GateDecision::Reject(RejectReason::NearDuplicate { of, similarity }) => {
                assert_eq!(of, "quotation");
                assert!((similarity - 0.95).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stale_cached_vectors_are_re_embedded() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = init_workspace(tmp.path(), "u").unwrap();
        let cache = EmbeddingCache::in_memory();
        let wide = MockEmbeddingProvider::new(8);
        for skill in ws.skills.iter() {
            cache.vector_for(skill, &wide).unwrap();
        }
        struct SameId(MockEmbeddingProvider);
        impl EmbeddingProvider for SameId {
            fn model_id(&self) -> &str {
                "mock-embedding-8"
            }
            fn embed(&self, text: &str) -> Result<Vec<f64>, crate::ProviderError> {
                self.0.embed(text)
            }
        }
        let existing = ws.skills.get("quotation").unwrap().description.clone();
        let narrow = SameId(MockEmbeddingProvider::new(3).with_vector(existing.clone(), vec![1.0, 0.0, 0.0]));
        let decision = gate_skill_candidate(
            &candidate("new-one", &existing, &["zz"]),
            &ws.skills,
            Some(&narrow),
            &cache,
            0.9,
            Utc::now(),
        );
        assert!(matches!(decision, GateDecision::Reject(RejectReason::NearDuplicate { .. })), "{decision:?}");
    }

    fn ended_session(ws: &mut Workspace, inputs: &[&str]) -> String {
        let harness = Harness::mock();
        let mut state = harness.open_session(ws).unwrap();
        for input in inputs {
            harness.run_turn(ws, &mut state, input, &mut |_| {}).unwrap();
        }
        harness.end_session(&mut state).unwrap();
        state.session_id
    }

    fn call(id: &str, name: &str, args: Value) -> ToolCall {
        ToolCall::new(id, name, args.to_string())
    }

    #[test]
    fn explicit_fact_reaches_profile_and_rerun_is_noop() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = init_workspace(tmp.path(), "u").unwrap();
        let sid = ended_session(&mut ws, &["Our main product is solar inverters."]);
        let chat = MockChatProvider::new();
        chat.push_reply(
            ChatPurpose::Review,
            AssistantReply::calls(vec![call(
                "r1",
                REVIEW_PROFILE_TOOL,
                json!({"heading": "Main Products", "content": "Solar inverters", "evidence": "our main product is solar inverters"}),
            )]),
        );
        chat.push_reply(ChatPurpose::Review, AssistantReply::text("one fact"));
        let run = run_evolution(&mut ws, &sid, &chat, None, &EvolutionConfig::default()).unwrap();
        let EvolutionRun::Applied(record) = run else { panic!() };
        assert_eq!(record.delta.profile_delta.additions.len(), 1);
        let doc = ws.user_profile().unwrap();
        assert!(section_body(&doc, "Main Products").unwrap().contains("Solar inverters"));
        let before = std::fs::read(ws.layer_path(crate::workspace::Layer::User)).unwrap();
        let again = run_evolution(&mut ws, &sid, &chat, None, &EvolutionConfig::default()).unwrap();
        assert_eq!(again, EvolutionRun::AlreadyEvolved);
        assert_eq!(std::fs::read(ws.layer_path(crate::workspace::Layer::User)).unwrap(), before);
    }

    #[test]
    fn unquoted_fact_is_not_applied() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = init_workspace(tmp.path(), "u").unwrap();
        let sid = ended_session(&mut ws, &["hello"]);
        let chat = MockChatProvider::new();
        chat.push_reply(
            ChatPurpose::Review,
            AssistantReply::calls(vec![call(
                "r1",
                REVIEW_PROFILE_TOOL,
                json!({"heading": "Main Products", "content": "LED lamps", "evidence": "we sell LED lamps"}),
            )]),
        );
        chat.push_reply(ChatPurpose::Review, AssistantReply::text("done"));
        let before = ws.user_profile().unwrap();
        let EvolutionRun::Applied(record) =
            run_evolution(&mut ws, &sid, &chat, None, &EvolutionConfig::default()).unwrap()
        else {
            panic!()
        };
        assert!(record.delta.profile_delta.is_empty());
        assert_eq!(record.delta.flagged.len(), 1);
        assert_eq!(ws.user_profile().unwrap(), before);
    }

    #[test]
    fn null_review_yields_empty_deltas() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = init_workspace(tmp.path(), "u").unwrap();
        let sid = ended_session(&mut ws, &["hi"]);
        let chat = MockChatProvider::synthetic();
        let EvolutionRun::Applied(record) =
            run_evolution(&mut ws, &sid, &chat, None, &EvolutionConfig::default()).unwrap()
        else {
            panic!()
        };
        assert!(record.delta.profile_delta.is_empty() && record.delta.memory_delta.is_empty());
        assert_eq!(record.reward.reward, 0.0);
    }

    #[test]
    fn provider_failure_defers() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = init_workspace(tmp.path(), "u").unwrap();
        let sid = ended_session(&mut ws, &["hi"]);
        let chat = MockChatProvider::new();
        chat.set_unavailable(true);
        let err = run_evolution(&mut ws, &sid, &chat, None, &EvolutionConfig::default());
        assert!(matches!(err, Err(Error::EvolutionDeferred(_))));
        assert!(!evolution_path(&ws, &sid).exists());
    }

    #[test]
    fn open_session_cannot_evolve() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = init_workspace(tmp.path(), "u").unwrap();
        let harness = Harness::mock();
        let state = harness.open_session(&ws).unwrap();
        let err = run_evolution(&mut ws, &state.session_id, &MockChatProvider::synthetic(), None, &EvolutionConfig::default());
        assert!(matches!(err, Err(Error::IllegalPhase { .. })));
    }

    #[test]
    fn repeated_inference_becomes_a_suggestion() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = init_workspace(tmp.path(), "u").unwrap();
        let flagged = || {
            let chat = MockChatProvider::new();
            chat.push_reply(
                ChatPurpose::Review,
                AssistantReply::calls(vec![call(
                    "r1",
                    REVIEW_PROFILE_TOOL,
                    json!({"heading": "Preferences", "content": "Prefers FOB terms", "evidence": "", "inferred": true}),
                )]),
            );
            chat.push_reply(ChatPurpose::Review, AssistantReply::text("done"));
            chat
        };
        let s1 = ended_session(&mut ws, &["hi"]);
        run_evolution(&mut ws, &s1, &flagged(), None, &EvolutionConfig::default()).unwrap();
        assert!(pending_suggestions(&ws).unwrap().is_empty());
        let s2 = ended_session(&mut ws, &["hello"]);
        run_evolution(&mut ws, &s2, &flagged(), None, &EvolutionConfig::default()).unwrap();
        let pending = pending_suggestions(&ws).unwrap();
        assert_eq!(pending.len(), 1);
        assert!(!pending[0].delta.confirmed);

        let before = ws.user_profile().unwrap();
        let id = pending[0].id.clone();
        assert!(confirm_suggestion(&mut ws, &id, true).unwrap() > 0);
        assert_ne!(ws.user_profile().unwrap(), before);
        assert!(matches!(
            confirm_suggestion(&mut ws, &id, true),
            Err(Error::SuggestionNotFound(_))
        ));
    }

    #[test]
    fn job_queue_runs_each_job_once() {
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let queue = JobQueue::start(2, Arc::new(move |_: &str, _: &str| {
            c.fetch_add(1, Ordering::SeqCst);
        }));
        for i in 0..5 {
            queue.enqueue("u", &format!("s{i}"));
        }
        queue.wait_idle();
        assert_eq!(count.load(Ordering::SeqCst), 5);
        assert_eq!(queue.completed(), 5);
        queue.shutdown();
    }
}
