//! The online loop: session state, turn execution, sub-agent delegation and
//! session end.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::context::{
    build_instructions, compress_history, inject_skill, push_message, should_compress, CharHeuristic,
    CompressionState, ContextBudget, MemoryLayers, TokenEstimator,
};
use crate::error::{Error, ProviderError, Result};
use crate::matcher::{match_skill, Degradation, MatchOutcome, MatchType, MatcherConfig};
use crate::message::Message;
use crate::provider::{ChatProvider, ChatPurpose, ChatRequest, EmbeddingProvider, MockChatProvider, MockEmbeddingProvider};
use crate::session_log::{history_digest, log_path, LogRecord, MetaDelta, SessionLog};
use crate::skills::{Skill, SkillMeta, SkillsView};
use crate::tools::{ToolContext, ToolRegistry};
use crate::workspace::{Workspace, TEMPLATE_MARKER};

pub const DEFAULT_MAX_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionPhase {
    Open,
    Ended,
    Evolved,
}

impl fmt::Display for SessionPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionPhase::Open => "open",
            SessionPhase::Ended => "ended",
            SessionPhase::Evolved => "evolved",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvolutionMode {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub matcher: MatcherConfig,
    pub budget: ContextBudget,
    pub max_steps: usize,
    pub evolution_mode: EvolutionMode,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            matcher: MatcherConfig::default(),
            budget: ContextBudget::default(),
            max_steps: DEFAULT_MAX_STEPS,
            evolution_mode: EvolutionMode::default(),
        }
    }
}

/// USER.md and MEMORY.md as seen by the session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileView {
    pub user: String,
    pub memory: String,
}

impl ProfileView {
    pub fn read(ws: &Workspace) -> Result<Self> {
        Ok(Self {
            user: ws.user_profile()?,
            memory: ws.memory()?,
        })
    }

    pub fn needs_initial_guidance(&self) -> bool {
        self.user.lines().any(|l| l.trim() == TEMPLATE_MARKER)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    /// Index of the turn's user message; feedback addresses turns by it.
    pub turn_index: u64,
    pub skill_used: Option<String>,
    pub success: bool,
    pub feedback: Option<bool>,
}

impl TurnRecord {
    /// Explicit feedback wins over the heuristic verdict.
    pub fn effective_success(&self) -> bool {
        self.feedback.unwrap_or(self.success)
    }
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: String,
    pub user_id: String,
    pub history: Vec<Message>,
    pub profile: ProfileView,
    pub skills_view: SkillsView,
    pub compression: CompressionState,
    pub active_skill: Option<String>,
    pub phase: SessionPhase,
    pub turns: Vec<TurnRecord>,
    pub log: Option<SessionLog>,
}

impl SessionState {
    pub fn require_phase(&self, expected: SessionPhase) -> Result<()> {
        if self.phase != expected {
            return Err(Error::IllegalPhase {
                expected: expected.to_string(),
                found: self.phase.to_string(),
            });
        }
        Ok(())
    }

    fn log(&self, records: &[LogRecord]) -> Result<()> {
        match &self.log {
            Some(log) => log.append(records),
            None => Ok(()),
        }
    }

    /// Usage and success counted per skill over this session's turns.
    pub fn skill_deltas(&self) -> BTreeMap<String, MetaDelta> {
        let mut deltas: BTreeMap<String, MetaDelta> = BTreeMap::new();
        for turn in &self.turns {
            if let Some(skill) = &turn.skill_used {
                let entry = deltas.entry(skill.clone()).or_default();
                entry.usage += 1;
                entry.success += u64::from(turn.effective_success());
            }
        }
        deltas
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TurnEvent {
    MatchResult {
        stage: Option<MatchType>,
        skill: Option<String>,
        confidence: Option<f64>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        degraded: Vec<Degradation>,
    },
    ToolStarted {
        name: String,
        call_id: String,
    },
    ToolFinished {
        name: String,
        call_id: String,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Delta {
        text: String,
    },
    Compression {
        level: u32,
        assets: usize,
        tokens_before: usize,
        tokens_after: usize,
    },
    TurnSummary {
        turn: u32,
        turn_index: u64,
        skill_used: Option<String>,
        success: bool,
        token_estimate: usize,
    },
    Error {
        message: String,
    },
}

impl TurnEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TurnEvent::MatchResult { .. } => "match_result",
            TurnEvent::ToolStarted { .. } => "tool_started",
            TurnEvent::ToolFinished { .. } => "tool_finished",
            TurnEvent::Delta { .. } => "delta",
            TurnEvent::Compression { .. } => "compression",
            TurnEvent::TurnSummary { .. } => "turn_summary",
            TurnEvent::Error { .. } => "error",
        }
    }

    fn from_match(outcome: &MatchOutcome) -> Self {
        TurnEvent::MatchResult {
            stage: outcome.result.as_ref().map(|r| r.match_type),
            skill: outcome.result.as_ref().map(|r| r.skill_name.clone()),
            confidence: outcome.result.as_ref().map(|r| r.confidence),
            degraded: outcome.degraded.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolErrorRecord {
    pub tool: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub level: u32,
    pub assets: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub turn: u32,
    pub turn_index: u64,
    pub messages_appended: Vec<Message>,
    pub tool_errors: Vec<ToolErrorRecord>,
    pub provider_error: Option<String>,
    pub success: bool,
    pub skill_used: Option<String>,
    pub matched: MatchOutcome,
    pub compression: Option<CompressionReport>,
    pub compression_error: Option<String>,
    pub token_estimate: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoopOutcome {
    pub steps: usize,
    pub tool_errors: Vec<ToolErrorRecord>,
    pub truncated: bool,
}

pub struct LoopSpec<'a> {
    pub instructions: &'a str,
    pub purpose: ChatPurpose,
    pub max_steps: usize,
    /// Emit assistant text as `Delta` events while it is generated.
    pub stream: bool,
}

pub fn truncation_notice(max_steps: usize) -> String {
    format!("[truncated] Stopped after {max_steps} steps without a final answer.")
}

/// Alternates model calls and tool executions, appending to `history`, until
/// the model answers without tool calls or `max_steps` calls were made.
pub fn react_loop(
    spec: &LoopSpec<'_>,
    history: &mut Vec<Message>,
    tools: &ToolRegistry,
    ctx: &mut ToolContext<'_>,
    chat: &dyn ChatProvider,
    sink: &mut dyn FnMut(TurnEvent),
) -> Result<LoopOutcome, ProviderError> {
    let mut outcome = LoopOutcome::default();
    let definitions = tools.definitions();
    for _ in 0..spec.max_steps.max(1) {
        let request = ChatRequest {
            purpose: spec.purpose,
            instructions: spec.instructions.to_string(),
            messages: history.clone(),
            tools: definitions.clone(),
        };
        let reply = if spec.stream {
            chat.chat_streamed(&request, &mut |text| {
                sink(TurnEvent::Delta { text: text.to_string() })
            })?
        } else {
            chat.chat(&request)?
        };
        outcome.steps += 1;
        if reply.tool_calls.is_empty() {
            push_message(history, Message::assistant(reply.content));
            return Ok(outcome);
        }
        let calls = reply.tool_calls.clone();
        let mut message = Message::assistant_calls(reply.tool_calls);
        message.content = reply.content;
        push_message(history, message);
        for call in calls {
            sink(TurnEvent::ToolStarted {
                name: call.name.clone(),
                call_id: call.id.clone(),
            });
            match tools.invoke(&call.name, &call.arguments, ctx) {
                Ok(output) => {
                    let mut reply = Message::tool(call.id.clone(), output.content);
                    reply.key_data = output.key_data;
                    push_message(history, reply);
                    sink(TurnEvent::ToolFinished {
                        name: call.name,
                        call_id: call.id,
                        ok: true,
                        error: None,
                    });
                }
                Err(e) => {
                    push_message(history, Message::tool(call.id.clone(), e.to_content()));
                    outcome.tool_errors.push(ToolErrorRecord {
                        tool: call.name.clone(),
                        error: e.to_string(),
                    });
                    sink(TurnEvent::ToolFinished {
                        name: call.name,
                        call_id: call.id,
                        ok: false,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    outcome.truncated = true;
    push_message(history, Message::assistant(truncation_notice(spec.max_steps)));
    Ok(outcome)
}

/// Runs the skill's sub-agent over a scratch copy of `history` and appends
/// only its final answer. The allowlist is resolved before any model call.
pub fn delegate_to_sub_agent(
    history: &mut Vec<Message>,
    skill: &Skill,
    tools: &ToolRegistry,
    ctx: &mut ToolContext<'_>,
    chat: &dyn ChatProvider,
    max_steps: usize,
    sink: &mut dyn FnMut(TurnEvent),
) -> Result<LoopOutcome> {
    if !skill.requires_sub_agent {
        return Err(Error::SubAgentConfig(format!("{} does not declare a sub-agent", skill.name)));
    }
    let spec = skill
        .sub_agent
        .as_ref()
        .ok_or_else(|| Error::SubAgentConfig(format!("{} has no sub_agent block", skill.name)))?;
    let allowed = tools.subset(&spec.tools)?;
    let instructions = format!("You are {}.\n\n{}", spec.name, spec.instructions);
    let mut scratch = history.clone();
    let loop_spec = LoopSpec {
        instructions: &instructions,
        purpose: ChatPurpose::SubAgent,
        max_steps,
        stream: false,
    };
    let outcome = react_loop(&loop_spec, &mut scratch, &allowed, ctx, chat, sink)?;
    let answer = scratch.pop().map(|m| m.content).unwrap_or_default();
    sink(TurnEvent::Delta { text: answer.clone() });
    push_message(history, Message::assistant(answer));
    Ok(outcome)
}

/// What a turn produced, as input to [`apply_transition`].
#[derive(Debug, Clone)]
pub struct TurnEffects {
    pub appended: Vec<Message>,
    /// Fresh profile view when a real-time profile or memory tool ran.
    pub profile: Option<ProfileView>,
    /// Fresh store snapshot when skill metadata or skills changed.
    pub skills: Option<SkillsView>,
    pub active_skill: Option<String>,
    pub record: TurnRecord,
}

/// `h' = append(h, a, result)`, `u'` and the skills view replaced only when
/// the turn refreshed them. Compression is applied separately.
pub fn apply_transition(state: &SessionState, effects: &TurnEffects) -> SessionState {
    let mut next = state.clone();
    next.history.extend(effects.appended.iter().cloned());
    if let Some(profile) = &effects.profile {
        next.profile = profile.clone();
    }
    if let Some(skills) = &effects.skills {
        next.skills_view = skills.clone();
    }
    next.active_skill = effects.active_skill.clone();
    next.turns.push(effects.record.clone());
    next
}

/// Receives auto-mode evolution requests at session end.
pub trait EvolutionScheduler: Send + Sync {
    fn schedule(&self, user_id: &str, session_id: &str);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvolutionDisposition {
    Scheduled,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub skill: String,
    pub changed: bool,
    pub meta: SkillMeta,
}

/// Providers, tools and settings shared by all sessions.
pub struct Harness {
    pub config: RuntimeConfig,
    pub chat: Arc<dyn ChatProvider>,
    pub embed: Arc<dyn EmbeddingProvider>,
    pub tools: ToolRegistry,
    pub estimator: Arc<dyn TokenEstimator>,
    pub scheduler: Option<Arc<dyn EvolutionScheduler>>,
}

impl Harness {
    pub fn new(chat: Arc<dyn ChatProvider>, embed: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            config: RuntimeConfig::default(),
            chat,
            embed,
            tools: ToolRegistry::with_builtins(),
            estimator: Arc::new(CharHeuristic),
            scheduler: None,
        }
    }

    /// Synthetic chat and hashed embeddings; no network.
    pub fn mock() -> Self {
        Self::new(
            Arc::new(MockChatProvider::synthetic().without_request_log()),
            Arc::new(MockEmbeddingProvider::new(64)),
        )
    }

    pub fn with_config(mut self, config: RuntimeConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_tools(mut self, tools: ToolRegistry) -> Self {
        self.tools = tools;
        self
    }

    pub fn with_scheduler(mut self, scheduler: Arc<dyn EvolutionScheduler>) -> Self {
        self.scheduler = Some(scheduler);
        self
    }

    pub fn open_session(&self, ws: &Workspace) -> Result<SessionState> {
        self.open_session_with_id(ws, uuid::Uuid::now_v7().to_string())
    }

    pub fn open_session_with_id(&self, ws: &Workspace, session_id: String) -> Result<SessionState> {
        let log = SessionLog::new(log_path(&ws.sessions_dir(), &session_id), ws.fs().clone());
        let state = SessionState {
            session_id: session_id.clone(),
            user_id: ws.user_id().to_string(),
            history: Vec::new(),
            profile: ProfileView::read(ws)?,
            skills_view: ws.skills.snapshot(),
            compression: CompressionState::default(),
            active_skill: None,
            phase: SessionPhase::Open,
            turns: Vec::new(),
            log: Some(log),
        };
        state.log(&[LogRecord::Start {
            session_id,
            user_id: state.user_id.clone(),
            started_at: Utc::now(),
        }])?;
        Ok(state)
    }

    /// One user turn: match, inject, execute (main agent or sub-agent),
    /// transition, then compress when over budget. Provider and tool failures
    /// end up in the result; only phase and log errors are returned as `Err`.
    pub fn run_turn(
        &self,
        ws: &mut Workspace,
        state: &mut SessionState,
        user_input: &str,
        sink: &mut dyn FnMut(TurnEvent),
    ) -> Result<TurnResult> {
        state.require_phase(SessionPhase::Open)?;
        let turn = state.turns.len() as u32 + 1;
        let mut h = state.history.clone();
        let start = h.len();
        push_message(&mut h, Message::user(user_input));
        let turn_index = h[start].turn_index;

        let matched = if user_input.trim().is_empty() {
            MatchOutcome::default()
        } else {
            match_skill(
                user_input,
                &ws.skills,
                &self.config.matcher,
                &ws.embeddings,
                self.embed.as_ref(),
                self.chat.as_ref(),
            )
        };
        sink(TurnEvent::from_match(&matched));
        let skill = matched
            .result
            .as_ref()
            .and_then(|r| ws.skills.get(&r.skill_name).cloned());
        if let Some(skill) = &skill {
            inject_skill(&mut h, skill);
        }
        let active_skill = skill
            .as_ref()
            .map(|s| s.name.to_string())
            .or_else(|| state.active_skill.clone());

        let mut tool_errors = Vec::new();
        let mut failure: Option<String> = None;
        let mut ctx = ToolContext::new(ws, active_skill.clone());
        match &skill {
            Some(skill) if skill.requires_sub_agent => {
                match delegate_to_sub_agent(
                    &mut h,
                    skill,
                    &self.tools,
                    &mut ctx,
                    self.chat.as_ref(),
                    self.config.max_steps,
                    sink,
                ) {
                    Ok(outcome) => tool_errors = outcome.tool_errors,
                    Err(e) => failure = Some(e.to_string()),
                }
            }
            _ => {
                let active = active_skill.as_deref().and_then(|n| ctx.workspace.skills.get(n)).cloned();
                let layers = MemoryLayers {
                    soul: ctx.workspace.soul().unwrap_or_default(),
                    user: state.profile.user.clone(),
                    memory: state.profile.memory.clone(),
                };
                let instructions =
                    build_instructions(&layers, active.as_ref(), state.profile.needs_initial_guidance());
                let spec = LoopSpec {
                    instructions: &instructions,
                    purpose: ChatPurpose::Agent,
                    max_steps: self.config.max_steps,
                    stream: true,
                };
                match react_loop(&spec, &mut h, &self.tools, &mut ctx, self.chat.as_ref(), sink) {
                    Ok(outcome) => tool_errors = outcome.tool_errors,
                    Err(e) => failure = Some(e.to_string()),
                }
            }
        }
        let profile_changed = ctx.profile_changed || ctx.memory_changed;
        let mut skills_changed = ctx.skills_changed;
        drop(ctx);

        if let Some(err) = &failure {
            sink(TurnEvent::Error { message: err.clone() });
            push_message(&mut h, Message::assistant(format!("[error] {err}")));
        }
        let success = failure.is_none() && tool_errors.is_empty();
        let skill_used = skill.as_ref().map(|s| s.name.to_string());
        let mut records: Vec<LogRecord> = h[start..]
            .iter()
            .map(|m| LogRecord::Message { message: m.clone() })
            .collect();
        if let Some(name) = &skill_used {
            match ws.skills.record_usage(name, success) {
                Ok(_) => {
                    skills_changed = true;
                    records.push(LogRecord::Usage {
                        turn,
                        skill: name.clone(),
                        success,
                    });
                }
                Err(e) => {
                    tracing::warn!(skill = %name, error = %e, "usage not recorded");
                    sink(TurnEvent::Error {
                        message: format!("usage of {name} not recorded: {e}"),
                    });
                }
            }
        }

        let effects = TurnEffects {
            appended: h.split_off(start),
            profile: if profile_changed { ProfileView::read(ws).ok() } else { None },
            skills: skills_changed.then(|| ws.skills.snapshot()),
            active_skill,
            record: TurnRecord {
                turn,
                turn_index,
                skill_used: skill_used.clone(),
                success,
                feedback: None,
            },
        };
        *state = apply_transition(state, &effects);

        let mut compression = None;
        let mut compression_error = None;
        if should_compress(&state.history, &self.config.budget, self.estimator.as_ref()) {
            let before = self.estimator.estimate(&state.history);
            match compress_history(
                &state.history,
                &state.compression,
                &self.config.budget,
                self.chat.as_ref(),
                self.estimator.as_ref(),
            ) {
                Ok((history, next)) => {
                    let report = CompressionReport {
                        level: next.level,
                        assets: next.asset_index.len(),
                        tokens_before: before,
                        tokens_after: self.estimator.estimate(&history),
                    };
                    records.push(LogRecord::Checkpoint {
                        message: history[0].clone(),
                        level: next.level,
                        retained_from: next.retained_from,
                        asset_index: next.asset_index.clone(),
                    });
                    state.history = history;
                    state.compression = next;
                    sink(TurnEvent::Compression {
                        level: report.level,
                        assets: report.assets,
                        tokens_before: report.tokens_before,
                        tokens_after: report.tokens_after,
                    });
                    compression = Some(report);
                }
                Err(e) => {
                    tracing::warn!(error = %e, "history left uncompressed");
                    sink(TurnEvent::Error { message: e.to_string() });
                    compression_error = Some(e.to_string());
                }
            }
        }

        let token_estimate = self.estimator.estimate(&state.history);
        records.push(LogRecord::TurnEnd {
            turn,
            turn_index,
            skill_used: skill_used.clone(),
            success,
            message_count: state.history.len(),
            compression_level: state.compression.level,
            history_digest: history_digest(&state.history),
        });
        state.log(&records)?;
        sink(TurnEvent::TurnSummary {
            turn,
            turn_index,
            skill_used: skill_used.clone(),
            success,
            token_estimate,
        });
        Ok(TurnResult {
            turn,
            turn_index,
            messages_appended: effects.appended,
            tool_errors,
            provider_error: failure,
            success,
            skill_used,
            matched,
            compression,
            compression_error,
            token_estimate,
        })
    }

    /// Overrides the success verdict of the turn whose user message has
    /// `turn_index`, amending the skill's success count.
    pub fn feedback(
        &self,
        ws: &mut Workspace,
        state: &mut SessionState,
        turn_index: u64,
        positive: bool,
    ) -> Result<FeedbackOutcome> {
        state.require_phase(SessionPhase::Open)?;
        let record = state
            .turns
            .iter()
            .find(|t| t.turn_index == turn_index)
            .cloned()
            .ok_or(Error::TurnNotFound(turn_index))?;
        let skill = record.skill_used.clone().ok_or(Error::TurnWithoutSkill(turn_index))?;
        let from = record.effective_success();
        if from == positive {
            let meta = ws
                .skills
                .get(&skill)
                .map(|s| s.meta)
                .ok_or_else(|| Error::SkillNotFound(skill.clone()))?;
            if let Some(t) = state.turns.iter_mut().find(|t| t.turn_index == turn_index) {
                t.feedback = Some(positive);
            }
            return Ok(FeedbackOutcome {
                skill,
                changed: false,
                meta,
            });
        }
        let meta = ws.skills.amend_usage(&skill, from, positive)?;
        if let Some(t) = state.turns.iter_mut().find(|t| t.turn_index == turn_index) {
            t.feedback = Some(positive);
        }
        state.skills_view = ws.skills.snapshot();
        state.log(&[LogRecord::Feedback {
            turn: record.turn,
            skill: skill.clone(),
            from,
            to: positive,
        }])?;
        Ok(FeedbackOutcome {
            skill,
            changed: true,
            meta,
        })
    }

    /// Closes the session log and schedules evolution in auto mode.
    pub fn end_session(&self, state: &mut SessionState) -> Result<EvolutionDisposition> {
        state.require_phase(SessionPhase::Open)?;
        state.log(&[LogRecord::Ended {
            ended_at: Utc::now(),
            turns: state.turns.len() as u32,
            message_count: state.history.len(),
            compression_level: state.compression.level,
            history_digest: history_digest(&state.history),
            skill_deltas: state.skill_deltas(),
        }])?;
        state.phase = SessionPhase::Ended;
        match (&self.scheduler, self.config.evolution_mode) {
            (Some(scheduler), EvolutionMode::Auto) => {
                scheduler.schedule(&state.user_id, &state.session_id);
                Ok(EvolutionDisposition::Scheduled)
            }
            _ => Ok(EvolutionDisposition::Pending),
        }
    }
}
