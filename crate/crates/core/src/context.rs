//! Context assembly: skill injection, instruction building, token budgeting
//! and asset-preserving history compression.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{Message, Role, ToolCall};
use crate::provider::{ChatProvider, ChatPurpose, ChatRequest};
use crate::skills::Skill;
use crate::workspace::Workspace;

/// Section headings of a compression summary, in order.
pub const SUMMARY_HEADINGS: [&str; 9] = [
    "Session Intent",
    "Key Facts & Data",
    "Decisions Made",
    "Actions Taken",
    "Tool & Skill Usage",
    "Open Tasks",
    "User Preferences Observed",
    "Errors & Corrections",
    "Asset References",
];

pub const SKILL_LOADER: &str = "skill_loader";
pub const SKILL_LOAD_ID: &str = "skill_load";
pub const CHECKPOINT_PREFIX: &str = "[context checkpoint";

pub const GUIDANCE_DIRECTIVE: &str = "After completing each task, append 1-2 short guiding \
suggestions for what the user could do next.";

pub const ONBOARDING_DIRECTIVE: &str = "This user's profile is still empty. Early in the \
conversation, ask briefly about their main products and their target markets, and record \
explicit answers with the update_user_profile tool.";

/// Scheme-prefixed URLs; trailing sentence punctuation is trimmed afterwards.
pub const URL_PATTERN: &str = r#"https?://[^\s<>"'`()\[\]{}]+"#;
/// Markdown image syntax, capturing the target.
pub const MARKDOWN_IMAGE_PATTERN: &str = r#"!\[[^\]]*\]\(\s*([^)\s]+)(?:\s+"[^"]*")?\s*\)"#;
/// Bare relative image paths that start a token.
pub const IMAGE_PATH_PATTERN: &str =
    r#"(?i)(?:^|[\s(\["'])((?:[a-z0-9_.~-]+/)*[a-z0-9_.~-]+\.(?:png|jpe?g|gif|webp|svg|bmp))\b"#;
const ASSET_LINE_PATTERN: &str = r"^- \[([a-z_]+)\] (.+) \(turn (\d+)\)$";

static URL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(URL_PATTERN).unwrap());
static MD_IMAGE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(MARKDOWN_IMAGE_PATTERN).unwrap());
static IMAGE_PATH_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(IMAGE_PATH_PATTERN).unwrap());
static ASSET_LINE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(ASSET_LINE_PATTERN).unwrap());

/// Index for the next message appended to `history`.
pub fn next_turn_index(history: &[Message]) -> u64 {
    history.last().map_or(0, |m| m.turn_index + 1)
}

/// Stamps `message` with the next index and appends it.
pub fn push_message(history: &mut Vec<Message>, message: Message) {
    let index = next_turn_index(history);
    history.push(message.at(index));
}

/// The first of `skill_load`, `skill_load_2`, ... not yet used in `history`.
pub fn next_skill_call_id(history: &[Message]) -> String {
    let used: HashSet<&str> = history
        .iter()
        .flat_map(|m| m.tool_calls.iter().map(|c| c.id.as_str()))
        .collect();
    if !used.contains(SKILL_LOAD_ID) {
        return SKILL_LOAD_ID.to_string();
    }
    (2..)
        .map(|n| format!("{SKILL_LOAD_ID}_{n}"))
        .find(|id| !used.contains(id.as_str()))
        .unwrap()
}

/// Skill description, instructions and the names of its references. Reference
/// bodies are not inlined; the model loads them with `load_skill_reference`.
pub fn format_skill(skill: &Skill) -> String {
    let mut out = format!("# Skill: {}\n\n{}\n\n## Instructions\n\n", skill.name, skill.description.trim());
    out.push_str(skill.instructions.trim());
    out.push('\n');
    if !skill.references.is_empty() {
        out.push_str("\n## Available references\n\n");
        for (name, path) in &skill.references {
            out.push_str(&format!("- {name} ({path})\n"));
        }
        out.push_str("\nLoad a reference with the load_skill_reference tool when needed.\n");
    }
    out
}

/// Appends the synthetic `skill_loader` call and its tool reply.
pub fn inject_skill(history: &mut Vec<Message>, skill: &Skill) {
    let call_id = next_skill_call_id(history);
    let arguments = serde_json::json!({ "skill": skill.name.as_str() }).to_string();
    push_message(
        history,
        Message::assistant_calls(vec![ToolCall::new(call_id.clone(), SKILL_LOADER, arguments)]),
    );
    push_message(history, Message::tool(call_id, format_skill(skill)));
}

/// The standing documents that make up the agent's context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayers {
    pub soul: String,
    pub user: String,
    pub memory: String,
}

impl MemoryLayers {
    pub fn read(ws: &Workspace) -> Result<Self> {
        Ok(Self {
            soul: ws.soul()?,
            user: ws.user_profile()?,
            memory: ws.memory()?,
        })
    }
}

fn delimited(out: &mut String, label: &str, body: &str) {
    out.push_str(&format!("=== {label} ===\n"));
    out.push_str(body.trim_end());
    out.push_str("\n\n");
}

pub fn build_instructions(layers: &MemoryLayers, skill: Option<&Skill>, onboarding: bool) -> String {
    let mut out = String::new();
    delimited(&mut out, "SOUL", &layers.soul);
    delimited(&mut out, "USER PROFILE", &layers.user);
    delimited(&mut out, "MEMORY", &layers.memory);
    if let Some(skill) = skill {
        delimited(
            &mut out,
            "ACTIVE SKILL",
            &format!(
                "{}: {}\nIts full instructions were provided by the skill_loader tool result.",
                skill.name, skill.description
            ),
        );
    }
    if onboarding {
        delimited(&mut out, "ONBOARDING", ONBOARDING_DIRECTIVE);
    }
    delimited(&mut out, "RESPONSE GUIDANCE", GUIDANCE_DIRECTIVE);
    out
}

pub fn instructions_for(ws: &Workspace, skill: Option<&Skill>) -> Result<String> {
    Ok(build_instructions(
        &MemoryLayers::read(ws)?,
        skill,
        ws.needs_initial_guidance(),
    ))
}

pub trait TokenEstimator: Send + Sync {
    fn estimate_message(&self, message: &Message) -> usize;

    fn estimate(&self, history: &[Message]) -> usize {
        history.iter().map(|m| self.estimate_message(m)).sum()
    }
}

/// `ceil(chars / 4) + 4` per message, counting content and tool-call text.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

pub const MESSAGE_OVERHEAD_TOKENS: usize = 4;

impl CharHeuristic {
    pub fn text_tokens(text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

impl TokenEstimator for CharHeuristic {
    fn estimate_message(&self, message: &Message) -> usize {
        let chars = message.content.chars().count()
            + message
                .tool_calls
                .iter()
                .map(|c| c.name.chars().count() + c.arguments.chars().count())
                .sum::<usize>();
        chars.div_ceil(4) + MESSAGE_OVERHEAD_TOKENS
    }
}

pub fn estimate_tokens(history: &[Message]) -> usize {
    CharHeuristic.estimate(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub max_tokens: usize,
    pub retain_recent: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        Self {
            max_tokens: 64_000,
            retain_recent: 10,
        }
    }
}

impl ContextBudget {
    pub fn new(max_tokens: usize, retain_recent: usize) -> Result<Self> {
        let budget = Self {
            max_tokens,
            retain_recent,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 || self.retain_recent == 0 {
            return Err(Error::Config("max_tokens and retain_recent must be positive".into()));
        }
        Ok(())
    }
}

/// Strictly over budget.
pub fn should_compress(history: &[Message], budget: &ContextBudget, estimator: &dyn TokenEstimator) -> bool {
    estimator.estimate(history) > budget.max_tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    SkillReference,
    ExternalUrl,
    ImageReference,
    KeyData,
}

impl AssetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::SkillReference => "skill_reference",
            AssetKind::ExternalUrl => "external_url",
            AssetKind::ImageReference => "image_reference",
            AssetKind::KeyData => "key_data",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        [
            AssetKind::SkillReference,
            AssetKind::ExternalUrl,
            AssetKind::ImageReference,
            AssetKind::KeyData,
        ]
        .into_iter()
        .find(|k| k.as_str() == raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Asset {
    pub kind: AssetKind,
    pub value: String,
    pub source_turn: u64,
}

#[derive(Default)]
struct AssetCollector {
    seen: HashSet<(AssetKind, String)>,
    assets: Vec<Asset>,
}

impl AssetCollector {
    fn add(&mut self, kind: AssetKind, value: &str, source_turn: u64) {
        let value = value.split_whitespace().collect::<Vec<_>>().join(" ");
        if value.is_empty() || !self.seen.insert((kind, value.clone())) {
            return;
        }
        self.assets.push(Asset {
            kind,
            value,
            source_turn,
        });
    }

    fn scan_text(&mut self, text: &str, turn: u64) {
        for caps in MD_IMAGE_RE.captures_iter(text) {
            self.add(AssetKind::ImageReference, &caps[1], turn);
        }
        for m in URL_RE.find_iter(text) {
            let url = m.as_str().trim_end_matches(['.', ',', ';', ':', '!', '?']);
            self.add(AssetKind::ExternalUrl, url, turn);
        }
        for caps in IMAGE_PATH_RE.captures_iter(text) {
            self.add(AssetKind::ImageReference, &caps[1], turn);
        }
    }
}

fn asset_section_heading() -> String {
    format!("## 9. {}", SUMMARY_HEADINGS[8])
}

pub fn is_checkpoint(message: &Message) -> bool {
    message.role == Role::System && message.content.starts_with(CHECKPOINT_PREFIX)
}

/// Assets in order of first occurrence, deduplicated by (kind, value).
pub fn extract_asset_index(history: &[Message]) -> Vec<Asset> {
    let mut collector = AssetCollector::default();
    for message in history {
        let turn = message.turn_index;
        if is_checkpoint(message) {
            let heading = asset_section_heading();
            let (summary, assets) = message
                .content
                .split_once(&heading)
                .unwrap_or((&message.content, ""));
            for line in assets.lines() {
                if let Some(caps) = ASSET_LINE_RE.captures(line) {
                    if let (Some(kind), Ok(source)) = (AssetKind::parse(&caps[1]), caps[3].parse()) {
                        collector.add(kind, &caps[2], source);
                    }
                }
            }
            collector.scan_text(summary, turn);
        } else {
            collector.scan_text(&message.content, turn);
        }
        for call in &message.tool_calls {
            if call.name == SKILL_LOADER {
                let skill = serde_json::from_str::<serde_json::Value>(&call.arguments)
                    .ok()
                    .and_then(|v| v.get("skill").and_then(|s| s.as_str()).map(str::to_string));
                if let Some(skill) = skill {
                    collector.add(AssetKind::SkillReference, &skill, turn);
                }
            }
        }
        for datum in &message.key_data {
            collector.add(AssetKind::KeyData, datum, turn);
        }
    }
    collector.assets
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionState {
    pub level: u32,
    pub summary: Option<String>,
    pub asset_index: Vec<Asset>,
    pub retained_from: u64,
}

pub const SUMMARY_INSTRUCTIONS: &str = "You compress conversation history. Write a structured \
summary of the transcript using exactly these nine Markdown sections, in order, each as a \
'## N. Title' heading: 1. Session Intent, 2. Key Facts & Data, 3. Decisions Made, \
4. Actions Taken, 5. Tool & Skill Usage, 6. Open Tasks, 7. User Preferences Observed, \
8. Errors & Corrections, 9. Asset References. Keep names, numbers, URLs and file paths verbatim.";

const TRANSCRIPT_MESSAGE_LIMIT: usize = 2000;

fn render_transcript(prefix: &[Message]) -> String {
    let mut out = String::new();
    for message in prefix {
        let role = match message.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        let content: String = message.content.chars().take(TRANSCRIPT_MESSAGE_LIMIT).collect();
        out.push_str(&format!("[{role} #{}] {content}\n", message.turn_index));
        for call in &message.tool_calls {
            out.push_str(&format!("  -> {}({})\n", call.name, call.arguments));
        }
    }
    out
}

fn heading_index(line: &str) -> Option<usize> {
    let trimmed = line.trim();
    if !trimmed.starts_with('#') {
        return None;
    }
    let title = trimmed
        .trim_start_matches('#')
        .trim_start()
        .trim_start_matches(|c: char| c.is_ascii_digit())
        .trim_start_matches(['.', ')'])
        .trim();
    SUMMARY_HEADINGS
        .iter()
        .position(|h| h.eq_ignore_ascii_case(title))
}

/// Rebuilds a model summary into the nine fixed sections; section 9 lists `assets`.
pub fn normalize_summary(raw: &str, assets: &[Asset]) -> String {
    let mut bodies: [Vec<String>; 9] = Default::default();
    let mut current = 0;
    for line in raw.lines() {
        if let Some(i) = heading_index(line) {
            current = i;
            continue;
        }
        let line = line.trim_start_matches('#').trim_start();
        bodies[current].push(line.to_string());
    }
    let mut out = String::new();
    for (i, heading) in SUMMARY_HEADINGS.iter().enumerate().take(8) {
        let body = bodies[i].join("\n");
        let body = body.trim();
        out.push_str(&format!("## {}. {heading}\n", i + 1));
        out.push_str(if body.is_empty() { "None recorded." } else { body });
        out.push_str("\n\n");
    }
    out.push_str(&asset_section_heading());
    out.push('\n');
    if assets.is_empty() {
        out.push_str("None recorded.\n");
    }
    for asset in assets {
        out.push_str(&format!(
            "- [{}] {} (turn {})\n",
            asset.kind.as_str(),
            asset.value,
            asset.source_turn
        ));
    }
    out
}

/// Replaces everything before the retained tail with one checkpoint message.
///
/// All-or-nothing: on error the caller's history and state are untouched.
pub fn compress_history(
    history: &[Message],
    state: &CompressionState,
    budget: &ContextBudget,
    chat: &dyn ChatProvider,
    estimator: &dyn TokenEstimator,
) -> Result<(Vec<Message>, CompressionState)> {
    if history.len() <= budget.retain_recent {
        return Err(Error::CompressionFailed("history not longer than the retained tail".into()));
    }
    let mut split = history.len() - budget.retain_recent;
    // keep tool replies together with the call that produced them
    while split > 0 && history[split].role == Role::Tool {
        split -= 1;
    }
    if split == 0 {
        return Err(Error::CompressionFailed("no compressible prefix".into()));
    }
    let (prefix, tail) = history.split_at(split);
    let assets = extract_asset_index(prefix);
    let request = ChatRequest {
        purpose: ChatPurpose::Summary,
        instructions: SUMMARY_INSTRUCTIONS.to_string(),
        messages: vec![Message::user(render_transcript(prefix))],
        tools: Vec::new(),
    };
    let reply = chat
        .chat(&request)
        .map_err(|e| Error::CompressionFailed(format!("summary provider: {e}")))?;
    let summary = normalize_summary(&reply.content, &assets);
    let level = state.level + 1;
    let checkpoint = Message::system(format!("{CHECKPOINT_PREFIX} level {level}]\n\n{summary}"))
        .at(prefix[prefix.len() - 1].turn_index);

    let mut compressed = Vec::with_capacity(tail.len() + 1);
    compressed.push(checkpoint);
    compressed.extend_from_slice(tail);
    let before = estimator.estimate(history);
    let after = estimator.estimate(&compressed);
    if after >= before {
        return Err(Error::CompressionFailed(format!(
            "summary does not shrink the history ({after} >= {before} tokens)"
        )));
    }
    let next = CompressionState {
        level,
        summary: Some(summary),
        asset_index: assets,
        retained_from: tail[0].turn_index,
    };
    Ok((compressed, next))
}
