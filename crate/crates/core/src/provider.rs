//! Chat and embedding backends.
//!
//! The harness talks to models only through [`ChatProvider`] and
//! [`EmbeddingProvider`]. Mock implementations read canned replies from a
//! transcript (JSON) and fall back to a deterministic synthetic responder, so
//! the whole stack runs offline.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::context::SUMMARY_HEADINGS;
use crate::error::{Error, ProviderError, Result};
use crate::message::{Message, Role, ToolCall};
use crate::tools::ToolDefinition;

/// Why the harness is calling the chat model. Mocks script replies per purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatPurpose {
    Agent,
    SubAgent,
    IntentClassification,
    Summary,
    Review,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub purpose: ChatPurpose,
    pub instructions: String,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolDefinition>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantReply {
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
}

impl AssistantReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }

    pub fn calls(tool_calls: Vec<ToolCall>) -> Self {
        Self {
            content: String::new(),
            tool_calls,
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, request: &ChatRequest) -> Result<AssistantReply, ProviderError>;

    /// Streams assistant text through `on_delta`. The concatenated deltas
    /// equal the returned reply's content.
    fn chat_streamed(
        &self,
        request: &ChatRequest,
        on_delta: &mut dyn FnMut(&str),
    ) -> Result<AssistantReply, ProviderError> {
        let reply = self.chat(request)?;
        if !reply.content.is_empty() {
            on_delta(&reply.content);
        }
        Ok(reply)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the vector space; cached vectors from another model are ignored.
    fn model_id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    Fail { error: String },
    Reply(AssistantReply),
}

/// Canned provider behavior, loadable from a JSON transcript file.
///
/// ```json
/// { "chat": { "agent": [{"content": "hi"}], "summary": [{"error": "down"}] },
///   "embeddings": { "some text": [0.1, 0.2] } }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTranscript {
    #[serde(default)]
    pub chat: BTreeMap<ChatPurpose, Vec<ScriptStep>>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl MockTranscript {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("mock transcript {}: {e}", path.display())))
    }
}

/// Scripted chat provider with an optional synthetic fallback.
///
/// Each purpose has its own reply queue. Once a queue is empty the fallback
/// answers; without a fallback the call fails with `TranscriptExhausted`.
pub struct MockChatProvider {
    scripts: Mutex<HashMap<ChatPurpose, VecDeque<ScriptStep>>>,
    fallback: Option<SyntheticChat>,
    calls: Mutex<Vec<ChatRequest>>,
    purposes: Mutex<Vec<ChatPurpose>>,
    keep_requests: bool,
    unavailable: AtomicBool,
}

impl MockChatProvider {
    pub fn new() -> Self {
        Self {
            scripts: Mutex::new(HashMap::new()),
            fallback: None,
            calls: Mutex::new(Vec::new()),
            purposes: Mutex::new(Vec::new()),
            keep_requests: true,
            unavailable: AtomicBool::new(false),
        }
    }

    /// A provider that answers every purpose synthetically.
    pub fn synthetic() -> Self {
        Self::new().with_fallback(SyntheticChat::default())
    }

    pub fn from_transcript(transcript: &MockTranscript) -> Self {
        let provider = Self::new();
        for (purpose, steps) in &transcript.chat {
            for step in steps {
                provider.push(*purpose, step.clone());
            }
        }
        provider
    }

    /// Stops retaining full requests; only purposes are counted. Long soak
    /// runs would otherwise keep every context window in memory.
    pub fn without_request_log(mut self) -> Self {
        self.keep_requests = false;
        self
    }

    pub fn with_fallback(mut self, fallback: SyntheticChat) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn push(&self, purpose: ChatPurpose, step: ScriptStep) {
        self.scripts
            .lock()
            .unwrap()
            .entry(purpose)
            .or_default()
            .push_back(step);
    }

    pub fn push_reply(&self, purpose: ChatPurpose, reply: AssistantReply) {
        self.push(purpose, ScriptStep::Reply(reply));
    }

    pub fn push_error(&self, purpose: ChatPurpose, error: impl Into<String>) {
        self.push(purpose, ScriptStep::Fail { error: error.into() });
    }

    /// Makes every call fail until reset.
    pub fn set_unavailable(&self, unavailable: bool) {
        self.unavailable.store(unavailable, Ordering::SeqCst);
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.purposes.lock().unwrap().len()
    }

    pub fn calls_for(&self, purpose: ChatPurpose) -> usize {
        self.purposes
            .lock()
            .unwrap()
            .iter()
            .filter(|p| **p == purpose)
            .count()
    }
}

impl Default for MockChatProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatProvider for MockChatProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(&self, request: &ChatRequest) -> Result<AssistantReply, ProviderError> {
        self.purposes.lock().unwrap().push(request.purpose);
        if self.keep_requests {
            self.calls.lock().unwrap().push(request.clone());
        }
        if self.unavailable.load(Ordering::SeqCst) {
            return Err(ProviderError::Unavailable("mock marked unavailable".into()));
        }
        let step = self
            .scripts
            .lock()
            .unwrap()
            .get_mut(&request.purpose)
            .and_then(VecDeque::pop_front);
        match step {
            Some(ScriptStep::Reply(reply)) => Ok(reply),
            Some(ScriptStep::Fail { error }) => Err(ProviderError::Unavailable(error)),
            None => match &self.fallback {
                Some(synthetic) => Ok(synthetic.respond(request)),
                None => Err(ProviderError::TranscriptExhausted),
            },
        }
    }

    fn chat_streamed(
        &self,
        request: &ChatRequest,
        on_delta: &mut dyn FnMut(&str),
    ) -> Result<AssistantReply, ProviderError> {
        let reply = self.chat(request)?;
        for chunk in reply.content.split_inclusive(' ') {
            on_delta(chunk);
        }
        Ok(reply)
    }
}

/// Deterministic rule-based responder used by soak runs and demos.
#[derive(Debug, Clone)]
pub struct SyntheticChat {
    /// Approximate length of agent answers in characters.
    pub answer_chars: usize,
}

impl Default for SyntheticChat {
    fn default() -> Self {
        Self { answer_chars: 600 }
    }
}

impl SyntheticChat {
    pub fn respond(&self, request: &ChatRequest) -> AssistantReply {
        match request.purpose {
            ChatPurpose::IntentClassification => AssistantReply::text("NONE"),
            ChatPurpose::Summary => AssistantReply::text(self.summary(&request.messages)),
            ChatPurpose::Review => self.review(&request.messages),
            ChatPurpose::Agent | ChatPurpose::SubAgent => {
                AssistantReply::text(self.answer(&request.messages))
            }
        }
    }

    fn answer(&self, messages: &[Message]) -> String {
        let question = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let topic: String = question.chars().take(80).collect();
        let mut text = format!("Regarding \"{topic}\": here is a structured answer.");
        let filler = " The recommended approach weighs cost, lead time, and compliance for this request.";
        while text.len() < self.answer_chars {
            text.push_str(filler);
        }
        text.push_str("\n\nSuggestions: tell me your main product line; share your target markets.");
        text
    }

    /// Records facts stated as "we sell ..." or "our main market is ..." on the
    /// first step; answers with a summary once its calls have been answered.
    fn review(&self, messages: &[Message]) -> AssistantReply {
        if messages.iter().any(|m| m.role == Role::Tool) {
            return AssistantReply::text("Recorded facts the user stated.");
        }
        const PATTERNS: &[(&str, &str)] = &[
            ("we sell ", "Main Products"),
            ("main product is ", "Main Products"),
            ("main market is ", "Target Markets"),
            ("we export to ", "Target Markets"),
        ];
        let mut calls = Vec::new();
        for message in messages.iter().filter(|m| m.role == Role::User) {
            let lowered = message.content.to_lowercase();
            for (cue, heading) in PATTERNS {
                let Some(at) = lowered.find(cue) else { continue };
                let rest = &lowered[at + cue.len()..];
                let object = rest.split(['.', ',', ';', '\n', '?', '!']).next().unwrap_or("");
                let object = object.split(" and ").next().unwrap_or("").trim();
                if object.is_empty() || object.len() > 60 {
                    continue;
                }
                let mut content: Vec<char> = object.chars().collect();
                content[0] = content[0].to_ascii_uppercase();
                let args = serde_json::json!({
                    "heading": heading,
                    "content": content.into_iter().collect::<String>(),
                    "evidence": format!("{cue}{object}"),
                });
                calls.push(ToolCall::new(
                    format!("review-{}", calls.len() + 1),
                    crate::evolution::REVIEW_PROFILE_TOOL,
                    args.to_string(),
                ));
            }
        }
        if calls.is_empty() {
            return AssistantReply::text("No durable changes identified.");
        }
        AssistantReply::calls(calls)
    }

    fn summary(&self, messages: &[Message]) -> String {
        // the summary request carries the transcript as rendered lines
        let text: String = messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let user_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("[user #")).collect();
        let tools = text.lines().filter(|l| l.starts_with("[tool #")).count();
        let facts: Vec<String> = user_lines
            .iter()
            .filter(|l| l.chars().any(|c| c.is_ascii_digit()))
            .rev()
            .take(3)
            .map(|l| format!("- {}", l.split_once("] ").map_or(*l, |(_, t)| t).chars().take(120).collect::<String>()))
            .collect();
        let mut out = String::new();
        for (i, heading) in SUMMARY_HEADINGS.iter().enumerate() {
            out.push_str(&format!("## {}. {heading}\n", i + 1));
            let body = match i {
                0 => format!("Continue assisting across {} user requests.", user_lines.len()),
                1 if !facts.is_empty() => facts.join("\n"),
                4 => format!("{tools} tool results were produced."),
                _ => "None recorded.".to_string(),
            };
            out.push_str(&body);
            out.push_str("\n\n");
        }
        out
    }
}

/// Embedding mock: fixed vectors for known texts, hashed bag-of-words for the rest.
pub struct MockEmbeddingProvider {
    fixed: HashMap<String, Vec<f64>>,
    dimension: usize,
    model_id: String,
    hash_fallback: bool,
    calls: AtomicUsize,
    unavailable: AtomicBool,
}

impl MockEmbeddingProvider {
    pub fn new(dimension: usize) -> Self {
        Self {
            fixed: HashMap::new(),
            dimension,
            model_id: format!("mock-embedding-{dimension}"),
            hash_fallback: true,
            calls: AtomicUsize::new(0),
            unavailable: AtomicBool::new(false),
        }
    }

    /// Only answers for texts registered with [`with_vector`](Self::with_vector).
    pub fn strict(dimension: usize) -> Self {
        Self {
            hash_fallback: false,
            ..Self::new(dimension)
        }
    }

    pub fn from_transcript(transcript: &MockTranscript, dimension: usize) -> Self {
        let mut provider = Self::new(dimension);
        for (text, vector) in &transcript.embeddings {
            provider.fixed.insert(text.clone(), vector.clone());
        }
        provider
    }

    pub fn with_vector(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.fixed.insert(text.into(), vector);
        self
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.fixed.insert(text.into(), vector);
    }

    pub fn set_unavailable(&self, unavailable: bool) {
        self.unavailable.store(unavailable, Ordering::SeqCst);
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn hashed(&self, text: &str) -> Vec<f64> {
        let mut vector = vec![0.0; self.dimension.max(1)];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let token = token.to_lowercase();
            let mut hash: u64 = 0xcbf29ce484222325;
            for byte in token.bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
            let slot = (hash % vector.len() as u64) as usize;
            vector[slot] += 1.0;
        }
        vector
    }
}

impl EmbeddingProvider for MockEmbeddingProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.unavailable.load(Ordering::SeqCst) {
            return Err(ProviderError::Unavailable("mock embedding marked unavailable".into()));
        }
        if let Some(vector) = self.fixed.get(text) {
            return Ok(vector.clone());
        }
        if self.hash_fallback {
            Ok(self.hashed(text))
        } else {
            Err(ProviderError::InvalidResponse(format!("no mock vector for {text:?}")))
        }
    }
}

/// Chat client for OpenAI-compatible `/chat/completions` endpoints.
pub struct OpenAiChat {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiChat {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(120))
                .build(),
        }
    }

    fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = vec![serde_json::json!({"role": "system", "content": request.instructions})];
        messages.extend(request.messages.iter().map(wire_message));
        let mut body = serde_json::json!({ "model": self.model, "messages": messages });
        if !request.tools.is_empty() {
            body["tools"] = request
                .tools
                .iter()
                .map(|t| {
                    serde_json::json!({
                        "type": "function",
                        "function": {
                            "name": t.name,
                            "description": t.description,
                            "parameters": t.json_schema(),
                        }
                    })
                })
                .collect();
        }
        body
    }
}

fn wire_message(message: &Message) -> serde_json::Value {
    let role = match message.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut value = serde_json::json!({ "role": role, "content": message.content });
    if !message.tool_calls.is_empty() {
        value["tool_calls"] = message
            .tool_calls
            .iter()
            .map(|c| {
                serde_json::json!({
                    "id": c.id,
                    "type": "function",
                    "function": { "name": c.name, "arguments": c.arguments },
                })
            })
            .collect();
    }
    if let Some(id) = &message.tool_call_id {
        value["tool_call_id"] = serde_json::Value::String(id.clone());
    }
    value
}

fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, ProviderError> {
    let mut req = agent.post(url);
    if let Some(key) = api_key {
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    let response = req
        .send_json(body.clone())
        .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
    response
        .into_json()
        .map_err(|e| ProviderError::InvalidResponse(e.to_string()))
}

impl ChatProvider for OpenAiChat {
    fn name(&self) -> &str {
        &self.model
    }

    fn chat(&self, request: &ChatRequest) -> Result<AssistantReply, ProviderError> {
        let url = format!("{}/chat/completions", self.base_url);
        let json = post_json(&self.agent, &url, self.api_key.as_deref(), &self.request_body(request))?;
        let message = &json["choices"][0]["message"];
        if message.is_null() {
            return Err(ProviderError::InvalidResponse("no choices in response".into()));
        }
        let content = message["content"].as_str().unwrap_or_default().to_string();
        let tool_calls = message["tool_calls"]
            .as_array()
            .map(|calls| {
                calls
                    .iter()
                    .map(|c| ToolCall {
                        id: c["id"].as_str().unwrap_or_default().to_string(),
                        name: c["function"]["name"].as_str().unwrap_or_default().to_string(),
                        arguments: c["function"]["arguments"].as_str().unwrap_or("{}").to_string(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(AssistantReply { content, tool_calls })
    }
}

/// Client for OpenAI-compatible `/embeddings` endpoints.
pub struct OpenAiEmbedding {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiEmbedding {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(30))
                .build(),
        }
    }
}

impl EmbeddingProvider for OpenAiEmbedding {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let url = format!("{}/embeddings", self.base_url);
        let body = serde_json::json!({ "model": self.model, "input": text });
        let json = post_json(&self.agent, &url, self.api_key.as_deref(), &body)?;
        json["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| ProviderError::InvalidResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| ProviderError::InvalidResponse("non-numeric embedding".into()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(purpose: ChatPurpose) -> ChatRequest {
        ChatRequest {
            purpose,
            instructions: String::new(),
            messages: vec![Message::user("hello")],
            tools: Vec::new(),
        }
    }

    #[test]
    fn scripted_replies_then_exhaustion() {
        let mock = MockChatProvider::new();
        mock.push_reply(ChatPurpose::Agent, AssistantReply::text("one"));
        mock.push_error(ChatPurpose::Agent, "boom");
        assert_eq!(mock.chat(&request(ChatPurpose::Agent)).unwrap().content, "one");
        assert!(mock.chat(&request(ChatPurpose::Agent)).is_err());
        assert_eq!(
            mock.chat(&request(ChatPurpose::Agent)).unwrap_err(),
            ProviderError::TranscriptExhausted
        );
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn streamed_deltas_concatenate_to_content() {
        let mock = MockChatProvider::synthetic();
        let mut acc = String::new();
        let reply = mock
            .chat_streamed(&request(ChatPurpose::Agent), &mut |d| acc.push_str(d))
            .unwrap();
        assert_eq!(acc, reply.content);
    }

    #[test]
    fn transcript_json_parses() {
        let json = r#"{"chat": {"agent": [{"content": "hi"}, {"error": "down"}],
                        "intent_classification": [{"content": "NONE"}]},
                       "embeddings": {"x": [1.0, 0.0]}}"#;
        let transcript: MockTranscript = serde_json::from_str(json).unwrap();
        let chat = MockChatProvider::from_transcript(&transcript);
        assert_eq!(chat.chat(&request(ChatPurpose::Agent)).unwrap().content, "hi");
        assert!(chat.chat(&request(ChatPurpose::Agent)).is_err());
        let embed = MockEmbeddingProvider::from_transcript(&transcript, 2);
        assert_eq!(embed.embed("x").unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn hashed_embedding_is_deterministic() {
        let embed = MockEmbeddingProvider::new(16);
        assert_eq!(embed.embed("Solar inverter quote").unwrap(), embed.embed("solar inverter QUOTE").unwrap());
        assert_eq!(embed.call_count(), 2);
    }

    #[test]
    fn synthetic_summary_has_all_headings() {
        let text = SyntheticChat::default().respond(&request(ChatPurpose::Summary)).content;
        for heading in SUMMARY_HEADINGS {
            assert!(text.contains(heading));
        }
    }
}
