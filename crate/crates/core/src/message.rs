//! Dialogue history entries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    /// JSON-encoded arguments, kept as text exactly as the model produced them.
    pub arguments: String,
}

impl ToolCall {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            arguments: arguments.into(),
        }
    }
}

/// One history entry.
///
/// `turn_index` is the position stamp assigned when the message enters a
/// session; it increases strictly along a history and survives compression
/// for the retained tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
    #[serde(default)]
    pub turn_index: u64,
    /// Data points a tool explicitly tagged as worth preserving across compression.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub key_data: Vec<String>,
}

impl Message {
    fn with_role(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
            turn_index: 0,
            key_data: Vec::new(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::with_role(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::with_role(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::with_role(Role::Assistant, content)
    }

    pub fn assistant_calls(calls: Vec<ToolCall>) -> Self {
        let mut msg = Self::with_role(Role::Assistant, "");
        msg.tool_calls = calls;
        msg
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        let mut msg = Self::with_role(Role::Tool, content);
        msg.tool_call_id = Some(call_id.into());
        msg
    }

    pub fn at(mut self, turn_index: u64) -> Self {
        self.turn_index = turn_index;
        self
    }
}

/// Checks the history invariants: strictly increasing `turn_index`, and every
/// tool message answering a tool call issued earlier by an assistant message.
pub fn validate_history(history: &[Message]) -> Result<(), String> {
    let mut issued = std::collections::HashSet::new();
    let mut last: Option<u64> = None;
    for (pos, msg) in history.iter().enumerate() {
        if let Some(prev) = last {
            if msg.turn_index <= prev {
                return Err(format!(
                    "message {pos}: turn_index {} not above {prev}",
                    msg.turn_index
                ));
            }
        }
        last = Some(msg.turn_index);
        match msg.role {
            Role::Assistant => {
                issued.extend(msg.tool_calls.iter().map(|c| c.id.clone()));
            }
            Role::Tool => match &msg.tool_call_id {
                Some(id) if issued.contains(id) => {}
                Some(id) => return Err(format!("message {pos}: tool reply to unknown call {id}")),
                None => return Err(format!("message {pos}: tool message without tool_call_id")),
            },
            _ => {}
        }
    }
    Ok(())
}
