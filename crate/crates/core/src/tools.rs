//! Tool definitions, the registry, and the built-in tools.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::context::SKILL_LOADER;
use crate::error::{Error, Result};
use crate::workspace::{ProfileDelta, Provenance, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolEffect {
    ReadOnly,
    WorkspaceWrite,
    ExternalCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    fn json_name(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Object => "object",
            ParamType::Array => "array",
        }
    }

    fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Integer => value.is_i64() || value.is_u64(),
            ParamType::Number => value.is_number(),
            ParamType::Boolean => value.is_boolean(),
            ParamType::Object => value.is_object(),
            ParamType::Array => value.is_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

impl ParamSpec {
    pub fn required(name: &str, kind: ParamType, description: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            required: true,
            description: description.into(),
        }
    }

    pub fn optional(name: &str, kind: ParamType, description: &str) -> Self {
        Self {
            required: false,
            ..Self::required(name, kind, description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDefinition {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    pub effect: ToolEffect,
}

impl ToolDefinition {
    /// JSON Schema object for the parameters, as sent to chat models.
    pub fn json_schema(&self) -> Value {
        let properties: serde_json::Map<String, Value> = self
            .parameters
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    json!({ "type": p.kind.json_name(), "description": p.description }),
                )
            })
            .collect();
        let required: Vec<&str> = self
            .parameters
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        json!({ "type": "object", "properties": properties, "required": required })
    }

    /// Checks required parameters and declared types.
    pub fn check_arguments(&self, args: &Value) -> Result<(), ToolError> {
        let Some(object) = args.as_object() else {
            return Err(ToolError::InvalidArguments("arguments must be a JSON object".into()));
        };
        for param in &self.parameters {
            match object.get(&param.name) {
                None | Some(Value::Null) if param.required => {
                    return Err(ToolError::InvalidArguments(format!("missing parameter {}", param.name)))
                }
                Some(value) if !value.is_null() && !param.kind.accepts(value) => {
                    return Err(ToolError::InvalidArguments(format!(
                        "parameter {} must be of type {}",
                        param.name,
                        param.kind.json_name()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolError {
    UnknownTool(String),
    NotAllowed(String),
    InvalidArguments(String),
    Failed(String),
}

impl ToolError {
    pub fn kind(&self) -> &'static str {
        match self {
            ToolError::UnknownTool(_) => "unknown_tool",
            ToolError::NotAllowed(_) => "not_allowed",
            ToolError::InvalidArguments(_) => "invalid_arguments",
            ToolError::Failed(_) => "failed",
        }
    }

    /// The structured error body placed in the tool reply message.
    pub fn to_content(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

impl fmt::Display for ToolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToolError::UnknownTool(name) => write!(f, "unknown tool {name}"),
            ToolError::NotAllowed(name) => write!(f, "tool {name} is not available here"),
            ToolError::InvalidArguments(msg) | ToolError::Failed(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for ToolError {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolOutput {
    pub content: String,
    /// Values the tool marks as worth keeping across history compression.
    pub key_data: Vec<String>,
}

impl ToolOutput {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            key_data: Vec::new(),
        }
    }
}

/// What a tool may touch while it runs, and what it changed.
pub struct ToolContext<'a> {
    pub workspace: &'a mut Workspace,
    pub active_skill: Option<String>,
    pub profile_changed: bool,
    pub memory_changed: bool,
    pub skills_changed: bool,
}

impl<'a> ToolContext<'a> {
    pub fn new(workspace: &'a mut Workspace, active_skill: Option<String>) -> Self {
        Self {
            workspace,
            active_skill,
            profile_changed: false,
            memory_changed: false,
            skills_changed: false,
        }
    }
}

pub trait Tool: Send + Sync {
    fn definition(&self) -> &ToolDefinition;

    fn call(&self, args: &Value, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError>;
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// update_user_profile, update_memory and load_skill_reference.
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        registry.register(Arc::new(UpdateUserProfile::new())).unwrap();
        registry.register(Arc::new(UpdateMemory::new())).unwrap();
        registry.register(Arc::new(LoadSkillReference::new())).unwrap();
        registry
    }

    pub fn register(&mut self, tool: Arc<dyn Tool>) -> Result<()> {
        let name = tool.definition().name.clone();
        if name == SKILL_LOADER {
            return Err(Error::Config(format!("{SKILL_LOADER} is reserved for skill injection")));
        }
        if self.tools.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tool name {name}")));
        }
        self.tools.insert(name, tool);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn definitions(&self) -> Vec<ToolDefinition> {
        self.tools.values().map(|t| t.definition().clone()).collect()
    }

    /// A registry restricted to `names`; every name must exist.
    pub fn subset(&self, names: &[String]) -> Result<ToolRegistry> {
        let mut tools = BTreeMap::new();
        for name in names {
            let tool = self
                .tools
                .get(name)
                .ok_or_else(|| Error::SubAgentConfig(format!("tool {name} is not registered")))?;
            tools.insert(name.clone(), tool.clone());
        }
        Ok(ToolRegistry { tools })
    }

    /// Runs a tool by name, validating arguments first.
    pub fn invoke(&self, name: &str, arguments: &str, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        if name == SKILL_LOADER {
            return Err(ToolError::NotAllowed(name.into()));
        }
        let tool = self
            .tools
            .get(name)
            .ok_or_else(|| ToolError::UnknownTool(name.into()))?;
        let args: Value = if arguments.trim().is_empty() {
            json!({})
        } else {
            serde_json::from_str(arguments)
                .map_err(|e| ToolError::InvalidArguments(format!("arguments are not JSON: {e}")))?
        };
        tool.definition().check_arguments(&args)?;
        tool.call(&args, ctx)
    }
}

fn str_arg<'v>(args: &'v Value, name: &str) -> Option<&'v str> {
    args.get(name).and_then(Value::as_str)
}

fn section_params() -> Vec<ParamSpec> {
    vec![
        ParamSpec::required("heading", ParamType::String, "Section title, e.g. \"Target Markets\""),
        ParamSpec::required("content", ParamType::String, "Markdown to record under the section"),
        ParamSpec::optional(
            "mode",
            ParamType::String,
            "\"add\" (default) appends; \"replace\" overwrites the section",
        ),
    ]
}

fn section_delta(args: &Value) -> Result<ProfileDelta, ToolError> {
    let heading = str_arg(args, "heading").unwrap_or_default().trim();
    let content = str_arg(args, "content").unwrap_or_default().trim();
    if heading.is_empty() || content.is_empty() {
        return Err(ToolError::InvalidArguments("heading and content must be non-empty".into()));
    }
    let delta = ProfileDelta::new(Provenance::RealTime);
    match str_arg(args, "mode").unwrap_or("add") {
        "add" => Ok(delta.add(heading, content)),
        "replace" => Ok(delta.replace(heading, content)),
        other => Err(ToolError::InvalidArguments(format!("unknown mode {other:?}"))),
    }
}

/// Records facts the user states explicitly into USER.md.
pub struct UpdateUserProfile {
    definition: ToolDefinition,
}

impl UpdateUserProfile {
    pub const NAME: &'static str = "update_user_profile";

    pub fn new() -> Self {
        Self {
            definition: ToolDefinition {
                name: Self::NAME.into(),
                description: "Record business information the user stated explicitly (products, \
                              markets, preferences) in their profile. Never record guesses."
                    .into(),
                parameters: section_params(),
                effect: ToolEffect::WorkspaceWrite,
            },
        }
    }
}

impl Default for UpdateUserProfile {
    fn default() -> Self {
        Self::new()
    }
}

impl Tool for UpdateUserProfile {
    fn definition(&self) -> &ToolDefinition {
        &self.definition
    }

    fn call(&self, args: &Value, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let delta = section_delta(args)?;
        ctx.workspace
            .apply_profile_delta(&delta)
            .map_err(|e| ToolError::Failed(e.to_string()))?;
        ctx.profile_changed = true;
        Ok(ToolOutput::text("Profile updated."))
    }
}

/// Records durable facts and conventions into MEMORY.md.
pub struct UpdateMemory {
    definition: ToolDefinition,
}

impl UpdateMemory {
    pub const NAME: &'static str = "update_memory";

    pub fn new() -> Self {
        Self {
            definition: ToolDefinition {
                name: Self::NAME.into(),
                description: "Save a durable fact or working convention to long-term memory.".into(),
                parameters: section_params(),
                effect: ToolEffect::WorkspaceWrite,
            },
        }
    }
}

impl Default for UpdateMemory {
    fn default() -> Self {
        Self::new()
    }
}

impl Tool for UpdateMemory {
    fn definition(&self) -> &ToolDefinition {
        &self.definition
    }

    fn call(&self, args: &Value, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let delta = section_delta(args)?;
        ctx.workspace
            .apply_memory_delta(&delta)
            .map_err(|e| ToolError::Failed(e.to_string()))?;
        ctx.memory_changed = true;
        Ok(ToolOutput::text("Memory updated."))
    }
}

/// Reads one reference file of a skill on demand.
pub struct LoadSkillReference {
    definition: ToolDefinition,
}

impl LoadSkillReference {
    pub const NAME: &'static str = "load_skill_reference";

    pub fn new() -> Self {
        Self {
            definition: ToolDefinition {
                name: Self::NAME.into(),
                description: "Load a reference document listed by the active skill.".into(),
                parameters: vec![
                    ParamSpec::required("reference", ParamType::String, "Reference name, e.g. pricing.md"),
                    ParamSpec::optional("skill", ParamType::String, "Skill name; defaults to the active skill"),
                ],
                effect: ToolEffect::ReadOnly,
            },
        }
    }
}

impl Default for LoadSkillReference {
    fn default() -> Self {
        Self::new()
    }
}

impl Tool for LoadSkillReference {
    fn definition(&self) -> &ToolDefinition {
        &self.definition
    }

    fn call(&self, args: &Value, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let skill = str_arg(args, "skill")
            .map(str::to_string)
            .or_else(|| ctx.active_skill.clone())
            .ok_or_else(|| ToolError::InvalidArguments("no skill given and none active".into()))?;
        let reference = str_arg(args, "reference").unwrap_or_default();
        let body = ctx
            .workspace
            .skills
            .read_reference(&skill, reference)
            .map_err(|e| ToolError::Failed(e.to_string()))?;
        Ok(ToolOutput::text(body))
    }
}

/// Operator-declared tool backed by an HTTP endpoint. Arguments are POSTed as
/// JSON; a JSON response may carry a `key_data` string array.
pub struct HttpTool {
    definition: ToolDefinition,
    url: String,
    timeout: Duration,
}

impl HttpTool {
    pub fn new(definition: ToolDefinition, url: impl Into<String>) -> Self {
        Self {
            definition: ToolDefinition {
                effect: ToolEffect::ExternalCall,
                ..definition
            },
            url: url.into(),
            timeout: Duration::from_secs(30),
        }
    }
}

impl Tool for HttpTool {
    fn definition(&self) -> &ToolDefinition {
        &self.definition
    }

    fn call(&self, args: &Value, _ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let response = ureq::post(&self.url)
            .timeout(self.timeout)
            .send_json(args.clone())
            .map_err(|e| ToolError::Failed(format!("{}: {e}", self.definition.name)))?;
        let body = response
            .into_string()
            .map_err(|e| ToolError::Failed(format!("{}: {e}", self.definition.name)))?;
        let key_data = serde_json::from_str::<Value>(&body)
            .ok()
            .and_then(|v| v.get("key_data").cloned())
            .and_then(|v| serde_json::from_value::<Vec<String>>(v).ok())
            .unwrap_or_default();
        Ok(ToolOutput {
            content: body,
            key_data,
        })
    }
}

type ToolFn = dyn Fn(&Value, &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> + Send + Sync;

/// A tool implemented by a closure; handy for tests and embedding applications.
pub struct FnTool {
    definition: ToolDefinition,
    f: Box<ToolFn>,
}

impl FnTool {
    pub fn new(
        definition: ToolDefinition,
        f: impl Fn(&Value, &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            definition,
            f: Box::new(f),
        }
    }
}

impl Tool for FnTool {
    fn definition(&self) -> &ToolDefinition {
        &self.definition
    }

    fn call(&self, args: &Value, ctx: &mut ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        (self.f)(args, ctx)
    }
}
