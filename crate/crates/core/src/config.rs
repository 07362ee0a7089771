//! Service and CLI configuration: one TOML document, overridden by
//! `SKILLHARNESS_*` environment variables. Credentials are read from the
//! environment only; the file names the variable.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::context::ContextBudget;
use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, RewardConfig, RewardWeights};
use crate::matcher::MatcherConfig;
use crate::provider::{ChatProvider, EmbeddingProvider, MockChatProvider, MockEmbeddingProvider, OpenAiChat, OpenAiEmbedding};
use crate::runtime::{EvolutionMode, Harness, RuntimeConfig, DEFAULT_MAX_STEPS};
use crate::tools::{HttpTool, ToolDefinition, ToolRegistry};

pub const MIN_MAX_TOKENS: usize = 1024;
pub const ENV_PREFIX: &str = "SKILLHARNESS_";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Live,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(ProviderKind::Mock),
            "live" => Ok(ProviderKind::Live),
            other => Err(Error::Config(format!("unknown provider {other:?} (mock|live)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
}

impl EndpointConfig {
    fn defaults(model: &str) -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: model.into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
        }
    }

    fn api_key(&self, env: &HashMap<String, String>) -> Option<String> {
        self.api_key_env.as_ref().and_then(|name| env.get(name).cloned())
    }
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self::defaults("gpt-4o-mini")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub chat: EndpointConfig,
    pub embedding: EndpointConfig,
    /// Dimension of the offline hashed embeddings.
    pub mock_dimension: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            chat: EndpointConfig::default(),
            embedding: EndpointConfig::defaults("text-embedding-3-small"),
            mock_dimension: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpToolConfig {
    #[serde(flatten)]
    pub definition: ToolDefinition,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSettings {
    pub weights: [f64; 3],
    pub gamma: f64,
    pub magnitude_scale: f64,
}

impl Default for RewardSettings {
    fn default() -> Self {
        let d = RewardConfig::default();
        Self {
            weights: [d.weights.maturity, d.weights.profile, d.weights.memory],
            gamma: d.gamma,
            magnitude_scale: d.magnitude_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub bind_address: String,
    pub data_root: PathBuf,
    /// Environment variable holding the bearer token; no token means no auth.
    pub auth_token_env: Option<String>,
    pub provider: ProviderConfig,
    pub theta: f64,
    pub word_boundary: bool,
    pub max_tokens: usize,
    pub retain_recent: usize,
    pub max_steps: usize,
    pub evolution_mode: EvolutionMode,
    pub evolution_workers: usize,
    pub dedup_threshold: f64,
    pub suggestion_threshold: usize,
    pub reward: RewardSettings,
    pub tools: Vec<HttpToolConfig>,
}

impl Default for Config {
    fn default() -> Self {
        let budget = ContextBudget::default();
        let evolution = EvolutionConfig::default();
        Self {
            bind_address: "127.0.0.1:8080".into(),
            data_root: PathBuf::from("data"),
            auth_token_env: Some(format!("{ENV_PREFIX}API_TOKEN")),
            provider: ProviderConfig::default(),
            theta: MatcherConfig::default().theta,
            word_boundary: false,
            max_tokens: budget.max_tokens,
            retain_recent: budget.retain_recent,
            max_steps: DEFAULT_MAX_STEPS,
            evolution_mode: EvolutionMode::Auto,
            evolution_workers: 1,
            dedup_threshold: evolution.dedup_threshold,
            suggestion_threshold: evolution.suggestion_threshold,
            reward: RewardSettings::default(),
            tools: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`), applies environment overrides and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env: HashMap<String, String> = std::env::vars().collect();
        Self::load_with_env(path, &env)
    }

    pub fn load_with_env(path: Option<&Path>, env: &HashMap<String, String>) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        config.apply_env(env)?;
        config.validate()?;
        Ok(config)
    }

    fn apply_env(&mut self, env: &HashMap<String, String>) -> Result<()> {
        fn parsed<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.parse()
                .map_err(|_| Error::Config(format!("{ENV_PREFIX}{key}: cannot parse {raw:?}")))
        }
        for (key, value) in env {
            let Some(key) = key.strip_prefix(ENV_PREFIX) else { continue };
            match key {
                "BIND_ADDRESS" => self.bind_address = value.clone(),
                "DATA_ROOT" => self.data_root = PathBuf::from(value),
                "PROVIDER" => self.provider.kind = value.parse()?,
                "CHAT_BASE_URL" => self.provider.chat.base_url = value.clone(),
                "CHAT_MODEL" => self.provider.chat.model = value.clone(),
                "EMBEDDING_BASE_URL" => self.provider.embedding.base_url = value.clone(),
                "EMBEDDING_MODEL" => self.provider.embedding.model = value.clone(),
                "THETA" => self.theta = parsed(key, value)?,
                "MAX_TOKENS" => self.max_tokens = parsed(key, value)?,
                "RETAIN_RECENT" => self.retain_recent = parsed(key, value)?,
                "MAX_STEPS" => self.max_steps = parsed(key, value)?,
                "EVOLUTION_MODE" => {
                    self.evolution_mode = match value.as_str() {
                        "auto" => EvolutionMode::Auto,
                        "manual" => EvolutionMode::Manual,
                        other => return Err(Error::Config(format!("unknown evolution mode {other:?}"))),
                    }
                }
                "GAMMA" => self.reward.gamma = parsed(key, value)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        MatcherConfig::with_theta(self.theta)?;
        if self.max_tokens < MIN_MAX_TOKENS {
            return Err(Error::Config(format!("max_tokens must be at least {MIN_MAX_TOKENS}")));
        }
        ContextBudget::new(self.max_tokens, self.retain_recent)?;
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        self.reward_config()?;
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(Error::Config("dedup_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            matcher: MatcherConfig {
                theta: self.theta,
                word_boundary: self.word_boundary,
            },
            budget: ContextBudget {
                max_tokens: self.max_tokens,
                retain_recent: self.retain_recent,
            },
            max_steps: self.max_steps,
            evolution_mode: self.evolution_mode,
        }
    }

    pub fn reward_config(&self) -> Result<RewardConfig> {
        let [m, p, s] = self.reward.weights;
        let gamma = self.reward.gamma;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config("gamma must be in [0, 1]".into()));
        }
        Ok(RewardConfig {
            weights: RewardWeights::new(m, p, s)?,
            magnitude_scale: self.reward.magnitude_scale,
            gamma,
        })
    }

    pub fn evolution_config(&self) -> Result<EvolutionConfig> {
        Ok(EvolutionConfig {
            max_steps: self.max_steps,
            dedup_threshold: self.dedup_threshold,
            suggestion_threshold: self.suggestion_threshold,
            reward: self.reward_config()?,
        })
    }

    pub fn auth_token(&self) -> Option<String> {
        let name = self.auth_token_env.as_ref()?;
        std::env::var(name).ok().filter(|t| !t.is_empty())
    }

    pub fn providers(&self) -> (Arc<dyn ChatProvider>, Arc<dyn EmbeddingProvider>) {
        match self.provider.kind {
            ProviderKind::Mock => (
                Arc::new(MockChatProvider::synthetic().without_request_log()),
                Arc::new(MockEmbeddingProvider::new(self.provider.mock_dimension)),
            ),
            ProviderKind::Live => {
                let env: HashMap<String, String> = std::env::vars().collect();
                let chat = &self.provider.chat;
                let embedding = &self.provider.embedding;
                (
                    Arc::new(OpenAiChat::new(&chat.base_url, &chat.model, chat.api_key(&env))),
                    Arc::new(OpenAiEmbedding::new(
                        &embedding.base_url,
                        &embedding.model,
                        embedding.api_key(&env),
                    )),
                )
            }
        }
    }

    pub fn tool_registry(&self) -> Result<ToolRegistry> {
        let mut registry = ToolRegistry::with_builtins();
        for tool in &self.tools {
            registry.register(Arc::new(HttpTool::new(tool.definition.clone(), &tool.url)))?;
        }
        Ok(registry)
    }

    pub fn harness(&self) -> Result<Harness> {
        let (chat, embed) = self.providers();
        Ok(Harness::new(chat, embed)
            .with_config(self.runtime_config())
            .with_tools(self.tool_registry()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let config = Config::load_with_env(None, &HashMap::new()).unwrap();
        assert_eq!(config.max_tokens, 64_000);
        assert_eq!(config.provider.kind, ProviderKind::Mock);
    }

    #[test]
    fn file_then_env() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.toml");
        std::fs::write(
            &path,
            r#"
max_tokens = 4096
evolution_mode = "manual"

[[tools]]
name = "rates"
description = "Exchange rates"
effect = "external_call"
url = "http://localhost:9/rates"
parameters = [{ name = "currency", type = "string", required = true }]
"#,
        )
        .unwrap();
        let env = HashMap::from([("SKILLHARNESS_THETA".to_string(), "0.7".to_string())]);
        let config = Config::load_with_env(Some(&path), &env).unwrap();
        assert_eq!(config.max_tokens, 4096);
        assert_eq!(config.theta, 0.7);
        assert_eq!(config.evolution_mode, EvolutionMode::Manual);
        assert!(config.tool_registry().unwrap().contains("rates"));
    }

    #[test]
    fn rejects_out_of_range() {
        let bad = |toml: &str| Config::from_toml(toml).unwrap().validate().is_err();
        assert!(bad("theta = 1.5"));
        assert!(bad("max_tokens = 1000"));
        assert!(bad("[reward]\nweights = [0.5, 0.5, 0.5]"));
        let env = HashMap::from([("SKILLHARNESS_PROVIDER".to_string(), "cloud".to_string())]);
        assert!(Config::load_with_env(None, &env).is_err());
    }
}
