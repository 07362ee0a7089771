//! Cascaded skill matching: trigger keywords, then description embeddings,
//! then an LLM intent classifier. The first stage that produces a skill wins.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ProviderError, Result};
use crate::fsio::{self, SharedFs};
use crate::message::Message;
use crate::provider::{ChatProvider, ChatPurpose, ChatRequest, EmbeddingProvider};
use crate::skills::{Skill, SkillStore};

pub const DEFAULT_THETA: f64 = 0.6;
/// Fixed confidence reported for LLM-stage matches.
pub const LLM_CONFIDENCE: f64 = 0.7;
pub const NONE_ANSWER: &str = "NONE";

pub const INTENT_INSTRUCTIONS: &str = "You route user requests to skills. \
Reply with exactly one skill name from the list below, or the single word NONE \
if no skill fits. Reply with nothing else.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Minimum cosine similarity for an embedding match (inclusive).
    pub theta: f64,
    /// Require triggers to sit on word boundaries instead of plain substring containment.
    #[serde(default)]
    pub word_boundary: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            word_boundary: false,
        }
    }
}

impl MatcherConfig {
    pub fn with_theta(theta: f64) -> Result<Self> {
        let config = Self {
            theta,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchType {
    Keyword,
    Embedding,
    Llm,
}

impl fmt::Display for MatchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchType::Keyword => "keyword",
            MatchType::Embedding => "embedding",
            MatchType::Llm => "llm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub skill_name: String,
    pub match_type: MatchType,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "reason", rename_all = "snake_case")]
pub enum Degradation {
    EmbeddingUnavailable(String),
    LlmUnavailable(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub result: Option<MatchResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degraded: Vec<Degradation>,
}

/// `dot(a, b) / (|a| |b|)`; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

fn contains_on_word_boundary(haystack: &str, needle: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack.match_indices(needle).any(|(start, _)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + needle.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// Stage 1: first skill (name order) owning a trigger contained in the input,
/// compared case-insensitively.
pub fn keyword_match(user_input: &str, store: &SkillStore, word_boundary: bool) -> Option<MatchResult> {
    let input = user_input.to_lowercase();
    for skill in store.iter() {
        for trigger in &skill.triggers {
            let trigger = trigger.to_lowercase();
            let hit = if word_boundary {
                contains_on_word_boundary(&input, &trigger)
            } else {
                input.contains(&trigger)
            };
            if hit {
                return Some(MatchResult {
                    skill_name: skill.name.to_string(),
                    match_type: MatchType::Keyword,
                    confidence: 1.0,
                });
            }
        }
    }
    None
}

/// Stage 2: argmax cosine between the input and each description. Ties go to
/// the earlier name; the best score must reach `theta`.
pub fn embedding_match(
    user_input: &str,
    store: &SkillStore,
    theta: f64,
    cache: &EmbeddingCache,
    provider: &dyn EmbeddingProvider,
) -> Result<Option<MatchResult>, ProviderError> {
    if store.is_empty() {
        return Ok(None);
    }
    let query = provider.embed(user_input)?;
    let mut best: Option<(&Skill, f64)> = None;
    let scored = (|| {
        for skill in store.iter() {
            let vector = cache.vector_with_dimension(skill, provider, query.len())?;
            let score = cosine_similarity(&query, &vector)
                .map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((skill, score));
            }
        }
        Ok(())
    })();
    cache.flush();
    scored?;
    Ok(best.filter(|(_, score)| *score >= theta).map(|(skill, score)| MatchResult {
        skill_name: skill.name.to_string(),
        match_type: MatchType::Embedding,
        confidence: score,
    }))
}

/// The request sent to the chat model for stage 3.
pub fn intent_request(user_input: &str, store: &SkillStore) -> ChatRequest {
    let mut listing = String::from("Skills:\n");
    for skill in store.iter() {
        listing.push_str(&format!("- {}: {}\n", skill.name, skill.description));
    }
    listing.push_str(&format!("\nUser request:\n{user_input}"));
    ChatRequest {
        purpose: ChatPurpose::IntentClassification,
        instructions: INTENT_INSTRUCTIONS.to_string(),
        messages: vec![Message::user(listing)],
        tools: Vec::new(),
    }
}

/// Stage 3: the model names one skill or answers NONE. Anything that is not an
/// exact known name yields no match.
pub fn llm_match(
    user_input: &str,
    store: &SkillStore,
    chat: &dyn ChatProvider,
) -> Result<Option<MatchResult>, ProviderError> {
    if store.is_empty() {
        return Ok(None);
    }
    let reply = chat.chat(&intent_request(user_input, store))?;
    let answer = reply.content.trim();
    if answer == NONE_ANSWER {
        return Ok(None);
    }
    Ok(store.get(answer).map(|skill| MatchResult {
        skill_name: skill.name.to_string(),
        match_type: MatchType::Llm,
        confidence: LLM_CONFIDENCE,
    }))
}

/// Runs the cascade. Provider failures skip their stage and are reported in
/// [`MatchOutcome::degraded`]; they never fail the call.
pub fn match_skill(
    user_input: &str,
    store: &SkillStore,
    config: &MatcherConfig,
    cache: &EmbeddingCache,
    embed: &dyn EmbeddingProvider,
    chat: &dyn ChatProvider,
) -> MatchOutcome {
    let mut outcome = MatchOutcome::default();
    if store.is_empty() || user_input.trim().is_empty() {
        return outcome;
    }
    if let Some(hit) = keyword_match(user_input, store, config.word_boundary) {
        outcome.result = Some(hit);
        return outcome;
    }
    match embedding_match(user_input, store, config.theta, cache, embed) {
        Ok(Some(hit)) => {
            outcome.result = Some(hit);
            return outcome;
        }
        Ok(None) => {}
        Err(e) => {
            tracing::warn!(error = %e, "embedding stage skipped");
            outcome.degraded.push(Degradation::EmbeddingUnavailable(e.to_string()));
        }
    }
    match llm_match(user_input, store, chat) {
        Ok(hit) => outcome.result = hit,
        Err(e) => {
            tracing::warn!(error = %e, "llm stage skipped");
            outcome.degraded.push(Degradation::LlmUnavailable(e.to_string()));
        }
    }
    outcome
}

pub fn desc_digest(description: &str) -> String {
    hex::encode(Sha256::digest(description.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCacheEntry {
    pub skill_name: String,
    pub desc_digest: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CacheFile {
    model_id: String,
    entries: BTreeMap<String, EmbeddingCacheEntry>,
    #[serde(skip)]
    dirty: bool,
}

/// Description embeddings keyed by (skill name, description digest), persisted
/// as a JSON sidecar so restarts do not re-embed unchanged skills.
pub struct EmbeddingCache {
    location: Option<(PathBuf, SharedFs)>,
    data: RwLock<CacheFile>,
}

impl fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("path", &self.location.as_ref().map(|(p, _)| p))
            .field("entries", &self.len())
            .finish()
    }
}

impl Default for EmbeddingCache {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            location: None,
            data: RwLock::new(CacheFile::default()),
        }
    }

    /// Loads the sidecar at `path`; a missing or unreadable file starts empty.
    pub fn load(path: PathBuf, fs: SharedFs) -> Self {
        let data = fs
            .read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str::<CacheFile>(&text).ok())
            .unwrap_or_default();
        Self {
            location: Some((path, fs)),
            data: RwLock::new(data),
        }
    }

    pub fn len(&self) -> usize {
        self.data.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, skill_name: &str) -> Option<EmbeddingCacheEntry> {
        self.data.read().unwrap().entries.get(skill_name).cloned()
    }

    /// Cached description vector, recomputed when the description or the model changed.
    pub fn vector_for(
        &self,
        skill: &Skill,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<f64>, ProviderError> {
        self.lookup(skill, provider, None)
    }

    /// Like [`vector_for`](Self::vector_for), also treating a cached vector of
    /// another dimension as stale.
    pub fn vector_with_dimension(
        &self,
        skill: &Skill,
        provider: &dyn EmbeddingProvider,
        dimension: usize,
    ) -> Result<Vec<f64>, ProviderError> {
        self.lookup(skill, provider, Some(dimension))
    }

    fn lookup(
        &self,
        skill: &Skill,
        provider: &dyn EmbeddingProvider,
        dimension: Option<usize>,
    ) -> Result<Vec<f64>, ProviderError> {
        let digest = desc_digest(&skill.description);
        {
            let data = self.data.read().unwrap();
            if data.model_id == provider.model_id() {
                if let Some(entry) = data.entries.get(skill.name.as_str()) {
                    if entry.desc_digest == digest && dimension.is_none_or(|d| d == entry.vector.len()) {
                        return Ok(entry.vector.clone());
                    }
                }
            }
        }
        let vector = provider.embed(&skill.description)?;
        let mut data = self.data.write().unwrap();
        if data.model_id != provider.model_id() {
            data.entries.clear();
            data.model_id = provider.model_id().to_string();
        }
        data.entries.insert(
            skill.name.to_string(),
            EmbeddingCacheEntry {
                skill_name: skill.name.to_string(),
                desc_digest: digest,
                vector: vector.clone(),
            },
        );
        data.dirty = true;
        Ok(vector)
    }

    /// Writes pending changes to the sidecar file, if any.
    pub fn flush(&self) {
        let Some((path, fs)) = &self.location else {
            return;
        };
        let mut data = self.data.write().unwrap();
        if !data.dirty {
            return;
        }
        let result = serde_json::to_vec_pretty(&*data)
            .map_err(std::io::Error::other)
            .and_then(|bytes| {
                if let Some(parent) = path.parent() {
                    fs.create_dir_all(parent)?;
                }
                fsio::write_atomic(fs.as_ref(), path, &bytes)
            });
        match result {
            Ok(()) => data.dirty = false,
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "embedding cache not persisted"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{AssistantReply, MockChatProvider, MockEmbeddingProvider};
    use crate::skills::Slug;
    use chrono::Utc;

    fn store_with(skills: &[(&str, &str, &[&str])]) -> (tempfile::TempDir, SkillStore) {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SkillStore::load(tmp.path()).unwrap();
        for (name, desc, triggers) in skills {
            let mut skill = Skill::new(Slug::parse(*name).unwrap(), *desc, Utc::now());
            skill.triggers = triggers.iter().map(|t| t.to_string()).collect();
            store.save_skill(skill).unwrap();
        }
        (tmp, store)
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-6);
        assert!((got - 0.974631).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn keyword_is_case_insensitive_substring() {
        let (_t, store) = store_with(&[("hs", "customs", &["hs code"]), ("q", "quotes", &["quote"])]);
        let hit = keyword_match("What HS Code applies?", &store, false).unwrap();
        assert_eq!((hit.skill_name.as_str(), hit.confidence), ("hs", 1.0));
        assert_eq!(keyword_match("unquoted", &store, false).unwrap().skill_name, "q");
        assert!(keyword_match("unquoted", &store, true).is_none());
        assert!(keyword_match("a quote, please", &store, true).is_some());
    }

    #[test]
    fn keyword_without_triggers_is_none() {
        let (_t, store) = store_with(&[("a", "desc", &[])]);
        assert!(keyword_match("anything", &store, false).is_none());
    }

    #[test]
    fn earlier_name_wins_on_double_trigger() {
        let (_t, store) = store_with(&[("zeta", "z", &["ship"]), ("alpha", "a", &["ship"])]);
        assert_eq!(keyword_match("ship it", &store, false).unwrap().skill_name, "alpha");
    }

    #[test]
    fn keyword_hit_makes_no_provider_calls() {
        let (_t, store) = store_with(&[("a", "desc", &["go"])]);
        let embed = MockEmbeddingProvider::new(4);
        let chat = MockChatProvider::new();
        let out = match_skill("go now", &store, &MatcherConfig::default(), &EmbeddingCache::in_memory(), &embed, &chat);
        assert_eq!(out.result.unwrap().match_type, MatchType::Keyword);
        assert_eq!(embed.call_count() + chat.call_count(), 0);
    }

    #[test]
    fn empty_store_makes_no_provider_calls() {
        let (_t, store) = store_with(&[]);
        let embed = MockEmbeddingProvider::new(4);
        let chat = MockChatProvider::new();
        let out = match_skill("hello", &store, &MatcherConfig::default(), &EmbeddingCache::in_memory(), &embed, &chat);
        assert!(out.result.is_none());
        assert_eq!(embed.call_count() + chat.call_count(), 0);
    }

    #[test]
    fn single_skill_embedding_match_reports_cosine() {
        let (_t, store) = store_with(&[("s", "skill desc", &[])]);
        let desc = vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt()];
        let embed = MockEmbeddingProvider::strict(2)
            .with_vector("input", vec![1.0, 0.0])
            .with_vector("skill desc", desc.clone());
        let hit = embedding_match("input", &store, 0.6, &EmbeddingCache::in_memory(), &embed)
            .unwrap()
            .unwrap();
        let expected = cosine_similarity(&[1.0, 0.0], &desc).unwrap();
        assert_eq!(hit.match_type, MatchType::Embedding);
        assert!((hit.confidence - 0.95).abs() < 1e-12);
        assert_eq!(hit.confidence, expected);
    }

    #[test]
    fn below_threshold_falls_through_to_llm() {
        let (_t, store) = store_with(&[("s", "skill desc", &[])]);
        let embed = MockEmbeddingProvider::strict(2)
            .with_vector("input", vec![1.0, 0.0])
            .with_vector("skill desc", vec![0.59, (1.0f64 - 0.59 * 0.59).sqrt()]);
        let chat = MockChatProvider::new();
        chat.push_reply(ChatPurpose::IntentClassification, AssistantReply::text("s"));
        let out = match_skill("input", &store, &MatcherConfig::default(), &EmbeddingCache::in_memory(), &embed, &chat);
        let hit = out.result.unwrap();
        assert_eq!((hit.match_type, hit.confidence), (MatchType::Llm, LLM_CONFIDENCE));
        assert_eq!(chat.calls_for(ChatPurpose::IntentClassification), 1);
    }

    #[test]
    fn equal_vectors_prefer_earlier_name() {
        let (_t, store) = store_with(&[("b", "desc b", &[]), ("a", "desc a", &[])]);
        let embed = MockEmbeddingProvider::strict(2)
            .with_vector("q", vec![1.0, 1.0])
            .with_vector("desc a", vec![1.0, 1.0])
            .with_vector("desc b", vec![1.0, 1.0]);
        let hit = embedding_match("q", &store, 0.6, &EmbeddingCache::in_memory(), &embed)
            .unwrap()
            .unwrap();
        assert_eq!(hit.skill_name, "a");
    }

    #[test]
    fn all_scores_below_theta_is_none() {
        let (_t, store) = store_with(&[("a", "desc a", &[])]);
        let embed = MockEmbeddingProvider::strict(2)
            .with_vector("q", vec![1.0, 0.0])
            .with_vector("desc a", vec![0.0, 1.0]);
        assert!(embedding_match("q", &store, 0.6, &EmbeddingCache::in_memory(), &embed)
            .unwrap()
            .is_none());
    }

    #[test]
    fn llm_answers_are_parsed_strictly() {
        let (_t, store) = store_with(&[("quotation", "quotes", &[])]);
        let chat = MockChatProvider::new();
        chat.push_reply(ChatPurpose::IntentClassification, AssistantReply::text(" quotation\n"));
        chat.push_reply(ChatPurpose::IntentClassification, AssistantReply::text("NONE"));
        chat.push_reply(
            ChatPurpose::IntentClassification,
            AssistantReply::text("I think the quotation skill fits"),
        );
        let first = llm_match("x", &store, &chat).unwrap().unwrap();
        assert_eq!((first.skill_name.as_str(), first.confidence), ("quotation", 0.7));
        assert!(llm_match("x", &store, &chat).unwrap().is_none());
        assert!(llm_match("x", &store, &chat).unwrap().is_none());
    }

    #[test]
    fn provider_failures_degrade() {
        let (_t, store) = store_with(&[("a", "desc a", &[])]);
        let embed = MockEmbeddingProvider::new(4);
        embed.set_unavailable(true);
        let chat = MockChatProvider::new();
        chat.set_unavailable(true);
        let out = match_skill("q", &store, &MatcherConfig::default(), &EmbeddingCache::in_memory(), &embed, &chat);
        assert!(out.result.is_none());
        assert_eq!(out.degraded.len(), 2);
    }

    #[test]
    fn cache_recomputes_after_description_edit() {
        let (_t, mut store) = store_with(&[("a", "old desc", &[])]);
        let embed = MockEmbeddingProvider::new(8);
        let cache = EmbeddingCache::in_memory();
        embedding_match("q", &store, 0.6, &cache, &embed).unwrap();
        embedding_match("q", &store, 0.6, &cache, &embed).unwrap();
        // one query embed per call plus one description embed
        assert_eq!(embed.call_count(), 3);

        let mut skill = store.get("a").unwrap().clone();
        skill.description = "new desc".into();
        store.save_skill(skill).unwrap();
        embedding_match("q", &store, 0.6, &cache, &embed).unwrap();
        assert_eq!(embed.call_count(), 5);
        assert_eq!(cache.entry("a").unwrap().desc_digest, desc_digest("new desc"));
    }

    #[test]
    fn cache_persists_across_loads() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cache.json");
        let (_t, store) = store_with(&[("a", "desc a", &[])]);
        let embed = MockEmbeddingProvider::new(8);
        let cache = EmbeddingCache::load(path.clone(), fsio::os_fs());
        embedding_match("q", &store, 0.6, &cache, &embed).unwrap();
        let reloaded = EmbeddingCache::load(path, fsio::os_fs());
        assert_eq!(reloaded.len(), 1);
        embedding_match("q", &store, 0.6, &reloaded, &embed).unwrap();
        assert_eq!(embed.call_count(), 3);
    }

    #[test]
    fn theta_outside_unit_interval_is_rejected() {
        assert!(MatcherConfig::with_theta(1.5).is_err());
        assert!(MatcherConfig::with_theta(-0.1).is_err());
        assert!(MatcherConfig::with_theta(0.6).is_ok());
    }
}
