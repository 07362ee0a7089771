//! Skill packages on disk: parsing, atomic persistence, usage tracking, and
//! the maturity ladder.
//!
//! A skill lives in `configs/skills/{name}/` as a `SKILL.md` file (front
//! matter + Markdown body) plus an optional `references/` directory whose
//! files are listed at parse time but only read on demand.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{self, SharedFs};

pub const SKILL_FILE: &str = "SKILL.md";
pub const REFERENCES_DIR: &str = "references";

/// Lowercase slug: `[a-z0-9-]+`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Slug(String);

impl Slug {
    pub fn parse(raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        if is_valid_slug(&raw) {
            Ok(Slug(raw))
        } else {
            Err(Error::MalformedSkill(format!("invalid skill name {raw:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn is_valid_slug(raw: &str) -> bool {
    !raw.is_empty()
        && raw
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

impl TryFrom<String> for Slug {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Slug::parse(value)
    }
}

impl From<Slug> for String {
    fn from(value: Slug) -> Self {
        value.0
    }
}

impl fmt::Display for Slug {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for Slug {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl std::ops::Deref for Slug {
    type Target = str;
    fn deref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubAgentSpec {
    pub name: String,
    pub instructions: String,
    #[serde(default)]
    pub tools: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillMeta {
    pub usage_count: u64,
    pub success_count: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// A change to a skill's usage counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum UsageEvent {
    /// One more invocation with its verdict.
    Used { success: bool },
    /// Revises the verdict of an earlier invocation (explicit user feedback).
    Amended { from: bool, to: bool },
}

impl SkillMeta {
    pub fn new(now: DateTime<Utc>) -> Self {
        let now = now.trunc_subsecs(0);
        Self {
            usage_count: 0,
            success_count: 0,
            created_at: now,
            updated_at: now,
        }
    }

    /// `success_count / usage_count`, or 1.0 for an unused skill.
    pub fn success_rate(&self) -> f64 {
        if self.usage_count == 0 {
            1.0
        } else {
            self.success_count as f64 / self.usage_count as f64
        }
    }

    pub fn maturity(&self) -> MaturityLevel {
        classify_maturity(self.usage_count, self.success_rate())
    }

    pub fn validate(&self) -> Result<()> {
        if self.success_count > self.usage_count {
            return Err(Error::MalformedSkill(format!(
                "success_count {} exceeds usage_count {}",
                self.success_count, self.usage_count
            )));
        }
        if self.updated_at < self.created_at {
            return Err(Error::MalformedSkill(
                "updated_at precedes created_at".into(),
            ));
        }
        Ok(())
    }

    /// Applies one usage event. The only place the counters change.
    pub fn apply(&self, event: UsageEvent, now: DateTime<Utc>) -> SkillMeta {
        let mut next = *self;
        match event {
            UsageEvent::Used { success } => {
                next.usage_count += 1;
                if success {
                    next.success_count += 1;
                }
            }
            UsageEvent::Amended { from, to } => match (from, to) {
                (true, false) => next.success_count = next.success_count.saturating_sub(1),
                (false, true) => {
                    next.success_count = (next.success_count + 1).min(next.usage_count)
                }
                _ => {}
            },
        }
        next.updated_at = now.trunc_subsecs(0).max(next.created_at);
        next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MaturityLevel {
    Budding,
    Growing,
    Mature,
    Proficient,
}

impl MaturityLevel {
    pub fn ordinal(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for MaturityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            MaturityLevel::Budding => "Budding",
            MaturityLevel::Growing => "Growing",
            MaturityLevel::Mature => "Mature",
            MaturityLevel::Proficient => "Proficient",
        };
        f.write_str(label)
    }
}

/// Threshold cascade: Proficient (≥10 uses, ≥0.85), Mature (≥4, ≥0.7),
/// Growing (≥1), otherwise Budding.
pub fn classify_maturity(usage_count: u64, success_rate: f64) -> MaturityLevel {
    if usage_count >= 10 && success_rate >= 0.85 {
        MaturityLevel::Proficient
    } else if usage_count >= 4 && success_rate >= 0.7 {
        MaturityLevel::Mature
    } else if usage_count >= 1 {
        MaturityLevel::Growing
    } else {
        MaturityLevel::Budding
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub name: Slug,
    pub description: String,
    pub triggers: Vec<String>,
    pub instructions: String,
    /// Reference name → path relative to the skill directory.
    pub references: BTreeMap<String, String>,
    pub requires_sub_agent: bool,
    pub sub_agent: Option<SubAgentSpec>,
    pub meta: SkillMeta,
}

impl Skill {
    pub fn new(name: Slug, description: impl Into<String>, now: DateTime<Utc>) -> Self {
        Self {
            name,
            description: description.into(),
            triggers: Vec::new(),
            instructions: String::new(),
            references: BTreeMap::new(),
            requires_sub_agent: false,
            sub_agent: None,
            meta: SkillMeta::new(now),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(Error::MalformedSkill(format!("{}: empty description", self.name)));
        }
        let mut seen = HashSet::new();
        for trigger in &self.triggers {
            if trigger.trim().is_empty() {
                return Err(Error::MalformedSkill(format!("{}: empty trigger", self.name)));
            }
            if !seen.insert(trigger.to_lowercase()) {
                return Err(Error::MalformedSkill(format!(
                    "{}: duplicate trigger {trigger:?}",
                    self.name
                )));
            }
        }
        for (reference, path) in &self.references {
            if !is_contained_reference(path) {
                return Err(Error::MalformedSkill(format!(
                    "{}: reference {reference} escapes the skill directory ({path})",
                    self.name
                )));
            }
        }
        if self.requires_sub_agent {
            match &self.sub_agent {
                Some(spec) if !spec.name.trim().is_empty() => {}
                _ => {
                    return Err(Error::MalformedSkill(format!(
                        "{}: requires_sub_agent without a sub_agent block",
                        self.name
                    )))
                }
            }
        }
        self.meta.validate()
    }
}

fn is_contained_reference(path: &str) -> bool {
    let path = Path::new(path);
    let mut components = path.components();
    matches!(components.next(), Some(Component::Normal(first)) if first == REFERENCES_DIR)
        && components.clone().next().is_some()
        && components.all(|c| matches!(c, Component::Normal(_)))
}

#[derive(Debug, Serialize, Deserialize)]
struct FrontMatter {
    name: Option<String>,
    description: Option<String>,
    #[serde(default)]
    triggers: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    requires_sub_agent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sub_agent: Option<SubAgentSpec>,
    #[serde(default)]
    metadata: Option<RawMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMeta {
    usage_count: Option<i64>,
    success_count: Option<i64>,
    created_at: Option<String>,
    updated_at: Option<String>,
}

fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_timestamp(field: &str, raw: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(raw.trim())
        .map(|ts| ts.with_timezone(&Utc).trunc_subsecs(0))
        .map_err(|e| Error::MalformedSkill(format!("{field}: {raw:?} is not an ISO-8601 timestamp ({e})")))
}

fn non_negative(field: &str, value: Option<i64>) -> Result<u64> {
    match value {
        None => Ok(0),
        Some(v) if v >= 0 => Ok(v as u64),
        Some(v) => Err(Error::MalformedSkill(format!("{field} must be non-negative, got {v}"))),
    }
}

/// Splits `---` front matter from the Markdown body.
fn split_front_matter(text: &str) -> Result<(&str, &str)> {
    let rest = text
        .strip_prefix("---\n")
        .or_else(|| text.strip_prefix("---\r\n"))
        .ok_or_else(|| Error::MalformedSkill("SKILL.md does not start with front matter".into()))?;
    let mut offset = 0;
    for line in rest.split_inclusive('\n') {
        if line.trim_end_matches(['\n', '\r']) == "---" {
            return Ok((&rest[..offset], &rest[offset + line.len()..]));
        }
        offset += line.len();
    }
    Err(Error::MalformedSkill("unclosed front matter".into()))
}

/// Parses the text of a SKILL.md. `references` comes from the directory listing.
pub fn parse_skill_text(
    text: &str,
    references: BTreeMap<String, String>,
    now: DateTime<Utc>,
) -> Result<Skill> {
    let (yaml, body) = split_front_matter(text)?;
    let front: FrontMatter = serde_yaml::from_str(yaml)
        .map_err(|e| Error::MalformedSkill(format!("front matter: {e}")))?;
    let name = front
        .name
        .ok_or_else(|| Error::MalformedSkill("missing name".into()))?;
    let description = front
        .description
        .ok_or_else(|| Error::MalformedSkill("missing description".into()))?;
    let name = Slug::parse(name)?;

    let meta = match front.metadata {
        None => SkillMeta::new(now),
        Some(raw) => {
            let usage_count = non_negative("usage_count", raw.usage_count)?;
            let success_count = non_negative("success_count", raw.success_count)?;
            let created_at = match raw.created_at.as_deref() {
                Some(ts) => parse_timestamp("created_at", ts)?,
                None => now.trunc_subsecs(0),
            };
            let updated_at = match raw.updated_at.as_deref() {
                Some(ts) => parse_timestamp("updated_at", ts)?,
                None => created_at,
            };
            SkillMeta {
                usage_count,
                success_count,
                created_at,
                updated_at,
            }
        }
    };

    let skill = Skill {
        name,
        description,
        triggers: front.triggers,
        instructions: body.to_string(),
        references,
        requires_sub_agent: front.requires_sub_agent,
        sub_agent: front.sub_agent,
        meta,
    };
    skill.validate()?;
    Ok(skill)
}

/// Renders a skill back into SKILL.md text.
pub fn render_skill(skill: &Skill) -> Result<String> {
    let front = FrontMatter {
        name: Some(skill.name.to_string()),
        description: Some(skill.description.clone()),
        triggers: skill.triggers.clone(),
        requires_sub_agent: skill.requires_sub_agent,
        sub_agent: skill.sub_agent.clone(),
        metadata: Some(RawMeta {
            usage_count: Some(skill.meta.usage_count as i64),
            success_count: Some(skill.meta.success_count as i64),
            created_at: Some(format_timestamp(&skill.meta.created_at)),
            updated_at: Some(format_timestamp(&skill.meta.updated_at)),
        }),
    };
    let yaml = serde_yaml::to_string(&front)
        .map_err(|e| Error::MalformedSkill(format!("serializing front matter: {e}")))?;
    Ok(format!("---\n{yaml}---\n{}", skill.instructions))
}

/// Parses one skill directory. Reference files are enumerated, never read.
pub fn parse_skill(fs: &dyn fsio::FileSystem, skill_dir: &Path) -> Result<Skill> {
    let skill_file = skill_dir.join(SKILL_FILE);
    if !fs.is_file(&skill_file) {
        return Err(Error::SkillNotFound(skill_dir.display().to_string()));
    }
    let text = fs
        .read_to_string(&skill_file)
        .map_err(|e| Error::io(&skill_file, e))?;
    let references = list_references(fs, skill_dir)?;
    let skill = parse_skill_text(&text, references, Utc::now())?;
    let dir_name = skill_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if dir_name != skill.name.as_str() {
        return Err(Error::MalformedSkill(format!(
            "skill {} stored in directory {dir_name:?}",
            skill.name
        )));
    }
    Ok(skill)
}

fn list_references(fs: &dyn fsio::FileSystem, skill_dir: &Path) -> Result<BTreeMap<String, String>> {
    let dir = skill_dir.join(REFERENCES_DIR);
    let mut references = BTreeMap::new();
    if !fs.is_dir(&dir) {
        return Ok(references);
    }
    for entry in fs.list_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        if !fs.is_file(&entry) {
            continue;
        }
        if let Some(file_name) = entry.file_name().and_then(|n| n.to_str()) {
            references.insert(file_name.to_string(), format!("{REFERENCES_DIR}/{file_name}"));
        }
    }
    Ok(references)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub reason: String,
}

/// Read-only copy of a store's skills, in name order.
pub type SkillsView = BTreeMap<Slug, Skill>;

/// All skills of one workspace. Iteration is always in ascending name order.
#[derive(Debug, Clone)]
pub struct SkillStore {
    root: PathBuf,
    fs: SharedFs,
    skills: SkillsView,
    warnings: Vec<LoadWarning>,
}

impl SkillStore {
    pub fn skills_dir(workspace_root: &Path) -> PathBuf {
        workspace_root.join("configs").join("skills")
    }

    pub fn load(workspace_root: &Path) -> Result<Self> {
        Self::load_with_fs(workspace_root, fsio::os_fs())
    }

    /// Loads every parseable skill; malformed directories become warnings.
    pub fn load_with_fs(workspace_root: &Path, fs: SharedFs) -> Result<Self> {
        if !fs.is_dir(workspace_root) {
            return Err(Error::io(
                workspace_root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "workspace root missing"),
            ));
        }
        let root = Self::skills_dir(workspace_root);
        let mut store = SkillStore {
            root,
            fs,
            skills: BTreeMap::new(),
            warnings: Vec::new(),
        };
        if !store.fs.is_dir(&store.root) {
            return Ok(store);
        }
        let entries = store
            .fs
            .list_dir(&store.root)
            .map_err(|e| Error::io(&store.root, e))?;
        for dir in entries.into_iter().filter(|p| store.fs.is_dir(p)) {
            match parse_skill(store.fs.as_ref(), &dir) {
                Ok(skill) => {
                    store.skills.insert(skill.name.clone(), skill);
                }
                Err(err) => {
                    tracing::warn!(path = %dir.display(), error = %err, "skipping skill");
                    store.warnings.push(LoadWarning {
                        path: dir,
                        reason: err.to_string(),
                    });
                }
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn warnings(&self) -> &[LoadWarning] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Skill> {
        self.skills.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.skills.keys().map(|k| k.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Skill> {
        let slug = Slug::parse(name).ok()?;
        self.skills.get(&slug)
    }

    pub fn snapshot(&self) -> SkillsView {
        self.skills.clone()
    }

    pub fn save_skill(&mut self, skill: Skill) -> Result<()> {
        let dir_name = skill.name.to_string();
        self.save_skill_as(&dir_name, skill)
    }

    /// Saves `skill` into directory `dir_name`, which must equal its name.
    pub fn save_skill_as(&mut self, dir_name: &str, skill: Skill) -> Result<()> {
        if dir_name != skill.name.as_str() {
            return Err(Error::MalformedSkill(format!(
                "skill {} cannot be saved under directory {dir_name:?}",
                skill.name
            )));
        }
        skill.validate()?;
        let text = render_skill(&skill)?;
        let dir = self.root.join(dir_name);
        self.fs.create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(SKILL_FILE);
        fsio::write_atomic(self.fs.as_ref(), &path, text.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        self.skills.insert(skill.name.clone(), skill);
        Ok(())
    }

    pub fn delete_skill(&mut self, name: &str) -> Result<Skill> {
        let slug = Slug::parse(name).map_err(|_| Error::SkillNotFound(name.to_string()))?;
        let skill = self
            .skills
            .remove(&slug)
            .ok_or_else(|| Error::SkillNotFound(name.to_string()))?;
        let dir = self.root.join(slug.as_str());
        if let Err(e) = self.fs.remove_dir_all(&dir) {
            self.skills.insert(slug, skill);
            return Err(Error::io(&dir, e));
        }
        Ok(skill)
    }

    /// Counts one invocation of `name`; persists the new metadata.
    pub fn record_usage(&mut self, name: &str, success: bool) -> Result<SkillMeta> {
        self.apply_usage_event(name, UsageEvent::Used { success })
    }

    /// Revises the verdict of a previously recorded invocation.
    pub fn amend_usage(&mut self, name: &str, from: bool, to: bool) -> Result<SkillMeta> {
        self.apply_usage_event(name, UsageEvent::Amended { from, to })
    }

    pub fn apply_usage_event(&mut self, name: &str, event: UsageEvent) -> Result<SkillMeta> {
        let mut skill = self
            .get(name)
            .cloned()
            .ok_or_else(|| Error::SkillNotFound(name.to_string()))?;
        skill.meta = skill.meta.apply(event, Utc::now());
        let meta = skill.meta;
        self.save_skill(skill)?;
        Ok(meta)
    }

    /// Reads one reference file of a skill. This is the only path that opens
    /// files under `references/`.
    pub fn read_reference(&self, name: &str, reference: &str) -> Result<String> {
        let skill = self
            .get(name)
            .ok_or_else(|| Error::SkillNotFound(name.to_string()))?;
        let rel = skill
            .references
            .get(reference)
            .ok_or_else(|| Error::SkillNotFound(format!("{name}/{reference}")))?;
        let path = self.root.join(name).join(rel);
        self.fs.read_to_string(&path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsio::testing::InstrumentedFs;
    use proptest::prelude::*;
    use std::sync::atomic::Ordering;
    use std::sync::Arc;

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn write_skill(root: &Path, dir: &str, text: &str) {
        let d = SkillStore::skills_dir(root).join(dir);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join(SKILL_FILE), text).unwrap();
    }

    fn minimal(name: &str) -> String {
        format!("---\nname: {name}\ndescription: does {name}\ntriggers: [\"{name}\"]\n---\n")
    }

    #[test]
    fn maturity_table() {
        assert_eq!(classify_maturity(10, 0.85), MaturityLevel::Proficient);
        assert_eq!(classify_maturity(4, 0.7), MaturityLevel::Mature);
        assert_eq!(classify_maturity(0, 1.0), MaturityLevel::Budding);
        assert_eq!(classify_maturity(12, 0.5), MaturityLevel::Growing);
        assert!(MaturityLevel::Budding < MaturityLevel::Growing);
        assert!(MaturityLevel::Mature < MaturityLevel::Proficient);
    }

    #[test]
    fn success_rate_of_unused_skill_is_one() {
        let meta = SkillMeta::new(Utc::now());
        assert_eq!(meta.success_rate(), 1.0);
        assert_eq!(meta.maturity(), MaturityLevel::Budding);
    }

    #[test]
    fn empty_skills_dir_loads_empty_store() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(SkillStore::skills_dir(tmp.path())).unwrap();
        let store = SkillStore::load(tmp.path()).unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn missing_root_is_store_unavailable() {
        let err = SkillStore::load(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, Error::StoreUnavailable { .. }));
    }

    #[test]
    fn load_orders_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "b", &minimal("b"));
        write_skill(tmp.path(), "a", &minimal("a"));
        let store = SkillStore::load(tmp.path()).unwrap();
        let names: Vec<_> = store.names().collect();
        let mut expected = vec!["b", "a"];
        expected.sort();
        assert_eq!(names, expected);
    }

    #[test]
    fn malformed_skill_is_skipped_with_warning() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "good", &minimal("good"));
        write_skill(tmp.path(), "bad", "---\nname: bad\ndescription: never closed\n");
        let store = SkillStore::load(tmp.path()).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.warnings().len(), 1);
        assert!(store.warnings()[0].reason.contains("unclosed"));
    }

    #[test]
    fn minimal_skill_gets_default_meta() {
        let skill = parse_skill_text(&minimal("x"), BTreeMap::new(), Utc::now()).unwrap();
        assert_eq!(skill.instructions, "");
        assert_eq!(skill.meta.usage_count, 0);
        assert_eq!(skill.meta.success_rate(), 1.0);
    }

    #[test]
    fn negative_usage_count_is_malformed() {
        let text = "---\nname: x\ndescription: d\nmetadata:\n  usage_count: -1\n---\n";
        let err = parse_skill_text(text, BTreeMap::new(), Utc::now()).unwrap_err();
        assert!(matches!(err, Error::MalformedSkill(_)));
    }

    #[test]
    fn bad_timestamp_is_malformed() {
        let text = "---\nname: x\ndescription: d\nmetadata:\n  created_at: yesterday\n---\n";
        assert!(matches!(
            parse_skill_text(text, BTreeMap::new(), Utc::now()),
            Err(Error::MalformedSkill(_))
        ));
    }

    #[test]
    fn missing_description_is_malformed() {
        let text = "---\nname: x\n---\nbody";
        assert!(matches!(
            parse_skill_text(text, BTreeMap::new(), Utc::now()),
            Err(Error::MalformedSkill(_))
        ));
    }

    #[test]
    fn missing_skill_file_is_not_found() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            parse_skill(&crate::fsio::OsFs, tmp.path()),
            Err(Error::SkillNotFound(_))
        ));
    }

    #[test]
    fn references_are_listed_but_not_read() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "quote", &minimal("quote"));
        let refs = SkillStore::skills_dir(tmp.path()).join("quote").join(REFERENCES_DIR);
        std::fs::create_dir_all(&refs).unwrap();
        std::fs::write(refs.join("pricing.md"), "price list").unwrap();
        std::fs::write(refs.join("hs_codes.md"), "codes").unwrap();

        let fs = Arc::new(InstrumentedFs::default());
        let store = SkillStore::load_with_fs(tmp.path(), fs.clone()).unwrap();
        let skill = store.get("quote").unwrap();
        assert_eq!(skill.references.len(), 2);
        assert_eq!(fs.reads_of(REFERENCES_DIR), 0);
        assert_eq!(fs.reads_of(SKILL_FILE), 1);

        assert_eq!(store.read_reference("quote", "pricing.md").unwrap(), "price list");
        assert_eq!(fs.reads_of("pricing.md"), 1);
        assert_eq!(fs.reads_of("hs_codes.md"), 0);
    }

    #[test]
    fn traversal_reference_is_rejected() {
        let mut skill = Skill::new(Slug::parse("x").unwrap(), "d", Utc::now());
        skill.references.insert("evil".into(), "references/../../etc/passwd".into());
        assert!(skill.validate().is_err());
        skill.references.insert("evil".into(), "/etc/passwd".into());
        assert!(skill.validate().is_err());
    }

    #[test]
    fn duplicate_triggers_case_insensitive_are_rejected() {
        let mut skill = Skill::new(Slug::parse("x").unwrap(), "d", Utc::now());
        skill.triggers = vec!["Quote".into(), "quote".into()];
        assert!(skill.validate().is_err());
    }

    #[test]
    fn save_under_other_directory_is_malformed() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SkillStore::load(tmp.path()).unwrap();
        let skill = Skill::new(Slug::parse("x").unwrap(), "d", Utc::now());
        assert!(matches!(
            store.save_skill_as("y", skill),
            Err(Error::MalformedSkill(_))
        ));
    }

    #[test]
    fn crash_between_write_and_rename_keeps_old_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "keep", &minimal("keep"));
        let path = SkillStore::skills_dir(tmp.path()).join("keep").join(SKILL_FILE);
        let before = std::fs::read(&path).unwrap();

        let fs = Arc::new(InstrumentedFs::default());
        let mut store = SkillStore::load_with_fs(tmp.path(), fs.clone()).unwrap();
        let mut skill = store.get("keep").unwrap().clone();
        skill.description = "rewritten".into();
        fs.fail_renames.store(true, Ordering::SeqCst);
        assert!(store.save_skill(skill).is_err());
        assert_eq!(std::fs::read(&path).unwrap(), before);
        assert_eq!(store.get("keep").unwrap().description, "does keep");
    }

    #[test]
    fn record_usage_arithmetic() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SkillStore::load(tmp.path()).unwrap();
        let mut skill = Skill::new(Slug::parse("s").unwrap(), "d", ts("2025-01-01T00:00:00Z"));
        store.save_skill(skill.clone()).unwrap();

        let meta = store.record_usage("s", true).unwrap();
        assert_eq!((meta.usage_count, meta.success_count), (1, 1));
        assert_eq!(meta.success_rate(), 1.0);

        skill.meta.usage_count = 9;
        skill.meta.success_count = 9;
        store.save_skill(skill).unwrap();
        let meta = store.record_usage("s", false).unwrap();
        assert_eq!((meta.usage_count, meta.success_count), (10, 9));
        assert!((meta.success_rate() - 0.9).abs() < 1e-12);
        assert!(meta.updated_at >= meta.created_at);

        let reloaded = SkillStore::load(tmp.path()).unwrap();
        assert_eq!(reloaded.get("s").unwrap().meta.usage_count, 10);
    }

    #[test]
    fn record_usage_on_unknown_skill() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SkillStore::load(tmp.path()).unwrap();
        assert!(matches!(
            store.record_usage("ghost", true),
            Err(Error::SkillNotFound(_))
        ));
    }

    #[test]
    fn delete_removes_directory() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "gone", &minimal("gone"));
        let mut store = SkillStore::load(tmp.path()).unwrap();
        store.delete_skill("gone").unwrap();
        assert!(!SkillStore::skills_dir(tmp.path()).join("gone").exists());
        assert!(matches!(store.delete_skill("gone"), Err(Error::SkillNotFound(_))));
    }

    fn arb_timestamp() -> impl Strategy<Value = DateTime<Utc>> {
        (1_500_000_000i64..2_000_000_000).prop_map(|s| DateTime::from_timestamp(s, 0).unwrap())
    }

    fn arb_event() -> impl Strategy<Value = UsageEvent> {
        prop_oneof![
            any::<bool>().prop_map(|success| UsageEvent::Used { success }),
            (any::<bool>(), any::<bool>()).prop_map(|(from, to)| UsageEvent::Amended { from, to }),
        ]
    }

    proptest! {
        #[test]
        fn maturity_is_monotone(u in 0u64..40, du in 0u64..10, r in 0.0f64..=1.0, dr in 0.0f64..=1.0) {
            let r2 = (r + dr).min(1.0);
            prop_assert!(classify_maturity(u + du, r) >= classify_maturity(u, r));
            prop_assert!(classify_maturity(u, r2) >= classify_maturity(u, r));
        }

        #[test]
        fn usage_replay_reproduces_meta(created in arb_timestamp(), events in proptest::collection::vec(arb_event(), 0..40)) {
            let start = SkillMeta::new(created);
            let now = created + chrono::Duration::seconds(60);
            let first = events.iter().fold(start, |m, e| m.apply(*e, now));
            let second = events.iter().fold(start, |m, e| m.apply(*e, now));
            prop_assert_eq!(first, second);
            prop_assert!(first.validate().is_ok());
        }
    }
}
