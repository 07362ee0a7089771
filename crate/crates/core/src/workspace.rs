//! Per-user workspace: the SOUL / USER / MEMORY documents, the skill store,
//! and session logs.
//!
//! ```text
//! {data_root}/{user_id}/SOUL.md
//!                       USER.md
//!                       MEMORY.md
//!                       configs/skills/{name}/SKILL.md
//!                       sessions/{session_id}.jsonl
//! ```
//!
//! Profile and memory updates are section-level Markdown merges keyed by
//! `## ` headings, so hand edits outside the touched sections survive.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::defaults;
use crate::error::{Error, Result};
use crate::fsio::{self, SharedFs};
use crate::matcher::EmbeddingCache;
use crate::skills::SkillStore;

/// Sentinel present in generated documents until real content is merged in.
pub const TEMPLATE_MARKER: &str = "<!-- template: untouched -->";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn parse(raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        let ok = (1..=64).contains(&raw.len())
            && raw
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        if ok {
            Ok(UserId(raw))
        } else {
            Err(Error::InvalidUserId(raw))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        UserId::parse(value)
    }
}

impl From<UserId> for String {
    fn from(value: UserId) -> Self {
        value.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Soul,
    User,
    Memory,
}

impl Layer {
    pub fn file_name(self) -> &'static str {
        match self {
            Layer::Soul => "SOUL.md",
            Layer::User => "USER.md",
            Layer::Memory => "MEMORY.md",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealTime,
    InitialGuidance,
    PostSession,
    BehaviorSuggestion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEdit {
    pub heading: String,
    pub fragment: String,
}

impl SectionEdit {
    pub fn new(heading: impl Into<String>, fragment: impl Into<String>) -> Self {
        Self {
            heading: heading.into(),
            fragment: fragment.into(),
        }
    }
}

/// A section-level change to USER.md or MEMORY.md.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileDelta {
    #[serde(default)]
    pub additions: Vec<SectionEdit>,
    #[serde(default)]
    pub replacements: Vec<SectionEdit>,
    pub provenance: Provenance,
    pub confirmed: bool,
}

impl ProfileDelta {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            additions: Vec::new(),
            replacements: Vec::new(),
            provenance,
            confirmed: provenance != Provenance::BehaviorSuggestion,
        }
    }

    pub fn add(mut self, heading: impl Into<String>, fragment: impl Into<String>) -> Self {
        self.additions.push(SectionEdit::new(heading, fragment));
        self
    }

    pub fn replace(mut self, heading: impl Into<String>, fragment: impl Into<String>) -> Self {
        self.replacements.push(SectionEdit::new(heading, fragment));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.additions.is_empty() && self.replacements.is_empty()
    }

    /// Characters of merged content, the "update magnitude" used by reward telemetry.
    pub fn magnitude(&self) -> usize {
        self.additions
            .iter()
            .chain(&self.replacements)
            .map(|e| e.fragment.trim().chars().count())
            .sum()
    }
}

/// Title of a `## ` heading with the hashes stripped.
pub fn heading_title(heading: &str) -> &str {
    heading.trim().trim_start_matches('#').trim()
}

struct Section {
    title: Option<String>,
    body_start: usize,
    end: usize,
}

fn split_sections(doc: &str) -> Vec<Section> {
    let mut sections = vec![Section {
        title: None,
        body_start: 0,
        end: doc.len(),
    }];
    let mut offset = 0;
    for line in doc.split_inclusive('\n') {
        if let Some(rest) = line.strip_prefix("## ") {
            if let Some(last) = sections.last_mut() {
                last.end = offset;
            }
            sections.push(Section {
                title: Some(rest.trim().to_string()),
                body_start: offset + line.len(),
                end: doc.len(),
            });
        }
        offset += line.len();
    }
    sections
}

/// Titles of all `## ` sections, in document order.
pub fn section_titles(doc: &str) -> Vec<String> {
    split_sections(doc).into_iter().filter_map(|s| s.title).collect()
}

/// Body of the first section titled `title`, if any.
pub fn section_body<'a>(doc: &'a str, title: &str) -> Option<&'a str> {
    let title = heading_title(title);
    split_sections(doc)
        .into_iter()
        .find(|s| s.title.as_deref() == Some(title))
        .map(|s| &doc[s.body_start..s.end])
}

fn edit_section(doc: &str, title: &str, fragment: &str, replace: bool) -> String {
    let title = heading_title(title);
    let fragment = fragment.trim();
    let target = split_sections(doc)
        .into_iter()
        .find(|s| s.title.as_deref() == Some(title));
    match target {
        Some(section) => {
            let body = &doc[section.body_start..section.end];
            let kept = body.trim_end();
            let new_body = if replace || kept.is_empty() {
                format!("\n{fragment}\n\n")
            } else {
                format!("{kept}\n{fragment}\n\n")
            };
            format!("{}{}{}", &doc[..section.body_start], new_body, &doc[section.end..])
        }
        None => {
            let separator = if doc.is_empty() || doc.ends_with("\n\n") {
                ""
            } else if doc.ends_with('\n') {
                "\n"
            } else {
                "\n\n"
            };
            format!("{doc}{separator}## {title}\n\n{fragment}\n\n")
        }
    }
}

fn strip_marker(doc: &str) -> String {
    let mut out = String::with_capacity(doc.len());
    for line in doc.split_inclusive('\n') {
        if line.trim() != TEMPLATE_MARKER {
            out.push_str(line);
        }
    }
    out
}

/// Pure merge of `delta` into `doc`: replacements first, then additions.
pub fn merge_delta(doc: &str, delta: &ProfileDelta) -> String {
    if delta.is_empty() {
        return doc.to_string();
    }
    let mut out = strip_marker(doc);
    for edit in &delta.replacements {
        out = edit_section(&out, &edit.heading, &edit.fragment, true);
    }
    for edit in &delta.additions {
        out = edit_section(&out, &edit.heading, &edit.fragment, false);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct InitOptions {
    /// Directory of skill packages copied into new workspaces; built-in set when `None`.
    pub default_skills_dir: Option<PathBuf>,
    /// Replaces the built-in SOUL.md template.
    pub soul_template: Option<String>,
}

#[derive(Debug)]
pub struct Workspace {
    user_id: UserId,
    root: PathBuf,
    fs: SharedFs,
    pub skills: SkillStore,
    pub embeddings: EmbeddingCache,
}

/// Creates (or reuses) the workspace of `user_id` under `data_root`.
///
/// Missing documents are created from templates and, on first creation of
/// `configs/skills/`, the default skill set is copied in. Existing files are
/// never touched, so a second call is a no-op.
pub fn init_workspace(data_root: &Path, user_id: &str) -> Result<Workspace> {
    init_workspace_with(data_root, user_id, &InitOptions::default(), fsio::os_fs())
}

pub fn init_workspace_with(
    data_root: &Path,
    user_id: &str,
    options: &InitOptions,
    fs: SharedFs,
) -> Result<Workspace> {
    let user_id = UserId::parse(user_id)?;
    let root = data_root.join(user_id.as_str());
    fs.create_dir_all(&root).map_err(|e| Error::io(&root, e))?;

    for (layer, template) in [
        (
            Layer::Soul,
            options
                .soul_template
                .clone()
                .unwrap_or_else(|| defaults::SOUL_TEMPLATE.to_string()),
        ),
        (Layer::User, defaults::USER_TEMPLATE.to_string()),
        (Layer::Memory, defaults::MEMORY_TEMPLATE.to_string()),
    ] {
        let path = root.join(layer.file_name());
        if !fs.is_file(&path) {
            fsio::write_atomic(fs.as_ref(), &path, template.as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
    }

    let skills_dir = SkillStore::skills_dir(&root);
    if !fs.is_dir(&skills_dir) {
        fs.create_dir_all(&skills_dir)
            .map_err(|e| Error::io(&skills_dir, e))?;
        match &options.default_skills_dir {
            Some(source) => copy_tree(fs.as_ref(), source, &skills_dir)?,
            None => defaults::install_default_skills(fs.as_ref(), &skills_dir)?,
        }
    }
    let sessions = root.join("sessions");
    if !fs.is_dir(&sessions) {
        fs.create_dir_all(&sessions).map_err(|e| Error::io(&sessions, e))?;
    }
    Workspace::open_with(&root, user_id, fs)
}

fn copy_tree(fs: &dyn fsio::FileSystem, from: &Path, to: &Path) -> Result<()> {
    fs.create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs.list_dir(from).map_err(|e| Error::io(from, e))? {
        let Some(name) = entry.file_name() else { continue };
        let target = to.join(name);
        if fs.is_dir(&entry) {
            copy_tree(fs, &entry, &target)?;
        } else {
            let text = fs.read_to_string(&entry).map_err(|e| Error::io(&entry, e))?;
            fs.write(&target, text.as_bytes())
                .map_err(|e| Error::io(&target, e))?;
        }
    }
    Ok(())
}

impl Workspace {
    /// Opens an existing workspace directory without creating anything.
    pub fn open(data_root: &Path, user_id: &str) -> Result<Workspace> {
        let user_id = UserId::parse(user_id)?;
        let root = data_root.join(user_id.as_str());
        Self::open_with(&root, user_id, fsio::os_fs())
    }

    fn open_with(root: &Path, user_id: UserId, fs: SharedFs) -> Result<Workspace> {
        let skills = SkillStore::load_with_fs(root, fs.clone())?;
        let embeddings = EmbeddingCache::load(root.join("configs").join("skill_embeddings.json"), fs.clone());
        Ok(Workspace {
            user_id,
            root: root.to_path_buf(),
            fs,
            skills,
            embeddings,
        })
    }

    pub fn user_id(&self) -> &UserId {
        &self.user_id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn fs(&self) -> &SharedFs {
        &self.fs
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn layer_path(&self, layer: Layer) -> PathBuf {
        self.root.join(layer.file_name())
    }

    pub fn read_layer(&self, layer: Layer) -> Result<String> {
        let path = self.layer_path(layer);
        self.fs.read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn soul(&self) -> Result<String> {
        self.read_layer(Layer::Soul)
    }

    pub fn user_profile(&self) -> Result<String> {
        self.read_layer(Layer::User)
    }

    pub fn memory(&self) -> Result<String> {
        self.read_layer(Layer::Memory)
    }

    /// True while USER.md still carries the template marker.
    pub fn needs_initial_guidance(&self) -> bool {
        self.user_profile()
            .map(|doc| doc.lines().any(|l| l.trim() == TEMPLATE_MARKER))
            .unwrap_or(true)
    }

    /// Merges `delta` into USER.md. Returns the merged magnitude in characters.
    pub fn apply_profile_delta(&mut self, delta: &ProfileDelta) -> Result<usize> {
        self.apply_delta(Layer::User, delta)
    }

    /// Merges `delta` into MEMORY.md.
    pub fn apply_memory_delta(&mut self, delta: &ProfileDelta) -> Result<usize> {
        self.apply_delta(Layer::Memory, delta)
    }

    fn apply_delta(&mut self, layer: Layer, delta: &ProfileDelta) -> Result<usize> {
        debug_assert!(layer != Layer::Soul, "SOUL.md is operator-edited only");
        if delta.provenance == Provenance::BehaviorSuggestion && !delta.confirmed {
            return Err(Error::ConfirmationRequired);
        }
        if delta.is_empty() {
            return Ok(0);
        }
        let current = self.read_layer(layer)?;
        let merged = merge_delta(&current, delta);
        if merged != current {
            let path = self.layer_path(layer);
            fsio::write_atomic(self.fs.as_ref(), &path, merged.as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(delta.magnitude())
    }

    /// Reloads the skill store from disk.
    pub fn reload_skills(&mut self) -> Result<()> {
        self.skills = SkillStore::load_with_fs(&self.root, self.fs.clone())?;
        Ok(())
    }
}
