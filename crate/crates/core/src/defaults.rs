//! Built-in document templates and the default skill set copied into new
//! workspaces.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::FileSystem;

pub const SOUL_TEMPLATE: &str = "# Agent Charter

## Role

You are a foreign-trade business assistant. You help exporters with quotations, customs classification, market research and buyer communication.

## Principles

- Be precise with numbers, units and currencies.
- Only record facts the user states explicitly; never infer business data.
- Prefer structured answers (tables, numbered steps) for operational tasks.

";

pub const USER_TEMPLATE: &str = "# User Profile
<!-- template: untouched -->

## Business Overview

(not yet provided)

";

pub const MEMORY_TEMPLATE: &str = "# Long-term Memory
<!-- template: untouched -->

";

/// (directory, relative path, contents) of every bundled skill file.
pub const DEFAULT_SKILL_FILES: &[(&str, &str, &str)] = &[
    ("quotation", "SKILL.md", include_str!("../skills/quotation/SKILL.md")),
    (
        "quotation",
        "references/pricing.md",
        include_str!("../skills/quotation/references/pricing.md"),
    ),
    ("hs-code-lookup", "SKILL.md", include_str!("../skills/hs-code-lookup/SKILL.md")),
    (
        "hs-code-lookup",
        "references/chapters.md",
        include_str!("../skills/hs-code-lookup/references/chapters.md"),
    ),
    ("market-research", "SKILL.md", include_str!("../skills/market-research/SKILL.md")),
    ("customer-followup", "SKILL.md", include_str!("../skills/customer-followup/SKILL.md")),
];

pub(crate) fn install_default_skills(fs: &dyn FileSystem, skills_dir: &Path) -> Result<()> {
    for (dir, rel, contents) in DEFAULT_SKILL_FILES {
        let path = skills_dir.join(dir).join(rel);
        if let Some(parent) = path.parent() {
            fs.create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs.write(&path, contents.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::TEMPLATE_MARKER;

    #[test]
    fn templates_carry_marker_where_expected() {
        assert!(USER_TEMPLATE.contains(TEMPLATE_MARKER));
        assert!(MEMORY_TEMPLATE.contains(TEMPLATE_MARKER));
        assert!(!SOUL_TEMPLATE.contains(TEMPLATE_MARKER));
    }

    #[test]
    fn bundled_skills_parse() {
        for (dir, rel, text) in DEFAULT_SKILL_FILES {
            if *rel == "SKILL.md" {
                let skill = crate::skills::parse_skill_text(text, Default::default(), chrono::Utc::now())
                    .unwrap_or_else(|e| panic!("{dir}: {e}"));
                assert_eq!(skill.name.as_str(), *dir);
            }
        }
    }
}
