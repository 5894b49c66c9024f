//! Versioned prompt templates.
//!
//! Templates live under `assets/prompts/<id>/` and use `{{name}}`
//! placeholders. The reasoning-message schema is embedded verbatim in the
//! system prompt.

use std::collections::BTreeMap;

pub const REASONING_MESSAGE_SCHEMA: &str = include_str!("../../assets/schemas/reasoning_message.schema.json");

pub const DEFAULT_PROMPT_ID: &str = "forensic-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSet {
    pub id: &'static str,
    pub system: &'static str,
    pub coarse: &'static str,
    pub refine: &'static str,
    pub consolidate: &'static str,
}

const BUILTIN: &[PromptSet] = &[PromptSet {
    id: "forensic-v1",
    system: include_str!("../../assets/prompts/forensic-v1/system.txt"),
    coarse: include_str!("../../assets/prompts/forensic-v1/coarse.txt"),
    refine: include_str!("../../assets/prompts/forensic-v1/refine.txt"),
    consolidate: include_str!("../../assets/prompts/forensic-v1/consolidate.txt"),
}];

impl PromptSet {
    pub fn by_id(id: &str) -> Option<&'static PromptSet> {
        BUILTIN.iter().find(|p| p.id == id)
    }

    pub fn ids() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|p| p.id)
    }

    pub fn system_prompt(&self) -> String {
        render(self.system, &BTreeMap::from([("schema", REASONING_MESSAGE_SCHEMA.trim())]))
    }
}

/// Replace every `{{key}}` with its value. Unknown placeholders are left as is.
pub fn render(template: &str, vars: &BTreeMap<&str, &str>) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}
