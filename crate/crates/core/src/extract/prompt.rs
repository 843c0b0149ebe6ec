//! Structured chain-of-thought prompt: role, source text, output format and
//! three ordered task steps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExtractError, SourceDocument};
use crate::hints::ConditionTag;

pub const DEFAULT_PROMPT: &str = include_str!("../../data/extract/prompt.toml");

pub const COT_TRIGGER: &str = "Let's think step by step";

/// Editable prompt text. See `data/extract/prompt.toml` for placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub role_preamble: String,
    pub source_header: String,
    pub output_format: String,
    pub steps: Vec<String>,
    pub cot_trigger: String,
    pub repair: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, ExtractError> {
        let t: PromptTemplate = toml::from_str(text).map_err(|e| ExtractError::Config(format!("prompt: {e}")))?;
        if t.steps.len() != 3 {
            return Err(ExtractError::Config(format!("prompt: expected 3 steps, found {}", t.steps.len())));
        }
        if !t.cot_trigger.contains(COT_TRIGGER) {
            return Err(ExtractError::Config(format!("prompt: cot_trigger must contain \"{COT_TRIGGER}\"")));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExtractError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_PROMPT).expect("bundled prompt parses")
    }
}

/// Display name for a supported DBMS identifier.
pub fn dbms_name(dbms: &str) -> Option<&'static str> {
    match dbms.to_ascii_lowercase().as_str() {
        "mysql" => Some("MySQL"),
        "postgresql" | "postgres" | "pg" => Some("PostgreSQL"),
        _ => None,
    }
}

fn vocabulary() -> String {
    ConditionTag::ALL.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(", ")
}

/// One chat request: a system message and a user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
}

impl ChatRequest {
    /// Hex SHA-256 over both messages; the fixture lookup key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role_preamble: String,
    pub source_text: String,
    pub output_format_spec: String,
    pub task_steps: [String; 3],
    pub cot_trigger: String,
    source_header: String,
}

impl PromptBundle {
    pub fn to_request(&self) -> ChatRequest {
        let mut user = String::new();
        user.push_str(&self.source_header);
        user.push_str("\n\"\"\"\n");
        user.push_str(&self.source_text);
        user.push_str("\n\"\"\"\n\n");
        user.push_str(&self.output_format_spec);
        user.push_str("\n\n");
        for (i, step) in self.task_steps.iter().enumerate() {
            user.push_str(&format!("Step {}: {step}\n", i + 1));
        }
        user.push('\n');
        user.push_str(&self.cot_trigger);
        ChatRequest {
            system: self.role_preamble.clone(),
            user,
        }
    }
}

fn fill(template: &str, name: &str) -> String {
    template
        .replace("{dbms_name}", name)
        .replace("{vocabulary}", &vocabulary())
        .trim()
        .to_string()
}

pub fn build_prompt(doc: &SourceDocument, template: &PromptTemplate) -> Result<PromptBundle, ExtractError> {
    let name = dbms_name(&doc.dbms).ok_or_else(|| ExtractError::UnsupportedDbms(doc.dbms.clone()))?;
    Ok(PromptBundle {
        role_preamble: fill(&template.role_preamble, name),
        source_text: doc.text.clone(),
        output_format_spec: fill(&template.output_format, name),
        task_steps: std::array::from_fn(|i| fill(&template.steps[i], name)),
        cot_trigger: template.cot_trigger.trim().to_string(),
        source_header: fill(&template.source_header, name),
    })
}

/// Follow-up request asking the model to restate `deviant` in the
/// prescribed format.
pub fn build_repair_prompt(bundle: &PromptBundle, deviant: &str, template: &PromptTemplate) -> ChatRequest {
    let user = template
        .repair
        .replace("{deviant}", deviant.trim())
        .replace("{output_format}", &bundle.output_format_spec)
        .trim()
        .to_string();
    ChatRequest {
        system: bundle.role_preamble.clone(),
        user,
    }
}
