//! Hint extraction: regex retrieval of excerpts, a structured prompt per
//! excerpt, chat completion, parsing into hints and knob ranking.

mod client;
mod collect;
mod parse;
mod prompt;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::hints::TuningHint;

pub use client::{EndpointConfig, FixtureClient, HttpChatClient, LlmClient, LlmError};
pub use collect::{collect_source_texts, load_patterns, parse_patterns, Origin, SourceDocument, DEFAULT_PATTERNS};
pub use parse::{normalize_phrase, parse_response, Malformed, SynonymTable, DEFAULT_SYNONYMS};
pub use prompt::{build_prompt, build_repair_prompt, dbms_name, ChatRequest, PromptBundle, PromptTemplate, COT_TRIGGER, DEFAULT_PROMPT};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unsupported dbms `{0}` (expected mysql or postgresql)")]
    UnsupportedDbms(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

/// Prompt, retrieval patterns and synonym table. Defaults are bundled and
/// each can be replaced by a file.
#[derive(Debug, Clone)]
pub struct ExtractionAssets {
    pub template: PromptTemplate,
    pub patterns: Vec<Regex>,
    pub synonyms: SynonymTable,
}

impl Default for ExtractionAssets {
    fn default() -> Self {
        ExtractionAssets {
            template: PromptTemplate::default(),
            patterns: parse_patterns(DEFAULT_PATTERNS).expect("bundled patterns compile"),
            synonyms: SynonymTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Upper bound on in-flight requests.
    pub concurrency: usize,
    /// Repair requests per document after a malformed response.
    pub max_repairs: u32,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            concurrency: 4,
            max_repairs: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDoc {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub docs_processed: usize,
    pub docs_with_hints: usize,
    pub repair_requests: usize,
    pub skipped: Vec<SkippedDoc>,
    pub hints: usize,
    pub non_actionable: usize,
}

struct DocOutcome {
    hints: Vec<TuningHint>,
    repairs: usize,
    failure: Option<String>,
}

fn extract_one(
    doc: &SourceDocument,
    client: &dyn LlmClient,
    assets: &ExtractionAssets,
    max_repairs: u32,
) -> DocOutcome {
    let fail = |repairs, reason: String| DocOutcome {
        hints: Vec::new(),
        repairs,
        failure: Some(reason),
    };
    let bundle = match build_prompt(doc, &assets.template) {
        Ok(b) => b,
        Err(e) => return fail(0, e.to_string()),
    };
    let mut request = bundle.to_request();
    let mut repairs = 0;
    loop {
        let response = match client.complete(&request) {
            Ok(r) => r,
            Err(e) => return fail(repairs, e.to_string()),
        };
        match parse_response(&response, &assets.synonyms) {
            Ok(hints) => {
                return DocOutcome {
                    hints,
                    repairs,
                    failure: None,
                }
            }
            Err(m) if repairs < max_repairs as usize => {
                log::info!("{}: malformed response ({}), requesting repair", doc.id, m.reason);
                let deviant = if m.remainder.is_empty() { response.as_str() } else { m.remainder.as_str() };
                request = build_repair_prompt(&bundle, deviant, &assets.template);
                repairs += 1;
            }
            Err(m) => return fail(repairs, format!("malformed after {repairs} repair(s): {}", m.reason)),
        }
    }
}

/// Runs the prompt → complete → parse loop over `docs`, at most
/// `cfg.concurrency` at a time. Hints come back in document order, tagged
/// with the document id as source. Knobs outside `catalog` are flagged
/// non-actionable.
pub fn extract_hints(
    docs: &[SourceDocument],
    client: &dyn LlmClient,
    assets: &ExtractionAssets,
    catalog: Option<&Catalog>,
    cfg: &ExtractConfig,
) -> (Vec<TuningHint>, RunReport) {
    let slots: Mutex<Vec<Option<DocOutcome>>> = Mutex::new((0..docs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.concurrency.max(1).min(docs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(doc) = docs.get(i) else { break };
                let outcome = extract_one(doc, client, assets, cfg.max_repairs);
                slots.lock().expect("slot lock")[i] = Some(outcome);
            });
        }
    });

    let mut report = RunReport::default();
    let mut hints = Vec::new();
    for (doc, outcome) in docs.iter().zip(slots.into_inner().expect("slot lock")) {
        let outcome = outcome.expect("every document processed");
        report.docs_processed += 1;
        report.repair_requests += outcome.repairs;
        if let Some(reason) = outcome.failure {
            log::warn!("skipping {}: {reason}", doc.id);
            report.skipped.push(SkippedDoc {
                id: doc.id.clone(),
                reason,
            });
            continue;
        }
        report.docs_with_hints += 1;
        for mut hint in outcome.hints {
            hint.source = doc.id.clone();
            hint.actionable = catalog.is_none_or(|c| c.spec(&hint.knob).is_some());
            report.non_actionable += usize::from(!hint.actionable);
            hints.push(hint);
        }
    }
    report.hints = hints.len();
    (hints, report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnobCount {
    pub knob: String,
    pub count: usize,
}

/// Knobs by mention count, descending, ties by name; at most `top_n`.
pub fn rank_knobs(hints: &[TuningHint], top_n: usize) -> Vec<KnobCount> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for h in hints {
        *counts.entry(h.knob.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<KnobCount> = counts
        .into_iter()
        .map(|(knob, count)| KnobCount {
            knob: knob.to_string(),
            count,
        })
        .collect();
    // BTreeMap order is lexicographic and the sort is stable
    ranked.sort_by(|a, b| b.count.cmp(&a.count));
    ranked.truncate(top_n);
    ranked
}

/// Hints per distinct knob; zero for no hints.
pub fn mean_hints_per_knob(hints: &[TuningHint]) -> f64 {
    let ranked = rank_knobs(hints, usize::MAX);
    if ranked.is_empty() {
        return 0.0;
    }
    hints.len() as f64 / ranked.len() as f64
}

/// Loads assets, replacing each bundled default whose file exists in `dir`
/// (`prompt.toml`, `patterns.txt`, `synonyms.toml`).
pub fn load_assets(dir: Option<&Path>) -> Result<ExtractionAssets, ExtractError> {
    let mut assets = ExtractionAssets::default();
    if let Some(dir) = dir {
        let prompt = dir.join("prompt.toml");
        if prompt.exists() {
            assets.template = PromptTemplate::load(&prompt)?;
        }
        let patterns = dir.join("patterns.txt");
        if patterns.exists() {
            assets.patterns = load_patterns(&patterns)?;
        }
        let synonyms = dir.join("synonyms.toml");
        if synonyms.exists() {
            assets.synonyms = SynonymTable::load(&synonyms)?;
        }
    }
    Ok(assets)
}
