//! Parser for the `knob | action | conditions` response format.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;

use super::ExtractError;
use crate::hints::{ConditionTag, ConditionVector, RecAction, TuningHint};

pub const DEFAULT_SYNONYMS: &str = include_str!("../../data/extract/synonyms.toml");

/// Versioned phrase → tag table for condition phrases outside the
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymTable {
    pub version: u32,
    map: BTreeMap<String, ConditionTag>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynonymFile {
    version: u32,
    synonyms: BTreeMap<String, String>,
}

/// Lower-cases, turns `-` and `_` into spaces and collapses whitespace.
pub fn normalize_phrase(s: &str) -> String {
    s.to_lowercase()
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl SynonymTable {
    pub fn parse(text: &str) -> Result<Self, ExtractError> {
        let file: SynonymFile = toml::from_str(text).map_err(|e| ExtractError::Config(format!("synonyms: {e}")))?;
        let mut map = BTreeMap::new();
        for (phrase, tag) in file.synonyms {
            let tag: ConditionTag = tag
                .parse()
                .map_err(|_| ExtractError::Config(format!("synonyms: `{phrase}` maps to unknown tag `{tag}`")))?;
            map.insert(normalize_phrase(&phrase), tag);
        }
        Ok(SynonymTable {
            version: file.version,
            map,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExtractError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    /// Vocabulary tag for a free-text phrase, if known.
    pub fn lookup(&self, phrase: &str) -> Option<ConditionTag> {
        let norm = normalize_phrase(phrase);
        norm.replace(' ', "_")
            .parse()
            .ok()
            .or_else(|| self.map.get(&norm).copied())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Default for SynonymTable {
    fn default() -> Self {
        SynonymTable::parse(DEFAULT_SYNONYMS).expect("bundled synonyms parse")
    }
}

/// A response with no parseable record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed {
    pub reason: String,
    /// Lines that did not parse, for the repair request.
    pub remainder: String,
}

static KNOB: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[a-z][a-z0-9_.]*$").unwrap());
static VALUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(-?\d+(?:\.\d+)?)\s*(%\s*(?:of\s+)?[a-z]*|[a-z]+)?$").unwrap()
});

fn normalize_unit(unit: &str) -> Option<String> {
    let u = unit.trim().to_ascii_lowercase();
    if let Some(rest) = u.strip_prefix('%') {
        let base = rest.trim().trim_start_matches("of").trim();
        return match base {
            "" | "memory" | "ram" | "mem" => Some("% of memory".into()),
            "cores" | "cpu" | "cpus" => Some("% of cores".into()),
            _ => None,
        };
    }
    let unit = match u.as_str() {
        "" => "",
        "b" | "byte" | "bytes" => "B",
        "k" | "kb" | "kib" => "KB",
        "m" | "mb" | "mib" => "MB",
        "g" | "gb" | "gib" => "GB",
        "t" | "tb" | "tib" => "TB",
        "us" => "us",
        "ms" => "ms",
        "s" | "sec" | "secs" | "seconds" => "s",
        "min" | "minutes" => "min",
        "pages" => "pages",
        _ => return None,
    };
    Some(unit.to_string())
}

fn parse_action(raw: &str) -> Option<RecAction> {
    let a = raw.trim().trim_matches('`').trim();
    let lower = a.to_ascii_lowercase();
    match lower.as_str() {
        "increase" | "raise" | "higher" | "larger" => return Some(RecAction::Increase),
        "decrease" | "lower" | "reduce" | "smaller" => return Some(RecAction::Decrease),
        _ => {}
    }
    let value = lower
        .strip_prefix("set")
        .map(|rest| rest.trim_start().strip_prefix("to ").unwrap_or(rest).trim())
        .map(|rest| &a[a.len() - rest.len()..])
        .unwrap_or(a)
        .trim_matches(['`', '"', '\''])
        .trim();
    if value.is_empty() {
        return None;
    }
    if let Some(c) = VALUE.captures(value) {
        let number: f64 = c[1].parse().ok()?;
        let unit = normalize_unit(c.get(2).map_or("", |m| m.as_str()))?;
        return Some(RecAction::explicit(number, &unit));
    }
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "enabled" => Some(RecAction::explicit(1.0, "")),
        "off" | "false" | "no" | "disabled" => Some(RecAction::explicit(0.0, "")),
        _ if value.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => Some(RecAction::symbolic(value)),
        _ => None,
    }
}

fn parse_conditions(raw: &str, synonyms: &SynonymTable) -> Option<ConditionVector> {
    let raw = raw.trim().trim_end_matches('.');
    let mut tags = Vec::new();
    for phrase in raw.split([',', ';']).map(str::trim).filter(|p| !p.is_empty()) {
        let norm = normalize_phrase(phrase.trim_matches('`'));
        if matches!(norm.as_str(), "none" | "always" | "any" | "n/a" | "/") {
            continue;
        }
        match synonyms.lookup(&norm) {
            Some(tag) => tags.push(tag),
            None => log::warn!("dropping unknown condition phrase `{phrase}`"),
        }
    }
    match ConditionVector::new(tags) {
        Ok(cv) => Some(cv),
        Err(e) => {
            log::warn!("dropping record: {e}");
            None
        }
    }
}

fn parse_record(line: &str, synonyms: &SynonymTable) -> Option<TuningHint> {
    let line = line
        .trim()
        .trim_start_matches(['-', '*', '•'])
        .trim_start_matches(|c: char| c.is_ascii_digit())
        .trim_start_matches(['.', ')'])
        .trim()
        .trim_matches('|');
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    if fields.len() != 3 {
        return None;
    }
    let knob = fields[0].trim_matches('`').to_ascii_lowercase();
    if !KNOB.is_match(&knob) {
        return None;
    }
    let action = parse_action(fields[1])?;
    let conditions = parse_conditions(fields[2], synonyms)?;
    Some(TuningHint::new(&knob, action, conditions))
}

fn is_header(line: &str) -> bool {
    let norm = normalize_phrase(line);
    norm.starts_with("knob |") || norm.chars().all(|c| matches!(c, '|' | ':' | ' '))
}

/// Parses every well-formed record. Fails only when none parse.
pub fn parse_response(text: &str, synonyms: &SynonymTable) -> Result<Vec<TuningHint>, Malformed> {
    let mut hints = Vec::new();
    let mut rest = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.contains('|') && is_header(line) {
            continue;
        }
        match parse_record(line, synonyms) {
            Some(h) => hints.push(h),
            None => rest.push(line.trim_end()),
        }
    }
    if hints.is_empty() {
        let reason = if text.trim().is_empty() {
            "empty response".to_string()
        } else {
            format!("no `knob | action | conditions` record in {} line(s)", rest.len())
        };
        return Err(Malformed {
            reason,
            remainder: rest.join("\n"),
        });
    }
    if !rest.is_empty() {
        log::debug!("ignored {} non-record line(s)", rest.len());
    }
    Ok(hints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ConditionTag::*;

    fn parse(text: &str) -> Result<Vec<TuningHint>, Malformed> {
        parse_response(text, &SynonymTable::default())
    }

    fn cv(tags: &[ConditionTag]) -> ConditionVector {
        ConditionVector::new(tags.iter().copied()).unwrap()
    }

    #[test]
    fn write_intensive_log_file_size() {
        let hints = parse("innodb_log_file_size | set 4G | write-intensive").unwrap();
        assert_eq!(hints.len(), 1);
        assert_eq!(hints[0].knob, "innodb_log_file_size");
        assert_eq!(hints[0].action, RecAction::explicit(4.0, "GB"));
        assert_eq!(hints[0].conditions, cv(&[WriteHeavy]));
    }

    #[test]
    fn sort_buffer_increase_with_three_conditions() {
        let hints = parse("Step 3 done.\n- sort_buffer_size | increase | read-heavy, no index, sort queries\n").unwrap();
        assert_eq!(hints[0].action, RecAction::Increase);
        assert_eq!(hints[0].conditions, cv(&[ReadHeavy, NoIndex, SortOps]));
    }

    #[test]
    fn prose_is_malformed_with_remainder() {
        let err = parse("The log file should be about 4G for writes.").unwrap_err();
        assert!(err.remainder.contains("4G for writes"));
        assert!(parse("").is_err());
        assert!(parse("knob | action | conditions\n|---|---|---|").is_err());
    }

    #[test]
    fn units_and_symbols() {
        let action = |s: &str| parse(&format!("k | {s} | none")).unwrap()[0].action.clone();
        assert_eq!(action("set 512M"), RecAction::explicit(512.0, "MB"));
        assert_eq!(action("set to 25% of memory"), RecAction::explicit(25.0, "% of memory"));
        assert_eq!(action("set 25%"), RecAction::explicit(25.0, "% of memory"));
        assert_eq!(action("2000"), RecAction::explicit(2000.0, ""));
        assert_eq!(action("set ON"), RecAction::explicit(1.0, ""));
        assert_eq!(action("set O_DIRECT"), RecAction::symbolic("O_DIRECT"));
        assert_eq!(action("lower"), RecAction::Decrease);
        assert!(parse("k | set 4 parsecs | none").is_err());
    }

    #[test]
    fn unknown_phrase_dropped_contradiction_rejected() {
        let hints = parse("k | increase | full moon, read heavy").unwrap();
        assert_eq!(hints[0].conditions, cv(&[ReadHeavy]));
        assert!(parse("k | increase | read heavy, write heavy").is_err());
    }

    #[test]
    fn synonym_normalization() {
        let syn = SynonymTable::default();
        assert_eq!(normalize_phrase("  Write-Intensive__load "), "write intensive load");
        assert_eq!(syn.lookup("WRITE_INTENSIVE"), Some(WriteHeavy));
        assert_eq!(syn.lookup("low buffer ratio"), Some(LowBufferRatio));
        assert!(SynonymTable::parse("version = 1\n[synonyms]\n\"x\" = \"bogus\"\n").is_err());
    }

    #[test]
    fn every_bundled_synonym_is_reachable() {
        let syn = SynonymTable::default();
        assert!(syn.version >= 1 && !syn.is_empty());
        for (phrase, tag) in &syn.map {
            assert_eq!(syn.lookup(phrase), Some(*tag), "{phrase}");
        }
    }
}
