//! Regex retrieval of candidate excerpts from a document corpus.

use std::fmt;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::ExtractError;

pub const DEFAULT_PATTERNS: &str = include_str!("../../data/extract/patterns.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Manual,
    Forum,
    Blog,
    ConfigFile,
}

impl Origin {
    /// Guesses the origin from directory names and the file extension.
    /// Anything unrecognized counts as manual text.
    pub fn infer(path: &Path) -> Origin {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if matches!(ext.as_str(), "cnf" | "conf" | "ini") {
            return Origin::ConfigFile;
        }
        for comp in path.components().rev().skip(1) {
            let name = comp.as_os_str().to_string_lossy().to_ascii_lowercase();
            if name.contains("forum") || name.contains("stackoverflow") || name.contains("qa") {
                return Origin::Forum;
            }
            if name.contains("blog") {
                return Origin::Blog;
            }
            if name.contains("config") {
                return Origin::ConfigFile;
            }
            if name.contains("manual") || name.contains("doc") {
                return Origin::Manual;
            }
        }
        Origin::Manual
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Manual => "manual",
            Origin::Forum => "forum",
            Origin::Blog => "blog",
            Origin::ConfigFile => "config_file",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    /// `<relative path>#<byte offset>`.
    pub id: String,
    pub origin: Origin,
    pub text: String,
    pub dbms: String,
    pub path: PathBuf,
    pub offset: usize,
}

impl SourceDocument {
    pub fn new(id: &str, origin: Origin, text: &str, dbms: &str) -> Self {
        SourceDocument {
            id: id.to_string(),
            origin,
            text: text.to_string(),
            dbms: dbms.to_string(),
            path: PathBuf::new(),
            offset: 0,
        }
    }
}

/// Compiles a pattern file: one regex per line, `#` comments.
pub fn parse_patterns(text: &str) -> Result<Vec<Regex>, ExtractError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            Regex::new(l.trim()).map_err(|e| ExtractError::Config(format!("pattern on line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn load_patterns(path: &Path) -> Result<Vec<Regex>, ExtractError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExtractError::Io(path.to_path_buf(), e))?;
    parse_patterns(&text)
}

/// Walks `root` and returns every pattern match as a document, ordered by
/// path and then offset. Matches with an identical span, or nested inside
/// another match, are reported once.
pub fn collect_source_texts(
    root: &Path,
    patterns: &[Regex],
    dbms: &str,
) -> Result<Vec<SourceDocument>, ExtractError> {
    if !root.is_dir() {
        return Err(ExtractError::Io(
            root.to_path_buf(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let mut docs = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                log::warn!("skipping unreadable corpus entry: {e}");
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let rel = path.strip_prefix(root).unwrap_or(path);
        let origin = Origin::infer(rel);
        for (start, end) in match_spans(&text, patterns) {
            let excerpt = text[start..end].trim();
            if excerpt.is_empty() {
                continue;
            }
            docs.push(SourceDocument {
                id: format!("{}#{start}", rel.display()),
                origin,
                text: excerpt.to_string(),
                dbms: dbms.to_string(),
                path: rel.to_path_buf(),
                offset: start,
            });
        }
    }
    Ok(docs)
}

/// Sorted spans of all matches with nested and duplicate spans removed.
fn match_spans(text: &str, patterns: &[Regex]) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = patterns
        .iter()
        .flat_map(|re| re.find_iter(text).map(|m| (m.start(), m.end())))
        .filter(|(s, e)| e > s)
        .collect();
    // longest first among equal starts, so nested spans follow their parent
    spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    let mut reach = 0;
    for (s, e) in spans {
        if !kept.is_empty() && e <= reach {
            continue;
        }
        reach = reach.max(e);
        kept.push((s, e));
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment() -> Vec<Regex> {
        parse_patterns(r"(?m)^[ \t]*[a-z_]+[ \t]*=[ \t]*\S+$").unwrap()
    }

    #[test]
    fn origin_from_path() {
        assert_eq!(Origin::infer(Path::new("blogs/percona/post.md")), Origin::Blog);
        assert_eq!(Origin::infer(Path::new("forum/q1.txt")), Origin::Forum);
        assert_eq!(Origin::infer(Path::new("etc/my.cnf")), Origin::ConfigFile);
        assert_eq!(Origin::infer(Path::new("notes.txt")), Origin::Manual);
    }

    #[test]
    fn same_span_from_two_patterns_is_one_document() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "intro\ninnodb_log_file_size = 4G\n").unwrap();
        let mut patterns = assignment();
        patterns.extend(assignment());
        let docs = collect_source_texts(dir.path(), &patterns, "mysql").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].text, "innodb_log_file_size = 4G");
        assert_eq!(docs[0].id, "a.txt#6");
    }

    #[test]
    fn empty_directory_gives_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(collect_source_texts(dir.path(), &assignment(), "mysql").unwrap().is_empty());
    }

    #[test]
    fn invalid_regex_is_config_error() {
        assert!(matches!(parse_patterns("# c\n(unclosed\n"), Err(ExtractError::Config(_))));
    }

    #[test]
    fn order_is_path_then_offset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "x = 1\n").unwrap();
        std::fs::write(dir.path().join("a.txt"), "y = 2\n\nz = 3\n").unwrap();
        let ids: Vec<String> = collect_source_texts(dir.path(), &assignment(), "mysql")
            .unwrap()
            .into_iter()
            .map(|d| d.id)
            .collect();
        assert_eq!(ids, ["a.txt#0", "a.txt#7", "b.txt#0"]);
    }

    #[test]
    fn nested_match_folds_into_paragraph() {
        let spans = match_spans(
            "If writes dominate, you should set\nlog_size = 4G\n\nunrelated\n",
            &parse_patterns(DEFAULT_PATTERNS).unwrap(),
        );
        assert_eq!(spans.len(), 1);
    }
}
