//! Condition-aware tuning hints: the `<knob, rec_action, conditions>` triple,
//! condition matching, priority-weighted hint selection and the dynamic
//! hint priority.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::KnobSpec;

/// Selection weight floor, so zero-priority hints keep a small chance.
pub const SELECTION_FLOOR: f64 = 0.01;

/// Priority a hint carries before it has ever been evaluated.
pub const INITIAL_PRIORITY: f64 = 0.5;

pub const HINT_FILE_FORMAT: &str = "knobtune-hints/1";

#[derive(Debug, Error)]
pub enum HintError {
    #[error("unknown condition tag `{0}`")]
    UnknownTag(String),
    #[error("contradictory condition tags {0} and {1}")]
    Contradiction(ConditionTag, ConditionTag),
    #[error("no matched hints")]
    NoMatchedHints,
    #[error("performance must be positive, got {0}")]
    NonPositivePerf(f64),
    #[error("cannot resolve `{value}{unit}` for knob `{knob}`: {reason}")]
    Unresolvable {
        knob: String,
        value: f64,
        unit: String,
        reason: String,
    },
    #[error("hint file: {0}")]
    File(String),
}

/// Controlled vocabulary of runtime conditions, grouped by workload
/// characteristics, system state and resource usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionTag {
    // workload
    ReadHeavy,
    WriteHeavy,
    Mixed,
    SortOps,
    NoIndex,
    WalHeavy,
    JoinHeavy,
    // system state
    LowBufferRatio,
    DirtyPages,
    CacheIssue,
    // resource usage
    MemoryPressure,
    MemoryHeadroom,
    CpuPressure,
    DiskPressure,
}

impl ConditionTag {
    pub const ALL: [ConditionTag; 14] = [
        ConditionTag::ReadHeavy,
        ConditionTag::WriteHeavy,
        ConditionTag::Mixed,
        ConditionTag::SortOps,
        ConditionTag::NoIndex,
        ConditionTag::WalHeavy,
        ConditionTag::JoinHeavy,
        ConditionTag::LowBufferRatio,
        ConditionTag::DirtyPages,
        ConditionTag::CacheIssue,
        ConditionTag::MemoryPressure,
        ConditionTag::MemoryHeadroom,
        ConditionTag::CpuPressure,
        ConditionTag::DiskPressure,
    ];

    const CONTRADICTIONS: [(ConditionTag, ConditionTag); 2] = [
        (ConditionTag::ReadHeavy, ConditionTag::WriteHeavy),
        (ConditionTag::MemoryPressure, ConditionTag::MemoryHeadroom),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionTag::ReadHeavy => "read_heavy",
            ConditionTag::WriteHeavy => "write_heavy",
            ConditionTag::Mixed => "mixed",
            ConditionTag::SortOps => "sort_ops",
            ConditionTag::NoIndex => "no_index",
            ConditionTag::WalHeavy => "wal_heavy",
            ConditionTag::JoinHeavy => "join_heavy",
            ConditionTag::LowBufferRatio => "low_buffer_ratio",
            ConditionTag::DirtyPages => "dirty_pages",
            ConditionTag::CacheIssue => "cache_issue",
            ConditionTag::MemoryPressure => "memory_pressure",
            ConditionTag::MemoryHeadroom => "memory_headroom",
            ConditionTag::CpuPressure => "cpu_pressure",
            ConditionTag::DiskPressure => "disk_pressure",
        }
    }
}

impl fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionTag {
    type Err = HintError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConditionTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| HintError::UnknownTag(s.to_string()))
    }
}

/// Set of condition tags observed in (or required of) an environment.
pub type ConditionSet = BTreeSet<ConditionTag>;

/// Applicability conditions of a hint. Empty means unconditional.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<ConditionTag>", into = "Vec<ConditionTag>")]
pub struct ConditionVector {
    tags: ConditionSet,
}

impl ConditionVector {
    pub fn new(tags: impl IntoIterator<Item = ConditionTag>) -> Result<Self, HintError> {
        let tags: ConditionSet = tags.into_iter().collect();
        for (a, b) in ConditionTag::CONTRADICTIONS {
            if tags.contains(&a) && tags.contains(&b) {
                return Err(HintError::Contradiction(a, b));
            }
        }
        Ok(ConditionVector { tags })
    }

    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn tags(&self) -> &ConditionSet {
        &self.tags
    }

    pub fn is_satisfied_by(&self, current: &ConditionSet) -> bool {
        self.tags.is_subset(current)
    }
}

impl TryFrom<Vec<ConditionTag>> for ConditionVector {
    type Error = HintError;

    fn try_from(tags: Vec<ConditionTag>) -> Result<Self, Self::Error> {
        ConditionVector::new(tags)
    }
}

impl From<ConditionVector> for Vec<ConditionTag> {
    fn from(cv: ConditionVector) -> Self {
        cv.tags.into_iter().collect()
    }
}

/// Recommended adjustment: an explicit value or a direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecAction {
    SetExplicit {
        #[serde(default)]
        value: f64,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        unit: String,
        /// Symbolic value of an enumeration knob (e.g. `O_DIRECT`); takes
        /// the place of `value` and `unit` when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Increase,
    Decrease,
}

impl RecAction {
    pub fn explicit(value: f64, unit: &str) -> Self {
        RecAction::SetExplicit {
            value,
            unit: unit.to_string(),
            label: None,
        }
    }

    pub fn symbolic(label: &str) -> Self {
        RecAction::SetExplicit {
            value: 0.0,
            unit: String::new(),
            label: Some(label.to_string()),
        }
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self, RecAction::SetExplicit { .. })
    }
}

impl fmt::Display for RecAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecAction::SetExplicit { label: Some(l), .. } => write!(f, "set {l}"),
            RecAction::SetExplicit { value, unit, .. } => write!(f, "set {value}{unit}"),
            RecAction::Increase => f.write_str("increase"),
            RecAction::Decrease => f.write_str("decrease"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningHint {
    pub knob: String,
    pub action: RecAction,
    pub conditions: ConditionVector,
    #[serde(default)]
    pub source: String,
    #[serde(default = "default_priority")]
    pub priority: f64,
    #[serde(default)]
    pub used_in_pretrain: bool,
    /// False when the knob is not part of the tuned catalog; such hints are
    /// kept for ranking only.
    #[serde(default = "default_true")]
    pub actionable: bool,
}

fn default_priority() -> f64 {
    INITIAL_PRIORITY
}

fn default_true() -> bool {
    true
}

impl TuningHint {
    pub fn new(knob: &str, action: RecAction, conditions: ConditionVector) -> Self {
        TuningHint {
            knob: knob.to_string(),
            action,
            conditions,
            source: String::new(),
            priority: INITIAL_PRIORITY,
            used_in_pretrain: false,
            actionable: true,
        }
    }

    pub fn with_source(mut self, source: &str) -> Self {
        self.source = source.to_string();
        self
    }

    pub fn with_priority(mut self, priority: f64) -> Self {
        self.priority = priority.clamp(0.0, 1.0);
        self
    }

    /// Equality over the `<knob, action, conditions>` triple only.
    pub fn same_triple(&self, other: &TuningHint) -> bool {
        self.knob == other.knob && self.action == other.action && self.conditions == other.conditions
    }
}

/// Index of a hint within the trainer-owned hint list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HintId(pub usize);

/// Indices of hints whose conditions are all present in `current`, in input
/// order.
pub fn match_hints(hints: &[TuningHint], current: &ConditionSet) -> Vec<HintId> {
    hints
        .iter()
        .enumerate()
        .filter(|(_, h)| h.conditions.is_satisfied_by(current))
        .map(|(i, _)| HintId(i))
        .collect()
}

/// Normalized selection probabilities for `matched`.
pub fn selection_weights(hints: &[TuningHint], matched: &[HintId]) -> Vec<f64> {
    let raw: Vec<f64> = matched
        .iter()
        .map(|id| hints[id.0].priority.max(SELECTION_FLOOR))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Picks one matched hint with probability proportional to
/// `max(priority, SELECTION_FLOOR)`.
pub fn select_hint<R: Rng + ?Sized>(
    hints: &[TuningHint],
    matched: &[HintId],
    rng: &mut R,
) -> Result<HintId, HintError> {
    match matched {
        [] => Err(HintError::NoMatchedHints),
        [only] => Ok(*only),
        _ => {
            let weights: Vec<f64> = matched
                .iter()
                .map(|id| hints[id.0].priority.max(SELECTION_FLOOR))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (id, w) in matched.iter().zip(&weights) {
                if u < *w {
                    return Ok(*id);
                }
                u -= w;
            }
            Ok(*matched.last().expect("nonempty"))
        }
    }
}

/// Priority update after the environment's response to a hint-adjusted
/// action: `½(prior + (perf_t − perf_0)/perf_t)`, clamped to `[0, 1]`.
pub fn update_priority(prior: f64, perf_t: f64, perf_0: f64) -> Result<f64, HintError> {
    if !(perf_t > 0.0) {
        return Err(HintError::NonPositivePerf(perf_t));
    }
    let gain = (perf_t - perf_0) / perf_t;
    Ok((0.5 * (prior + gain)).clamp(0.0, 1.0))
}

/// Priority assigned from a demonstration's improvement ratio.
pub fn init_priority(perf_imp: f64) -> f64 {
    if perf_imp.is_nan() {
        return 0.0;
    }
    perf_imp.clamp(0.0, 1.0)
}

/// Host resources used to resolve relative explicit values such as
/// "25% of memory".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub total_memory_bytes: f64,
    pub cores: u32,
}

impl Default for MachineProfile {
    fn default() -> Self {
        // 8 cores / 32 GiB server
        MachineProfile {
            total_memory_bytes: 32.0 * (1u64 << 30) as f64,
            cores: 8,
        }
    }
}

impl MachineProfile {
    pub fn load(path: &Path) -> Result<Self, HintError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HintError::File(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HintError::File(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Dimension {
    Bytes,
    Millis,
}

fn unit_scale(unit: &str) -> Option<(Dimension, f64)> {
    let u = unit.trim().to_ascii_lowercase();
    let kib: f64 = 1024.0;
    let size = |p: i32| Some((Dimension::Bytes, kib.powi(p)));
    match u.as_str() {
        "b" | "byte" | "bytes" => size(0),
        "k" | "kb" | "kib" => size(1),
        "m" | "mb" | "mib" => size(2),
        "g" | "gb" | "gib" => size(3),
        "t" | "tb" | "tib" => size(4),
        "8kb" | "8kb pages" | "pages" => Some((Dimension::Bytes, 8.0 * kib)),
        "us" => Some((Dimension::Millis, 1e-3)),
        "ms" => Some((Dimension::Millis, 1.0)),
        "s" | "sec" | "seconds" => Some((Dimension::Millis, 1e3)),
        "min" | "minutes" => Some((Dimension::Millis, 6e4)),
        _ => None,
    }
}

/// Resolves an explicit recommended value into the raw units of `spec`,
/// clamped to the knob range.
///
/// Supported units: none (already raw), size units (B/KB/MB/GB/TB, binary
/// multiples), time units (us/ms/s/min), `% of memory` and `% of cores`.
pub fn resolve_explicit(
    spec: &KnobSpec,
    value: f64,
    unit: &str,
    profile: &MachineProfile,
) -> Result<f64, HintError> {
    let fail = |reason: &str| HintError::Unresolvable {
        knob: spec.name.clone(),
        value,
        unit: unit.to_string(),
        reason: reason.to_string(),
    };
    let u = unit.trim().to_ascii_lowercase();
    let raw = if u.is_empty() {
        value
    } else if let Some(rest) = u.strip_prefix('%') {
        let rest = rest.trim().trim_start_matches("of").trim();
        let fraction = value / 100.0;
        match rest {
            "" | "memory" | "ram" | "mem" => {
                let bytes = fraction * profile.total_memory_bytes;
                convert(bytes, Dimension::Bytes, spec).ok_or_else(|| fail("knob is not a size"))?
            }
            "cores" | "cpu" | "cpus" => fraction * profile.cores as f64,
            _ => return Err(fail("unknown relative base")),
        }
    } else {
        let (dim, scale) = unit_scale(&u).ok_or_else(|| fail("unknown unit"))?;
        convert(value * scale, dim, spec).ok_or_else(|| fail("unit incompatible with knob"))?
    };
    if !raw.is_finite() {
        return Err(fail("non-finite value"));
    }
    Ok(spec.snap(raw))
}

/// Raw target value of an explicit recommendation for `spec`. Labels
/// resolve to the index of the matching enumeration value.
pub fn resolve_target(spec: &KnobSpec, action: &RecAction, profile: &MachineProfile) -> Result<Option<f64>, HintError> {
    match action {
        RecAction::SetExplicit { label: Some(label), .. } => {
            let index = spec
                .enum_values
                .iter()
                .position(|v| v.eq_ignore_ascii_case(label))
                .ok_or_else(|| HintError::Unresolvable {
                    knob: spec.name.clone(),
                    value: f64::NAN,
                    unit: label.clone(),
                    reason: "no such enumeration value".into(),
                })?;
            Ok(Some(index as f64))
        }
        RecAction::SetExplicit { value, unit, .. } => resolve_explicit(spec, *value, unit, profile).map(Some),
        RecAction::Increase | RecAction::Decrease => Ok(None),
    }
}

fn convert(base: f64, dim: Dimension, spec: &KnobSpec) -> Option<f64> {
    let (knob_dim, knob_scale) = if spec.unit.trim().is_empty() {
        (dim, 1.0)
    } else {
        unit_scale(&spec.unit)?
    };
    (knob_dim == dim).then(|| base / knob_scale)
}

#[derive(Debug, Serialize, Deserialize)]
struct HintFile {
    format: String,
    hints: Vec<TuningHint>,
}

pub fn hints_to_json(hints: &[TuningHint]) -> String {
    let file = HintFile {
        format: HINT_FILE_FORMAT.to_string(),
        hints: hints.to_vec(),
    };
    serde_json::to_string_pretty(&file).expect("hints serialize")
}

pub fn hints_from_json(text: &str) -> Result<Vec<TuningHint>, HintError> {
    let file: HintFile = serde_json::from_str(text).map_err(|e| HintError::File(e.to_string()))?;
    if file.format != HINT_FILE_FORMAT {
        return Err(HintError::File(format!(
            "unsupported format `{}` (expected `{HINT_FILE_FORMAT}`)",
            file.format
        )));
    }
    Ok(file
        .hints
        .into_iter()
        .map(|mut h| {
            h.priority = h.priority.clamp(0.0, 1.0);
            h
        })
        .collect())
}

pub fn load_hints(path: &Path) -> Result<Vec<TuningHint>, HintError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HintError::File(format!("{}: {e}", path.display())))?;
    hints_from_json(&text)
}

pub fn save_hints(path: &Path, hints: &[TuningHint]) -> Result<(), HintError> {
    std::fs::write(path, hints_to_json(hints))
        .map_err(|e| HintError::File(format!("{}: {e}", path.display())))
}
