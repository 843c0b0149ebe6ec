//! Tunable knob space: knob specs, catalog loading, and the mapping between
//! raw knob values and the normalized `[-1, 1]` action space.
//!
//! Catalog files are TOML (or JSON) documents of the form
//!
//! ```toml
//! dbms = "mysql"
//!
//! [[knob]]
//! name = "innodb_buffer_pool_size"
//! kind = "integer"          # integer | real | boolean | enumeration
//! min = 134217728
//! max = 17179869184
//! default = 134217728
//! unit = "bytes"
//! restart_required = true
//!
//! [[knob]]
//! name = "innodb_flush_method"
//! kind = "enumeration"
//! enum_values = ["fsync", "O_DSYNC", "O_DIRECT"]
//! default = 0
//! ```
//!
//! Boolean knobs take `min = 0, max = 1` implicitly and enumeration knobs the
//! index range `[0, len - 1]`; explicit bounds for those kinds are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

static SATURATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`KnobSpec::denormalize`] clamped an out-of-range action
/// component since process start.
pub fn saturation_count() -> u64 {
    SATURATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("knob `{knob}`: raw value {value} outside [{min}, {max}]")]
    OutOfRange {
        knob: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("knob `{0}`: empty range (min must be < max)")]
    EmptyRange(String),
    #[error("knob `{knob}`: default {default} outside [{min}, {max}]")]
    DefaultOutOfRange {
        knob: String,
        default: f64,
        min: f64,
        max: f64,
    },
    #[error("knob `{0}`: enumeration needs at least two values")]
    EnumTooSmall(String),
    #[error("duplicate knob `{0}`")]
    DuplicateKnob(String),
    #[error("unknown knob `{0}`")]
    UnknownKnob(String),
    #[error("action has {got} components, catalog has {expected} knobs")]
    Dimension { expected: usize, got: usize },
    #[error("catalog has no knobs")]
    Empty,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnobKind {
    Integer,
    Real,
    Boolean,
    Enumeration,
}

impl KnobKind {
    /// Kinds whose raw values live on an integer grid.
    pub fn is_discrete(self) -> bool {
        !matches!(self, KnobKind::Real)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobSpec {
    pub name: String,
    pub kind: KnobKind,
    #[serde(default)]
    pub min: f64,
    #[serde(default)]
    pub max: f64,
    pub default: f64,
    #[serde(default)]
    pub unit: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub enum_values: Vec<String>,
    #[serde(default)]
    pub restart_required: bool,
}

impl KnobSpec {
    pub fn integer(name: &str, min: f64, max: f64, default: f64) -> Self {
        Self::numeric(name, KnobKind::Integer, min, max, default)
    }

    pub fn real(name: &str, min: f64, max: f64, default: f64) -> Self {
        Self::numeric(name, KnobKind::Real, min, max, default)
    }

    fn numeric(name: &str, kind: KnobKind, min: f64, max: f64, default: f64) -> Self {
        KnobSpec {
            name: name.to_string(),
            kind,
            min,
            max,
            default,
            unit: String::new(),
            enum_values: Vec::new(),
            restart_required: false,
        }
    }

    pub fn with_unit(mut self, unit: &str) -> Self {
        self.unit = unit.to_string();
        self
    }

    /// Fixes implicit bounds for boolean/enumeration kinds and checks the
    /// range and default invariants.
    pub fn validated(mut self) -> Result<Self, CatalogError> {
        match self.kind {
            KnobKind::Boolean => {
                self.min = 0.0;
                self.max = 1.0;
            }
            KnobKind::Enumeration => {
                if self.enum_values.len() < 2 {
                    return Err(CatalogError::EnumTooSmall(self.name));
                }
                self.min = 0.0;
                self.max = (self.enum_values.len() - 1) as f64;
            }
            KnobKind::Integer | KnobKind::Real => {
                if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
                    return Err(CatalogError::EmptyRange(self.name));
                }
            }
        }
        if !(self.min..=self.max).contains(&self.default) {
            return Err(CatalogError::DefaultOutOfRange {
                knob: self.name.clone(),
                default: self.default,
                min: self.min,
                max: self.max,
            });
        }
        Ok(self)
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, raw: f64) -> bool {
        raw >= self.min && raw <= self.max
    }

    /// Linear map of `raw` onto `[-1, 1]`: `-1` at `min`, `+1` at `max`.
    pub fn normalize(&self, raw: f64) -> Result<f64, CatalogError> {
        if !self.contains(raw) {
            return Err(CatalogError::OutOfRange {
                knob: self.name.clone(),
                value: raw,
                min: self.min,
                max: self.max,
            });
        }
        Ok(2.0 * (raw - self.min) / self.range() - 1.0)
    }

    /// Inverse of [`normalize`](Self::normalize). Components outside `[-1, 1]`
    /// are clamped (and counted, see [`saturation_count`]); discrete kinds
    /// round half away from zero onto their grid.
    pub fn denormalize(&self, a: f64) -> f64 {
        let a = if a.is_nan() {
            SATURATIONS.fetch_add(1, Ordering::Relaxed);
            0.0
        } else if !(-1.0..=1.0).contains(&a) {
            SATURATIONS.fetch_add(1, Ordering::Relaxed);
            a.clamp(-1.0, 1.0)
        } else {
            a
        };
        let raw = self.min + (a + 1.0) * 0.5 * self.range();
        self.snap(raw)
    }

    /// Clamps into range and rounds discrete kinds onto the integer grid.
    pub fn snap(&self, raw: f64) -> f64 {
        let raw = raw.clamp(self.min, self.max);
        if self.kind.is_discrete() {
            raw.round().clamp(self.min, self.max)
        } else {
            raw
        }
    }
}

/// A full assignment of raw knob values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnobConfig {
    pub values: BTreeMap<String, f64>,
}

impl KnobConfig {
    pub fn get(&self, knob: &str) -> Option<f64> {
        self.values.get(knob).copied()
    }

    pub fn set(&mut self, knob: &str, value: f64) {
        self.values.insert(knob.to_string(), value);
    }

    /// Parses flat `name = value` lines; `#` starts a comment.
    pub fn parse_flat(text: &str) -> Result<Self, String> {
        let mut config = KnobConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `name = value`", lineno + 1))?;
            let value: f64 = value
                .trim()
                .trim_matches('"')
                .parse()
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
            config.set(name.trim(), value);
        }
        Ok(config)
    }

    pub fn to_flat(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Missing(String),
    Unknown(String),
    OutOfRange { knob: String, value: f64 },
    NotIntegral { knob: String, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing(k) => write!(f, "{k}: missing"),
            Violation::Unknown(k) => write!(f, "{k}: unknown knob"),
            Violation::OutOfRange { knob, value } => write!(f, "{knob}: {value} out of range"),
            Violation::NotIntegral { knob, value } => write!(f, "{knob}: {value} is not integral"),
        }
    }
}

const MYSQL_CATALOG: &str = include_str!("../data/catalogs/mysql.toml");
const POSTGRESQL_CATALOG: &str = include_str!("../data/catalogs/postgresql.toml");

/// Shipped default knob catalog for `mysql` or `postgresql`.
pub fn bundled_catalog(dbms: &str) -> Option<Catalog> {
    let text = match dbms.to_ascii_lowercase().as_str() {
        "mysql" => MYSQL_CATALOG,
        "postgresql" | "postgres" | "pg" => POSTGRESQL_CATALOG,
        _ => return None,
    };
    Some(Catalog::parse(text, dbms).expect("bundled catalog parses"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub dbms: String,
    #[serde(rename = "knob")]
    knobs: Vec<KnobSpec>,
}

impl Catalog {
    pub fn new(dbms: &str, knobs: Vec<KnobSpec>) -> Result<Self, CatalogError> {
        if knobs.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut seen = HashSet::new();
        let mut validated = Vec::with_capacity(knobs.len());
        for knob in knobs {
            if !seen.insert(knob.name.clone()) {
                return Err(CatalogError::DuplicateKnob(knob.name));
            }
            validated.push(knob.validated()?);
        }
        Ok(Catalog {
            dbms: dbms.to_string(),
            knobs: validated,
        })
    }

    /// Parses a catalog document. JSON is detected by a leading `{`,
    /// everything else is read as TOML.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CatalogError> {
        let raw: Catalog = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| CatalogError::Parse {
                path: origin.to_string(),
                message: e.to_string(),
            })?
        } else {
            toml::from_str(text).map_err(|e| CatalogError::Parse {
                path: origin.to_string(),
                message: e.to_string(),
            })?
        };
        Catalog::new(&raw.dbms, raw.knobs)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn knobs(&self) -> &[KnobSpec] {
        &self.knobs
    }

    pub fn len(&self) -> usize {
        self.knobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knobs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.knobs.iter().position(|k| k.name == name)
    }

    pub fn spec(&self, name: &str) -> Option<&KnobSpec> {
        self.knobs.iter().find(|k| k.name == name)
    }

    pub fn default_config(&self) -> KnobConfig {
        KnobConfig {
            values: self
                .knobs
                .iter()
                .map(|k| (k.name.clone(), k.default))
                .collect(),
        }
    }

    pub fn validate(&self, config: &KnobConfig) -> Vec<Violation> {
        let mut violations = Vec::new();
        for spec in &self.knobs {
            match config.get(&spec.name) {
                None => violations.push(Violation::Missing(spec.name.clone())),
                Some(v) if !spec.contains(v) => violations.push(Violation::OutOfRange {
                    knob: spec.name.clone(),
                    value: v,
                }),
                Some(v) if spec.kind.is_discrete() && v.fract() != 0.0 => {
                    violations.push(Violation::NotIntegral {
                        knob: spec.name.clone(),
                        value: v,
                    })
                }
                Some(_) => {}
            }
        }
        for name in config.values.keys() {
            if self.index_of(name).is_none() {
                violations.push(Violation::Unknown(name.clone()));
            }
        }
        violations
    }

    /// Normalized action vector in catalog order.
    pub fn to_action(&self, config: &KnobConfig) -> Result<Vec<f64>, CatalogError> {
        self.knobs
            .iter()
            .map(|spec| {
                let raw = config
                    .get(&spec.name)
                    .ok_or_else(|| CatalogError::UnknownKnob(spec.name.clone()))?;
                spec.normalize(raw)
            })
            .collect()
    }

    pub fn from_action(&self, action: &[f64]) -> Result<KnobConfig, CatalogError> {
        if action.len() != self.knobs.len() {
            return Err(CatalogError::Dimension {
                expected: self.knobs.len(),
                got: action.len(),
            });
        }
        Ok(KnobConfig {
            values: self
                .knobs
                .iter()
                .zip(action)
                .map(|(spec, &a)| (spec.name.clone(), spec.denormalize(a)))
                .collect(),
        })
    }

    /// Hash of the knob order and ranges; checkpoints record it so they
    /// cannot be loaded against a different action space.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.dbms.as_bytes());
        for k in &self.knobs {
            hasher.update(format!("|{}:{:?}:{}:{}", k.name, k.kind, k.min, k.max).as_bytes());
        }
        hex::encode(&hasher.finalize()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_catalogs_load() {
        assert_eq!(bundled_catalog("mysql").unwrap().len(), 19);
        assert_eq!(bundled_catalog("PostgreSQL").unwrap().len(), 18);
        assert!(bundled_catalog("oracle").is_none());
    }

    fn pct() -> KnobSpec {
        KnobSpec::real("pct", 0.0, 100.0, 50.0).validated().unwrap()
    }

    #[test]
    fn normalize_examples() {
        let spec = pct();
        assert_eq!(spec.normalize(50.0).unwrap(), 0.0);
        assert_eq!(spec.normalize(0.0).unwrap(), -1.0);
        assert!((spec.normalize(75.0).unwrap() - (2.0 * 75.0 / 100.0 - 1.0)).abs() < 1e-12);
        assert_eq!(spec.normalize(75.0).unwrap(), 0.5);
    }

    #[test]
    fn normalize_rejects_out_of_range_with_knob_name() {
        let err = pct().normalize(101.0).unwrap_err();
        assert!(err.to_string().contains("pct"));
    }

    #[test]
    fn denormalize_examples() {
        let real = pct();
        assert_eq!(real.denormalize(0.0), 50.0);
        let int = KnobSpec::integer("n", 0.0, 100.0, 0.0).validated().unwrap();
        assert_eq!(int.denormalize(0.501), 75.0);
        let before = saturation_count();
        assert_eq!(real.denormalize(1.3), 100.0);
        assert!(saturation_count() > before);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let int = KnobSpec::integer("n", -10.0, 10.0, 0.0).validated().unwrap();
        // 0.25 * 10 = 2.5 -> 3, -0.25 * 10 = -2.5 -> -3
        assert_eq!(int.denormalize(0.25), 3.0);
        assert_eq!(int.denormalize(-0.25), -3.0);
    }

    #[test]
    fn boolean_and_enum_use_index_range() {
        let b = KnobSpec {
            kind: KnobKind::Boolean,
            ..KnobSpec::integer("flag", 0.0, 0.0, 1.0)
        }
        .validated()
        .unwrap();
        assert_eq!(b.normalize(1.0).unwrap(), 1.0);
        assert_eq!(b.denormalize(-0.2), 0.0);
        let e = KnobSpec {
            kind: KnobKind::Enumeration,
            enum_values: vec!["a".into(), "b".into(), "c".into()],
            ..KnobSpec::integer("mode", 0.0, 0.0, 0.0)
        }
        .validated()
        .unwrap();
        assert_eq!(e.max, 2.0);
        assert_eq!(e.normalize(1.0).unwrap(), 0.0);
        assert_eq!(e.denormalize(0.9), 2.0);
    }

    fn two_knobs() -> Catalog {
        Catalog::new(
            "mysql",
            vec![
                KnobSpec::integer("a", 0.0, 10.0, 5.0),
                KnobSpec::real("b", 0.0, 1.0, 0.5),
            ],
        )
        .unwrap()
    }

    #[test]
    fn validate_config_examples() {
        let cat = two_knobs();
        assert!(cat.validate(&cat.default_config()).is_empty());

        let mut missing = cat.default_config();
        missing.values.remove("b");
        assert_eq!(cat.validate(&missing), vec![Violation::Missing("b".into())]);

        let mut over = cat.default_config();
        over.set("a", 11.0);
        let v = cat.validate(&over);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("out of range"));

        let mut unknown = cat.default_config();
        unknown.set("zzz", 1.0);
        assert_eq!(cat.validate(&unknown), vec![Violation::Unknown("zzz".into())]);
    }

    #[test]
    fn load_two_knob_toml_keeps_file_order() {
        let text = r#"
dbms = "postgresql"

[[knob]]
name = "work_mem"
kind = "integer"
min = 64
max = 1048576
default = 4096
unit = "KB"

[[knob]]
name = "random_page_cost"
kind = "real"
min = 0.1
max = 10.0
default = 4.0
"#;
        let cat = Catalog::parse(text, "inline").unwrap();
        let names: Vec<_> = cat.knobs().iter().map(|k| k.name.as_str()).collect();
        assert_eq!(names, ["work_mem", "random_page_cost"]);
    }

    #[test]
    fn load_accepts_json() {
        let text = r#"{"dbms":"mysql","knob":[{"name":"x","kind":"real","min":0,"max":2,"default":1}]}"#;
        let cat = Catalog::parse(text, "inline.json").unwrap();
        assert_eq!(cat.len(), 1);
    }

    #[test]
    fn load_rejects_duplicates_and_empty_ranges() {
        let dup = r#"
dbms = "mysql"
[[knob]]
name = "x"
kind = "real"
min = 0
max = 1
default = 0
[[knob]]
name = "x"
kind = "real"
min = 0
max = 1
default = 0
"#;
        let err = Catalog::parse(dup, "dup").unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");

        let empty = r#"
dbms = "mysql"
[[knob]]
name = "y"
kind = "integer"
min = 3
max = 3
default = 3
"#;
        let err = Catalog::parse(empty, "empty").unwrap_err();
        assert!(err.to_string().contains("empty range"), "{err}");
    }

    #[test]
    fn parse_error_carries_line_context() {
        let err = Catalog::parse("dbms = \"mysql\"\n[[knob]\nname = 1", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn fingerprint_depends_on_order() {
        let a = two_knobs();
        let b = Catalog::new(
            "mysql",
            vec![
                KnobSpec::real("b", 0.0, 1.0, 0.5),
                KnobSpec::integer("a", 0.0, 10.0, 5.0),
            ],
        )
        .unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), two_knobs().fingerprint());
    }

    #[test]
    fn flat_config_round_trip() {
        let cat = two_knobs();
        let text = cat.default_config().to_flat();
        assert_eq!(KnobConfig::parse_flat(&text).unwrap(), cat.default_config());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn integer_round_trip_exact(min in -1000i64..1000, span in 1i64..5000, frac in 0.0f64..=1.0) {
                let max = min + span;
                let spec = KnobSpec::integer("k", min as f64, max as f64, min as f64).validated().unwrap();
                let raw = (min as f64 + frac * span as f64).round();
                let back = spec.denormalize(spec.normalize(raw).unwrap());
                prop_assert_eq!(back, raw);
            }

            #[test]
            fn real_round_trip(min in -1e6f64..1e6, span in 1e-3f64..1e7, frac in 0.0f64..=1.0) {
                let spec = KnobSpec::real("k", min, min + span, min).validated().unwrap();
                let raw = (min + frac * span).clamp(spec.min, spec.max);
                let back = spec.denormalize(spec.normalize(raw).unwrap());
                let scale = raw.abs().max(span);
                prop_assert!((back - raw).abs() <= 1e-9 * scale);
            }

            #[test]
            fn normalize_strictly_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0) {
                prop_assume!(a < b);
                let spec = pct();
                prop_assert!(spec.normalize(a).unwrap() < spec.normalize(b).unwrap());
            }

            #[test]
            fn defaults_always_validate(n in 1usize..8, seed in 0u64..1000) {
                let knobs = (0..n).map(|i| {
                    let lo = (seed % 17) as f64 + i as f64;
                    KnobSpec::integer(&format!("k{i}"), lo, lo + 10.0 + i as f64, lo + 1.0)
                }).collect();
                let cat = Catalog::new("sim", knobs).unwrap();
                prop_assert!(cat.validate(&cat.default_config()).is_empty());
            }
        }
    }
}
