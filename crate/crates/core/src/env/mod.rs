//! Environment contract: evaluate a knob configuration, observe runtime
//! metrics and a higher-is-better performance scalar.
//!
//! Two implementations ship: the deterministic [`Simulator`] and the
//! [`ExternalAdapter`] that drives a real system through shell commands.

mod adapter;
mod conditions;
mod sim;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, KnobConfig};
use crate::hints::ConditionSet;

pub use adapter::{AdapterConfig, ExternalAdapter};
pub use conditions::{MetricRule, RuleOp, RuleTable};
pub use sim::{Interaction, KnobResponse, MemoryBudget, MetricRoles, Optimum, SimSpec, Simulator, simulate_perf};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("environment setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("command `{command}` failed ({status}): {stderr}")]
    Command {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("timeout after {0} s")]
    Timeout(u64),
    #[error("perf not found in benchmark output")]
    PerfNotFound,
    #[error("non-positive perf {0}")]
    NonPositivePerf(f64),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fractions of operation types in the workload. Sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadMix {
    pub read: f64,
    pub update: f64,
    pub insert: f64,
    pub scan: f64,
}

impl WorkloadMix {
    pub fn new(read: f64, update: f64, insert: f64, scan: f64) -> Result<Self, EnvError> {
        let mix = WorkloadMix {
            read,
            update,
            insert,
            scan,
        };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let parts = self.as_array();
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(EnvError::Setup(format!("workload fractions out of [0,1]: {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(EnvError::Setup(format!("workload fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Point reads plus scans.
    pub fn read_fraction(&self) -> f64 {
        self.read + self.scan
    }

    /// Updates plus inserts.
    pub fn write_fraction(&self) -> f64 {
        self.update + self.insert
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.read, self.update, self.insert, self.scan]
    }

    pub fn l1_distance(&self, other: &WorkloadMix) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Ordered metric names with the scaling bounds used for the state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricSchema {
    pub metrics: Vec<MetricDef>,
}

impl MetricSchema {
    pub fn new(metrics: Vec<MetricDef>) -> Result<Self, EnvError> {
        for m in &metrics {
            if !(m.min < m.max) {
                return Err(EnvError::Setup(format!("metric `{}`: min must be < max", m.name)));
            }
        }
        Ok(MetricSchema { metrics })
    }

    pub fn len(&self) -> usize {
        self.metrics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.iter().map(|m| m.name.as_str())
    }

    /// Metrics in schema order, min-max scaled to `[0, 1]` and clamped.
    pub fn state_vector(&self, snapshot: &MetricsSnapshot) -> Vec<f64> {
        self.metrics
            .iter()
            .map(|def| {
                let v = snapshot.get(&def.name).unwrap_or(def.min);
                ((v - def.min) / (def.max - def.min)).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Named runtime metrics in a fixed per-environment order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl MetricsSnapshot {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        let (names, values) = pairs.into_iter().map(|(n, v)| (n.to_string(), v)).unzip();
        MetricsSnapshot { names, values }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Parses flat `name=value` lines.
    pub fn parse_flat(text: &str) -> Result<Self, EnvError> {
        let mut snap = MetricsSnapshot::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| EnvError::Metrics(format!("line {}: expected name=value", i + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| EnvError::Metrics(format!("line {}: {e}", i + 1)))?;
            if !value.is_finite() {
                return Err(EnvError::Metrics(format!("line {}: non-finite value", i + 1)));
            }
            snap.names.push(name.trim().to_string());
            snap.values.push(value);
        }
        Ok(snap)
    }

    pub fn to_flat(&self) -> String {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| format!("{n}={v}\n"))
            .collect()
    }
}

/// Outcome of one configuration evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsSnapshot,
    pub perf: f64,
    /// Seconds spent running the workload (modeled for the simulator).
    pub duration_secs: f64,
}

pub trait Environment {
    fn catalog(&self) -> &Catalog;
    fn schema(&self) -> &MetricSchema;
    fn workload(&self) -> &WorkloadMix;
    fn rules(&self) -> &RuleTable;

    /// Applies `config` and measures it. `seed` drives any stochastic part
    /// of the measurement (simulator noise); real systems ignore it.
    fn evaluate(&mut self, config: &KnobConfig, seed: u64) -> Result<Evaluation, EnvError>;

    fn default_config(&self) -> KnobConfig {
        self.catalog().default_config()
    }

    fn classify(&self, metrics: &MetricsSnapshot) -> ConditionSet {
        self.rules().classify(metrics, self.workload())
    }

    fn state_vector(&self, metrics: &MetricsSnapshot) -> Vec<f64> {
        self.schema().state_vector(metrics)
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn catalog(&self) -> &Catalog {
        (**self).catalog()
    }
    fn schema(&self) -> &MetricSchema {
        (**self).schema()
    }
    fn workload(&self) -> &WorkloadMix {
        (**self).workload()
    }
    fn rules(&self) -> &RuleTable {
        (**self).rules()
    }
    fn evaluate(&mut self, config: &KnobConfig, seed: u64) -> Result<Evaluation, EnvError> {
        (**self).evaluate(config, seed)
    }
}

pub(crate) fn check_config(catalog: &Catalog, config: &KnobConfig) -> Result<(), EnvError> {
    let violations = catalog.validate(config);
    if violations.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(EnvError::InvalidConfig(list.join("; ")))
    }
}

/// Loads an environment file. Files with an `[adapter]` table describe an
/// external system, everything else is a simulator spec.
pub fn load_environment(path: &Path) -> Result<Box<dyn Environment>, EnvError> {
    let text = std::fs::read_to_string(path)?;
    let value: toml::Table = toml::from_str(&text)
        .map_err(|e| EnvError::Setup(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if value.contains_key("adapter") {
        let cfg = AdapterConfig::parse(&text, base)?;
        Ok(Box::new(ExternalAdapter::new(cfg)?))
    } else {
        let spec = SimSpec::parse(&text, base)?;
        Ok(Box::new(Simulator::new(spec)?))
    }
}
