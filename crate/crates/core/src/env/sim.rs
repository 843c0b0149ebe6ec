//! Deterministic simulated DBMS.
//!
//! Performance of a normalized configuration `x` is
//!
//! ```text
//! perf = base_perf
//!      · Π_k [1 + w_k · exp(−(x_k − μ_k)² / (2σ_k²))]
//!      · Π_pairs [1 + strength · x_i · x_j]
//!      · penalty            (if the memory group exceeds its budget)
//!      · exp(ε),  ε ~ N(0, noise_sigma²) drawn from the evaluation seed
//! ```
//!
//! where each optimum `μ_k` is a linear function of the workload mix,
//! clamped to `[-1, 1]`:
//! `μ_k = base + read·mix.read + write·(mix.update + mix.insert) + scan·mix.scan`.
//!
//! Metrics are analytic in the configuration and workload:
//!
//! | metric             | definition                                                        |
//! |--------------------|-------------------------------------------------------------------|
//! | `cpu_util`         | `0.2 + 0.6 · q / (1 + q)` with `q = perf / base_perf`             |
//! | `mem_util`         | `0.25 + 0.6 · Σ memory-group raw / budget` (0.5 without a budget), clamped to `[0, 1]` |
//! | `buffer_hit_ratio` | `0.70 + 0.29 · logistic(4 · (x_buffer + 0.2))` (0.95 without a buffer role) |
//! | `dirty_page_ratio` | `write_fraction · (0.6 − 0.2 · (x_log + 1))` (`x_log = −1` without a log role) |
//! | `read_ops`         | `perf · mix.read`                                                 |
//! | `write_ops`        | `perf · (mix.update + mix.insert)`                                |
//! | `scan_ops`         | `perf · mix.scan`                                                 |
//! | `sort_ops`         | share of operations that sort: `0.5 · mix.scan`                   |
//! | `disk_io_rate`     | `(read_ops + scan_ops)·(1 − hit) + write_ops · dirty`             |

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    check_config, EnvError, Environment, Evaluation, MetricDef, MetricSchema, MetricsSnapshot,
    RuleTable, WorkloadMix,
};
use crate::catalog::{Catalog, KnobConfig};

/// Workload-dependent optimum of one knob in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Optimum {
    pub base: f64,
    pub read: f64,
    pub write: f64,
    pub scan: f64,
}

impl Optimum {
    pub fn constant(base: f64) -> Self {
        Optimum {
            base,
            ..Default::default()
        }
    }

    pub fn at(&self, mix: &WorkloadMix) -> f64 {
        (self.base + self.read * mix.read + self.write * mix.write_fraction() + self.scan * mix.scan)
            .clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobResponse {
    pub knob: String,
    pub weight: f64,
    pub width: f64,
    pub optimum: Optimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub knobs: [String; 2],
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    /// Member knobs; they must share a unit since raw values are summed.
    pub knobs: Vec<String>,
    pub budget: f64,
    pub penalty: f64,
}

/// Knobs driving the analytic metrics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRoles {
    pub buffer: Option<String>,
    pub log: Option<String>,
}

fn default_ops() -> f64 {
    500_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub base_perf: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Operations per evaluation; modeled duration is `ops / perf`.
    #[serde(default = "default_ops")]
    pub ops_per_evaluation: f64,
    pub workload: WorkloadMix,
    pub catalog: Catalog,
    #[serde(default)]
    pub response: Vec<KnobResponse>,
    #[serde(default)]
    pub interaction: Vec<Interaction>,
    #[serde(default)]
    pub memory_budget: Option<MemoryBudget>,
    #[serde(default)]
    pub roles: MetricRoles,
    #[serde(default)]
    pub conditions: RuleTable,
    /// Overrides of the default metric bounds, by name.
    #[serde(default)]
    pub metric: Vec<MetricDef>,
}

#[derive(Deserialize)]
struct SimSpecFile {
    catalog_file: Option<String>,
    #[serde(flatten)]
    rest: toml::Table,
}

impl SimSpec {
    /// Parses a simulator spec. The catalog is either an inline `[catalog]`
    /// table or a `catalog_file` path relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, EnvError> {
        let file: SimSpecFile =
            toml::from_str(text).map_err(|e| EnvError::Setup(format!("sim spec: {e}")))?;
        let mut table = file.rest;
        if let Some(rel) = file.catalog_file {
            let catalog = Catalog::load(&base_dir.join(rel))?;
            let value = toml::Value::try_from(&catalog)
                .map_err(|e| EnvError::Setup(format!("catalog: {e}")))?;
            table.insert("catalog".into(), value);
        }
        let spec: SimSpec = table
            .try_into()
            .map_err(|e| EnvError::Setup(format!("sim spec: {e}")))?;
        // Round-trip through Catalog::new to enforce catalog invariants.
        let catalog = Catalog::new(&spec.catalog.dbms, spec.catalog.knobs().to_vec())?;
        let spec = SimSpec { catalog, ..spec };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Setup(m));
        if !(self.base_perf > 0.0) {
            return bad("base_perf must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        self.workload.validate()?;
        for r in &self.response {
            if self.catalog.index_of(&r.knob).is_none() {
                return bad(format!("response for unknown knob `{}`", r.knob));
            }
            if !(r.weight >= 0.0) || !(r.width > 0.0) {
                return bad(format!("response `{}`: weight must be >= 0 and width > 0", r.knob));
            }
        }
        for i in &self.interaction {
            for k in &i.knobs {
                if self.catalog.index_of(k).is_none() {
                    return bad(format!("interaction with unknown knob `{k}`"));
                }
            }
            if !(i.strength.abs() < 1.0) {
                return bad("interaction strength must lie in (-1, 1)".into());
            }
        }
        if let Some(m) = &self.memory_budget {
            if !(m.penalty > 0.0 && m.penalty <= 1.0) {
                return bad("memory penalty factor must lie in (0, 1]".into());
            }
            if !(m.budget > 0.0) {
                return bad("memory budget must be positive".into());
            }
            let mut unit = None;
            for k in &m.knobs {
                let spec = self
                    .catalog
                    .spec(k)
                    .ok_or_else(|| EnvError::Setup(format!("memory group: unknown knob `{k}`")))?;
                match unit {
                    None => unit = Some(spec.unit.clone()),
                    Some(ref u) if *u != spec.unit => {
                        return bad("memory group knobs must share a unit".into())
                    }
                    _ => {}
                }
            }
        }
        for role in [&self.roles.buffer, &self.roles.log].into_iter().flatten() {
            if self.catalog.index_of(role).is_none() {
                return bad(format!("metric role names unknown knob `{role}`"));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> MetricSchema {
        let top = 4.0 * self.base_perf;
        let mut defs = vec![
            MetricDef { name: "cpu_util".into(), min: 0.0, max: 1.0 },
            MetricDef { name: "mem_util".into(), min: 0.0, max: 1.0 },
            MetricDef { name: "buffer_hit_ratio".into(), min: 0.0, max: 1.0 },
            MetricDef { name: "dirty_page_ratio".into(), min: 0.0, max: 1.0 },
            MetricDef { name: "read_ops".into(), min: 0.0, max: top },
            MetricDef { name: "write_ops".into(), min: 0.0, max: top },
            MetricDef { name: "sort_ops".into(), min: 0.0, max: 1.0 },
            MetricDef { name: "scan_ops".into(), min: 0.0, max: top },
            MetricDef { name: "disk_io_rate".into(), min: 0.0, max: top },
        ];
        for o in &self.metric {
            if let Some(d) = defs.iter_mut().find(|d| d.name == o.name) {
                *d = o.clone();
            }
        }
        MetricSchema { metrics: defs }
    }

    fn response_params(&self) -> Vec<(usize, f64, f64, f64)> {
        self.response
            .iter()
            .map(|r| {
                let idx = self.catalog.index_of(&r.knob).expect("validated");
                (idx, r.weight, r.width, r.optimum.at(&self.workload))
            })
            .collect()
    }

    /// Per-knob optimum in normalized units under the spec's workload.
    pub fn optimum_of(&self, knob: &str) -> Option<f64> {
        self.response
            .iter()
            .find(|r| r.knob == knob)
            .map(|r| r.optimum.at(&self.workload))
    }

    fn memory_over_budget(&self, config: &KnobConfig) -> Option<f64> {
        self.memory_budget.as_ref().map(|m| {
            let used: f64 = m.knobs.iter().filter_map(|k| config.get(k)).sum();
            used / m.budget
        })
    }

    /// Noise-free response surface times the memory penalty, given the raw
    /// configuration for the budget check.
    fn surface(&self, x: &[f64], config: &KnobConfig) -> f64 {
        let mut perf = self.base_perf;
        for (idx, w, width, mu) in self.response_params() {
            let d = x[idx] - mu;
            perf *= 1.0 + w * (-(d * d) / (2.0 * width * width)).exp();
        }
        for i in &self.interaction {
            let a = self.catalog.index_of(&i.knobs[0]).expect("validated");
            let b = self.catalog.index_of(&i.knobs[1]).expect("validated");
            perf *= 1.0 + i.strength * x[a] * x[b];
        }
        if let (Some(m), Some(ratio)) = (&self.memory_budget, self.memory_over_budget(config)) {
            if ratio > 1.0 {
                perf *= m.penalty;
            }
        }
        perf
    }
}

/// Multiplicative noise `exp(ε)` for an evaluation seed.
pub(crate) fn noise_factor(sigma: f64, seed: u64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, sigma).expect("sigma >= 0").sample(&mut rng);
    eps.exp()
}

/// Performance of a normalized action vector. The memory budget is checked
/// against the denormalized configuration.
pub fn simulate_perf(spec: &SimSpec, x: &[f64], seed: u64) -> Result<f64, EnvError> {
    if x.len() != spec.catalog.len() {
        return Err(EnvError::InvalidConfig(format!(
            "action has {} components, expected {}",
            x.len(),
            spec.catalog.len()
        )));
    }
    if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(EnvError::InvalidConfig("action outside [-1, 1]".into()));
    }
    let config = spec.catalog.from_action(x)?;
    Ok(spec.surface(x, &config) * noise_factor(spec.noise_sigma, seed))
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone)]
pub struct Simulator {
    spec: SimSpec,
    schema: MetricSchema,
}

impl Simulator {
    pub fn new(spec: SimSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let schema = spec.schema();
        spec.conditions.check(&schema)?;
        Ok(Simulator { spec, schema })
    }

    pub fn spec(&self) -> &SimSpec {
        &self.spec
    }

    pub fn metrics_for(&self, x: &[f64], config: &KnobConfig, perf: f64) -> MetricsSnapshot {
        let s = &self.spec;
        let mix = &s.workload;
        let q = perf / s.base_perf;
        let role_x = |role: &Option<String>| {
            role.as_ref()
                .and_then(|k| s.catalog.index_of(k))
                .map(|i| x[i])
        };
        let hit = role_x(&s.roles.buffer)
            .map(|xb| 0.70 + 0.29 * logistic(4.0 * (xb + 0.2)))
            .unwrap_or(0.95);
        let x_log = role_x(&s.roles.log).unwrap_or(-1.0);
        let dirty = (mix.write_fraction() * (0.6 - 0.2 * (x_log + 1.0))).clamp(0.0, 1.0);
        let mem = s
            .memory_over_budget(config)
            .map(|r| (0.25 + 0.6 * r).clamp(0.0, 1.0))
            .unwrap_or(0.5);
        let read_ops = perf * mix.read;
        let write_ops = perf * mix.write_fraction();
        let scan_ops = perf * mix.scan;
        let disk = (read_ops + scan_ops) * (1.0 - hit) + write_ops * dirty;
        MetricsSnapshot::from_pairs([
            ("cpu_util", 0.2 + 0.6 * q / (1.0 + q)),
            ("mem_util", mem),
            ("buffer_hit_ratio", hit),
            ("dirty_page_ratio", dirty),
            ("read_ops", read_ops),
            ("write_ops", write_ops),
            ("sort_ops", 0.5 * mix.scan),
            ("scan_ops", scan_ops),
            ("disk_io_rate", disk),
        ])
    }

    /// Noise-free performance of a raw configuration.
    pub fn noiseless_perf(&self, config: &KnobConfig) -> Result<f64, EnvError> {
        check_config(&self.spec.catalog, config)?;
        let x = self.spec.catalog.to_action(config)?;
        Ok(self.spec.surface(&x, config))
    }
}

impl Environment for Simulator {
    fn catalog(&self) -> &Catalog {
        &self.spec.catalog
    }

    fn schema(&self) -> &MetricSchema {
        &self.schema
    }

    fn workload(&self) -> &WorkloadMix {
        &self.spec.workload
    }

    fn rules(&self) -> &RuleTable {
        &self.spec.conditions
    }

    fn evaluate(&mut self, config: &KnobConfig, seed: u64) -> Result<Evaluation, EnvError> {
        check_config(&self.spec.catalog, config)?;
        let x = self.spec.catalog.to_action(config)?;
        let perf = self.spec.surface(&x, config) * noise_factor(self.spec.noise_sigma, seed);
        let metrics = self.metrics_for(&x, config, perf);
        Ok(Evaluation {
            metrics,
            perf,
            duration_secs: self.spec.ops_per_evaluation / perf,
        })
    }
}
