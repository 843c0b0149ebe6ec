//! Rule table mapping runtime metrics and the workload mix to condition tags.

use serde::{Deserialize, Serialize};

use super::{EnvError, MetricSchema, MetricsSnapshot, WorkloadMix};
use crate::hints::{ConditionSet, ConditionTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleOp {
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRule {
    pub metric: String,
    pub op: RuleOp,
    pub threshold: f64,
    pub tag: ConditionTag,
}

impl MetricRule {
    pub fn new(metric: &str, op: RuleOp, threshold: f64, tag: ConditionTag) -> Self {
        MetricRule {
            metric: metric.to_string(),
            op,
            threshold,
            tag,
        }
    }

    fn fires(&self, value: f64) -> bool {
        match self.op {
            RuleOp::Below => value < self.threshold,
            RuleOp::Above => value > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTable {
    /// Read (write) fraction at or above which the workload is read (write) heavy.
    #[serde(default = "half")]
    pub workload_threshold: f64,
    #[serde(default, rename = "rule")]
    pub rules: Vec<MetricRule>,
}

fn half() -> f64 {
    0.5
}

impl Default for RuleTable {
    fn default() -> Self {
        use ConditionTag::*;
        use RuleOp::*;
        RuleTable {
            workload_threshold: 0.5,
            rules: vec![
                MetricRule::new("buffer_hit_ratio", Below, 0.9, LowBufferRatio),
                MetricRule::new("dirty_page_ratio", Above, 0.3, DirtyPages),
                MetricRule::new("mem_util", Above, 0.85, MemoryPressure),
                MetricRule::new("mem_util", Below, 0.5, MemoryHeadroom),
                MetricRule::new("sort_ops", Above, 0.05, SortOps),
            ],
        }
    }
}

impl RuleTable {
    /// Fails if a rule names a metric the environment does not report.
    pub fn check(&self, schema: &MetricSchema) -> Result<(), EnvError> {
        for rule in &self.rules {
            if schema.index_of(&rule.metric).is_none() {
                return Err(EnvError::Setup(format!(
                    "condition rule for `{}` references unknown metric `{}`",
                    rule.tag, rule.metric
                )));
            }
        }
        Ok(())
    }

    pub fn classify(&self, metrics: &MetricsSnapshot, mix: &WorkloadMix) -> ConditionSet {
        let mut tags = ConditionSet::new();
        let (read, write) = (mix.read_fraction(), mix.write_fraction());
        let t = self.workload_threshold;
        if read >= t && write >= t {
            tags.insert(ConditionTag::Mixed);
        } else if read >= t {
            tags.insert(ConditionTag::ReadHeavy);
        } else if write >= t {
            tags.insert(ConditionTag::WriteHeavy);
        } else {
            tags.insert(ConditionTag::Mixed);
        }
        for rule in &self.rules {
            if let Some(v) = metrics.get(&rule.metric) {
                if rule.fires(v) {
                    tags.insert(rule.tag);
                }
            }
        }
        tags
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::MetricDef;
    use ConditionTag::*;

    fn snap(hit: f64, dirty: f64, mem: f64) -> MetricsSnapshot {
        MetricsSnapshot::from_pairs([
            ("buffer_hit_ratio", hit),
            ("dirty_page_ratio", dirty),
            ("mem_util", mem),
            ("sort_ops", 0.0),
        ])
    }

    fn mix(read: f64, write: f64) -> WorkloadMix {
        WorkloadMix::new(read, write, 0.0, (1.0 - read - write).max(0.0)).unwrap()
    }

    #[test]
    fn read_fraction_tags_read_heavy() {
        let tags = RuleTable::default().classify(&snap(0.95, 0.1, 0.6), &mix(0.8, 0.2));
        assert!(tags.contains(&ReadHeavy));
    }

    #[test]
    fn quiet_metrics_raise_no_flags() {
        let tags = RuleTable::default().classify(&snap(0.95, 0.1, 0.6), &mix(0.8, 0.2));
        for flag in [LowBufferRatio, DirtyPages, MemoryPressure, MemoryHeadroom, SortOps] {
            assert!(!tags.contains(&flag), "{flag}");
        }
    }

    #[test]
    fn memory_bands_are_exclusive() {
        let tags = RuleTable::default().classify(&snap(0.95, 0.1, 0.9), &mix(0.8, 0.2));
        assert!(tags.contains(&MemoryPressure));
        assert!(!tags.contains(&MemoryHeadroom));
    }

    #[test]
    fn balanced_workload_is_mixed() {
        let tags = RuleTable::default().classify(&snap(0.95, 0.1, 0.6), &mix(0.4, 0.5));
        assert!(tags.contains(&Mixed));
        assert!(!tags.contains(&ReadHeavy) && !tags.contains(&WriteHeavy));
    }

    #[test]
    fn unknown_metric_is_setup_error() {
        let schema = MetricSchema::new(vec![MetricDef { name: "cpu_util".into(), min: 0.0, max: 1.0 }]).unwrap();
        assert!(matches!(RuleTable::default().check(&schema), Err(EnvError::Setup(_))));
    }

    #[test]
    fn classification_monotone_in_mem_util() {
        let table = RuleTable::default();
        let mut last = false;
        for i in 0..=100 {
            let mem = i as f64 / 100.0;
            let has = table.classify(&snap(0.95, 0.1, mem), &mix(0.8, 0.2)).contains(&MemoryPressure);
            assert!(!last || has);
            last = has;
        }
    }
}
