//! Online tuning with a trained agent, and the pool of trained agents keyed
//! by the workload they were trained under.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::KnobConfig;
use crate::env::{Environment, Evaluation};
use crate::hints::{match_hints, select_hint, update_priority, ConditionSet};
use crate::replay::Experience;
use crate::trainer::{
    adjust_knob, count_violations, eval_seed, reward, shaped_reward, Phase, Session, StepRecord,
    TrainError, WorkloadFingerprint,
};

/// Weight of the workload-mix term in [`fingerprint_distance`]; the tag
/// term gets the rest.
pub const MIX_WEIGHT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("agent pool `{0}` has no usable agents for this catalog; run `train` first")]
    EmptyPool(PathBuf),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("pool entry {path}: {message}")]
    Entry { path: PathBuf, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPoolEntry {
    pub path: PathBuf,
    pub workload: WorkloadFingerprint,
    pub catalog_fingerprint: String,
    pub modified: SystemTime,
}

#[derive(Deserialize)]
struct EntryHeader {
    catalog_fingerprint: String,
    workload: WorkloadFingerprint,
}

impl AgentPoolEntry {
    pub fn read(path: &Path) -> Result<Self, TuneError> {
        let entry_err = |message: String| TuneError::Entry {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| entry_err(e.to_string()))?;
        let header: EntryHeader = serde_json::from_str(&text).map_err(|e| entry_err(e.to_string()))?;
        let modified = std::fs::metadata(path)
            .and_then(|m| m.modified())
            .unwrap_or(SystemTime::UNIX_EPOCH);
        Ok(AgentPoolEntry {
            path: path.to_path_buf(),
            workload: header.workload,
            catalog_fingerprint: header.catalog_fingerprint,
            modified,
        })
    }
}

/// Reads every `*.json` checkpoint in `dir`, in path order. Training
/// sidecars (`*.summary.json`, `*.timing.json`) are ignored; other files that
/// do not parse as checkpoints are skipped with a warning.
pub fn scan_pool(dir: &Path) -> Result<Vec<AgentPoolEntry>, TuneError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with(".summary.json") && !name.ends_with(".timing.json")
        })
        .collect();
    paths.sort();
    let mut entries = Vec::new();
    for p in paths {
        match AgentPoolEntry::read(&p) {
            Ok(e) => entries.push(e),
            Err(e) => log::warn!("skipping {e}"),
        }
    }
    Ok(entries)
}

/// `0.5·L1(mix) + 0.5·(1 − Jaccard(tags))`.
pub fn fingerprint_distance(a: &WorkloadFingerprint, b: &WorkloadFingerprint) -> f64 {
    MIX_WEIGHT * a.mix.l1_distance(&b.mix) + (1.0 - MIX_WEIGHT) * (1.0 - jaccard(&a.tags, &b.tags))
}

fn jaccard(a: &ConditionSet, b: &ConditionSet) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Nearest entry trained on the same catalog; ties go to the most recently
/// modified file.
pub fn select_agent<'a>(
    pool: &'a [AgentPoolEntry],
    target: &WorkloadFingerprint,
    catalog_fingerprint: &str,
    pool_dir: &Path,
) -> Result<&'a AgentPoolEntry, TuneError> {
    let mut best: Option<(&AgentPoolEntry, f64)> = None;
    for entry in pool.iter().filter(|e| e.catalog_fingerprint == catalog_fingerprint) {
        let d = fingerprint_distance(&entry.workload, target);
        let better = match best {
            None => true,
            Some((b, bd)) => d < bd || (d == bd && entry.modified > b.modified),
        };
        if better {
            best = Some((entry, d));
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| TuneError::EmptyPool(pool_dir.to_path_buf()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub budget: usize,
    /// Exploration noise as a fraction of the agent's initial noise scale.
    pub noise_fraction: f64,
    pub hint_adjust: bool,
    pub update_priorities: bool,
    /// Keep training the networks on online transitions.
    pub online_learn: bool,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            budget: 10,
            noise_fraction: 0.25,
            hint_adjust: true,
            update_priorities: true,
            online_learn: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explored {
    pub config: KnobConfig,
    pub perf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    /// Recommended configuration: the best measured one, or the default
    /// when nothing beat it.
    pub best_config: KnobConfig,
    pub best_perf: f64,
    pub perf_0: f64,
    pub pg_best: f64,
    /// Best configuration explored, even if worse than the default.
    pub best_explored: Option<Explored>,
    pub iterations: Vec<StepRecord>,
    pub failures: usize,
    /// Sum of evaluation durations over the budgeted iterations.
    pub cost_secs: f64,
}

/// Tunes `env` with the agent and hints in `session`. The default
/// configuration is measured first and not counted against the budget.
pub fn online_tune(session: &mut Session, env: &mut dyn Environment, cfg: &OnlineConfig) -> Result<TuneResult, TuneError> {
    if cfg.budget == 0 {
        return Err(TuneError::ZeroBudget);
    }
    let base = measure_baseline(env, cfg.seed)?;
    online_tune_from(session, env, cfg, &base)
}

/// Evaluates the default configuration with the seed `online_tune` uses
/// for its baseline.
pub fn measure_baseline(env: &mut dyn Environment, seed: u64) -> Result<Evaluation, TuneError> {
    let default = env.default_config();
    Ok(env.evaluate(&default, eval_seed(seed, 0)).map_err(TrainError::from)?)
}

/// Fingerprint of `env` as observed in `baseline`.
pub fn target_fingerprint(env: &dyn Environment, baseline: &Evaluation) -> WorkloadFingerprint {
    WorkloadFingerprint {
        mix: *env.workload(),
        tags: env.classify(&baseline.metrics),
    }
}

/// [`online_tune`] with an already measured baseline.
pub fn online_tune_from(
    session: &mut Session,
    env: &mut dyn Environment,
    cfg: &OnlineConfig,
    base: &Evaluation,
) -> Result<TuneResult, TuneError> {
    if cfg.budget == 0 {
        return Err(TuneError::ZeroBudget);
    }
    let catalog = env.catalog().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let default = catalog.default_config();
    let perf_0 = base.perf;
    if !(perf_0 > 0.0) {
        return Err(TrainError::NonPositiveBaseline(perf_0).into());
    }
    let sigma = session.agent.cfg.noise_sigma * cfg.noise_fraction;
    let (k, z, beta, tau) = (session.cfg.k, session.cfg.z, session.cfg.beta, session.cfg.tau);
    let mut state = env.state_vector(&base.metrics);
    let mut conditions = env.classify(&base.metrics);
    let mut a_prev = catalog.to_action(&default).map_err(TrainError::from)?;

    let mut best = Explored {
        config: default.clone(),
        perf: perf_0,
    };
    let mut best_explored: Option<Explored> = None;
    let mut iterations = Vec::with_capacity(cfg.budget);
    let mut failures = 0;
    let mut cost = 0.0;

    for i in 1..=cfg.budget {
        let matched: Vec<_> = match_hints(&session.hints, &conditions)
            .into_iter()
            .filter(|id| session.hints[id.0].actionable)
            .collect();
        let mut action = session.agent.explore_with(&state, sigma, &mut rng).map_err(TrainError::from)?;
        let mut config = catalog.from_action(&action).map_err(TrainError::from)?;
        let mut selected = None;
        if cfg.hint_adjust && !matched.is_empty() {
            let id = select_hint(&session.hints, &matched, &mut rng).map_err(TrainError::from)?;
            config = adjust_knob(&session.hints[id.0], &config, &catalog, k, z, &session.profile)?;
            action = catalog.to_action(&config).map_err(TrainError::from)?;
            selected = Some(id);
        }
        let violations = count_violations(&action, &a_prev, &session.hints, &matched, tau, &catalog, &session.profile);
        let mut record = StepRecord {
            evaluation: i,
            phase: Phase::Online,
            episode: None,
            step: Some(i - 1),
            perf: None,
            reward: None,
            shaped_reward: None,
            matched: matched.len(),
            violations,
            selected_hint: selected.map(|id| id.0),
            priorities: Vec::new(),
            best_perf: best.perf,
            error: None,
        };
        match env.evaluate(&config, eval_seed(cfg.seed, i)) {
            Ok(eval) if eval.perf > 0.0 && eval.perf.is_finite() => {
                cost += eval.duration_secs;
                let r = reward(eval.perf, perf_0)?;
                let shaped = shaped_reward(r, violations, matched.len(), beta);
                if let (Some(id), true) = (selected, cfg.update_priorities) {
                    let h = &mut session.hints[id.0];
                    h.priority = update_priority(h.priority, eval.perf, perf_0).map_err(TrainError::from)?;
                }
                if best_explored.as_ref().is_none_or(|b| eval.perf > b.perf) {
                    best_explored = Some(Explored {
                        config: config.clone(),
                        perf: eval.perf,
                    });
                }
                if eval.perf > best.perf {
                    best = Explored {
                        config: config.clone(),
                        perf: eval.perf,
                    };
                }
                let next_state = env.state_vector(&eval.metrics);
                if cfg.online_learn {
                    session.online_update(Experience::transition(
                        state,
                        action.clone(),
                        shaped,
                        next_state.clone(),
                    ))?;
                }
                state = next_state;
                conditions = env.classify(&eval.metrics);
                a_prev = action;
                record.perf = Some(eval.perf);
                record.reward = Some(r);
                record.shaped_reward = Some(shaped);
            }
            Ok(eval) => {
                failures += 1;
                cost += eval.duration_secs;
                record.error = Some(format!("non-positive performance {}", eval.perf));
            }
            Err(e) => {
                failures += 1;
                log::warn!("online iteration {i} failed: {e}");
                record.error = Some(e.to_string());
            }
        }
        record.priorities = session.hints.iter().map(|h| h.priority).collect();
        record.best_perf = best.perf;
        iterations.push(record);
    }

    Ok(TuneResult {
        pg_best: (best.perf - perf_0) / perf_0,
        best_config: best.config,
        best_perf: best.perf,
        perf_0,
        best_explored,
        iterations,
        failures,
        cost_secs: cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::WorkloadMix;
    use crate::hints::ConditionTag;

    fn fp(write: f64, tags: &[ConditionTag]) -> WorkloadFingerprint {
        WorkloadFingerprint {
            mix: WorkloadMix::new(1.0 - write, write, 0.0, 0.0).unwrap(),
            tags: tags.iter().copied().collect(),
        }
    }

    fn entry(name: &str, f: WorkloadFingerprint, secs: u64) -> AgentPoolEntry {
        AgentPoolEntry {
            path: PathBuf::from(name),
            workload: f,
            catalog_fingerprint: "cat".into(),
            modified: SystemTime::UNIX_EPOCH + std::time::Duration::from_secs(secs),
        }
    }

    #[test]
    fn distance_examples() {
        let a = fp(0.8, &[ConditionTag::WriteHeavy]);
        assert_eq!(fingerprint_distance(&a, &a), 0.0);
        // L1 over the mix = 2·0.1; tags identical
        let b = fp(0.9, &[ConditionTag::WriteHeavy]);
        assert!((fingerprint_distance(&a, &b) - 0.1).abs() < 1e-12);
        let c = fp(0.8, &[ConditionTag::ReadHeavy]);
        assert!((fingerprint_distance(&a, &c) - 0.5).abs() < 1e-12);
        let empty = fp(0.8, &[]);
        assert_eq!(fingerprint_distance(&empty, &empty), 0.0);
    }

    #[test]
    fn nearest_write_fraction_wins() {
        let pool = vec![entry("far", fp(0.1, &[]), 5), entry("near", fp(0.9, &[]), 1)];
        let got = select_agent(&pool, &fp(0.8, &[]), "cat", Path::new("pool")).unwrap();
        assert_eq!(got.path, PathBuf::from("near"));
    }

    #[test]
    fn ties_go_to_most_recent() {
        let pool = vec![entry("old", fp(0.5, &[]), 1), entry("new", fp(0.5, &[]), 9)];
        let got = select_agent(&pool, &fp(0.5, &[]), "cat", Path::new("pool")).unwrap();
        assert_eq!(got.path, PathBuf::from("new"));
    }

    #[test]
    fn empty_or_foreign_pool_is_error() {
        let err = select_agent(&[], &fp(0.5, &[]), "cat", Path::new("pool")).unwrap_err();
        assert!(err.to_string().contains("train"));
        let pool = vec![entry("x", fp(0.5, &[]), 1)];
        assert!(select_agent(&pool, &fp(0.5, &[]), "other", Path::new("pool")).is_err());
    }
}
