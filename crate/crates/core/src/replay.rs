//! Hint-priority-aware prioritized replay.
//!
//! Experience priority combines the TD error, the actor's action-gradient
//! magnitude, a floor constant and (for demonstrations) the current priority
//! of the linked hint:
//!
//! ```text
//! p_i = δ² + λ1·|∇_a Q(s_i, a_i)|² + ε + λ2·prior_j
//! P(i) = p_i^α / Σ_m p_m^α
//! ```
//!
//! Demonstrations are stored apart from transitions and never evicted;
//! transitions are FIFO-evicted at `capacity`. Sampling is a linear scan,
//! with replacement.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hints::HintId;

pub const BUFFER_FORMAT: &str = "knobtune-replay/1";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("buffer is empty")]
    Empty,
    #[error("buffer holds {have} experiences, batch needs {need}")]
    TooSmall { have: usize, need: usize },
    #[error("n-step window is empty")]
    EmptyWindow,
    #[error("demonstration without a linked hint")]
    MissingHint,
    #[error("invalid buffer config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferConfig {
    /// Maximum number of transitions (demonstrations excluded).
    pub capacity: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_step: usize,
    pub gamma: f64,
    pub batch_size: usize,
    /// Standard importance-sampling correction; off by default.
    pub importance_sampling: bool,
    pub is_beta: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            capacity: 4096,
            alpha: 0.3,
            epsilon: 1e-3,
            lambda1: 0.05,
            lambda2: 1.0,
            n_step: 5,
            gamma: 0.99,
            batch_size: 32,
            importance_sampling: false,
            is_beta: 0.4,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.capacity < self.batch_size || self.batch_size == 0 {
            return bad("capacity must be >= batch_size > 0");
        }
        if self.n_step == 0 {
            return bad("n_step must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Experience priority. Transitions pass `hint_prior = None`, which drops
/// the hint term.
pub fn priority(td_error: f64, actor_grad_sq: f64, hint_prior: Option<f64>, cfg: &BufferConfig) -> f64 {
    td_error * td_error
        + cfg.lambda1 * actor_grad_sq
        + cfg.epsilon
        + cfg.lambda2 * hint_prior.unwrap_or(0.0)
}

/// `Σ_{i<n} γ^i r_i + γ^n · terminal_q`.
pub fn nstep_return(rewards: &[f64], gamma: f64, terminal_q: f64) -> Result<f64, ReplayError> {
    if rewards.is_empty() {
        return Err(ReplayError::EmptyWindow);
    }
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    Ok(total + discount * terminal_q)
}

/// Rewards following a transition within its episode, with the state to
/// bootstrap from after the last of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NStepWindow {
    pub rewards: Vec<f64>,
    pub bootstrap_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Present exactly for demonstrations.
    pub hint: Option<HintId>,
    pub window: Option<NStepWindow>,
    pub td_error: f64,
    pub actor_grad_sq: f64,
    pub priority: f64,
}

impl Experience {
    pub fn transition(state: Vec<f64>, action: Vec<f64>, reward: f64, next_state: Vec<f64>) -> Self {
        let window = NStepWindow {
            rewards: vec![reward],
            bootstrap_state: next_state.clone(),
        };
        Experience {
            state,
            action,
            reward,
            next_state,
            hint: None,
            window: Some(window),
            td_error: 0.0,
            actor_grad_sq: 0.0,
            priority: 0.0,
        }
    }

    pub fn demonstration(
        state: Vec<f64>,
        action: Vec<f64>,
        perf_imp: f64,
        next_state: Vec<f64>,
        hint: HintId,
    ) -> Self {
        Experience {
            state,
            action,
            reward: perf_imp,
            next_state,
            hint: Some(hint),
            window: None,
            td_error: 0.0,
            actor_grad_sq: 0.0,
            priority: 0.0,
        }
    }

    pub fn is_demonstration(&self) -> bool {
        self.hint.is_some()
    }
}

/// Stable handle to a stored experience. Transition ids stay valid until
/// the transition is evicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperienceId {
    Demo(usize),
    Transition(u64),
}

#[derive(Debug, Clone)]
pub struct SampledBatch<'a> {
    pub ids: Vec<ExperienceId>,
    pub experiences: Vec<&'a Experience>,
    /// Importance weights; all ones unless importance sampling is enabled.
    pub weights: Vec<f64>,
}

/// Fresh TD error and action-gradient magnitude for one sampled experience.
#[derive(Debug, Clone, Copy)]
pub struct PriorityUpdate {
    pub id: ExperienceId,
    pub td_error: f64,
    pub actor_grad_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    format: String,
    cfg: BufferConfig,
    demos: Vec<Experience>,
    transitions: VecDeque<Experience>,
    /// Sequence number of `transitions[0]`.
    first_seq: u64,
}

impl ReplayBuffer {
    pub fn new(cfg: BufferConfig) -> Result<Self, ReplayError> {
        cfg.validate()?;
        Ok(ReplayBuffer {
            format: BUFFER_FORMAT.to_string(),
            cfg,
            demos: Vec::new(),
            transitions: VecDeque::new(),
            first_seq: 0,
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.demos.len() + self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn demo_count(&self) -> usize {
        self.demos.len()
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.len()
    }

    fn max_priority(&self) -> f64 {
        self.iter()
            .map(|(_, e)| e.priority)
            .fold(self.cfg.epsilon, f64::max)
    }

    pub fn push_demonstration(&mut self, mut exp: Experience) -> Result<ExperienceId, ReplayError> {
        if exp.hint.is_none() {
            return Err(ReplayError::MissingHint);
        }
        exp.priority = self.max_priority();
        self.demos.push(exp);
        Ok(ExperienceId::Demo(self.demos.len() - 1))
    }

    pub fn push_transition(&mut self, mut exp: Experience) -> ExperienceId {
        exp.hint = None;
        exp.priority = self.max_priority();
        if self.transitions.len() == self.cfg.capacity {
            self.transitions.pop_front();
            self.first_seq += 1;
        }
        self.transitions.push_back(exp);
        ExperienceId::Transition(self.first_seq + self.transitions.len() as u64 - 1)
    }

    pub fn get(&self, id: ExperienceId) -> Option<&Experience> {
        match id {
            ExperienceId::Demo(i) => self.demos.get(i),
            ExperienceId::Transition(seq) => {
                let offset = seq.checked_sub(self.first_seq)?;
                self.transitions.get(offset as usize)
            }
        }
    }

    fn get_mut(&mut self, id: ExperienceId) -> Option<&mut Experience> {
        match id {
            ExperienceId::Demo(i) => self.demos.get_mut(i),
            ExperienceId::Transition(seq) => {
                let offset = seq.checked_sub(self.first_seq)?;
                self.transitions.get_mut(offset as usize)
            }
        }
    }

    /// Demonstrations first, then transitions oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = (ExperienceId, &Experience)> {
        let demos = self
            .demos
            .iter()
            .enumerate()
            .map(|(i, e)| (ExperienceId::Demo(i), e));
        let first = self.first_seq;
        let trans = self
            .transitions
            .iter()
            .enumerate()
            .map(move |(i, e)| (ExperienceId::Transition(first + i as u64), e));
        demos.chain(trans)
    }

    /// Appends the reward of a later step to a transition's n-step window,
    /// until the window holds `n_step` rewards. Evicted ids are ignored.
    pub fn extend_window(&mut self, id: ExperienceId, reward: f64, bootstrap_state: &[f64]) {
        let n = self.cfg.n_step;
        if let Some(exp) = self.get_mut(id) {
            if let Some(w) = exp.window.as_mut() {
                if w.rewards.len() < n {
                    w.rewards.push(reward);
                    w.bootstrap_state = bootstrap_state.to_vec();
                }
            }
        }
    }

    /// Sampling probabilities in [`iter`](Self::iter) order.
    pub fn probabilities(&self) -> Vec<f64> {
        let alpha = self.cfg.alpha;
        let powered: Vec<f64> = self.iter().map(|(_, e)| e.priority.powf(alpha)).collect();
        let total: f64 = powered.iter().sum();
        powered.into_iter().map(|p| p / total).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<SampledBatch<'_>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        if self.len() < batch {
            return Err(ReplayError::TooSmall {
                have: self.len(),
                need: batch,
            });
        }
        let entries: Vec<(ExperienceId, &Experience)> = self.iter().collect();
        let alpha = self.cfg.alpha;
        let powered: Vec<f64> = entries.iter().map(|(_, e)| e.priority.powf(alpha)).collect();
        let total: f64 = powered.iter().sum();

        let mut ids = Vec::with_capacity(batch);
        let mut experiences = Vec::with_capacity(batch);
        let mut probs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = entries.len() - 1;
            for (i, p) in powered.iter().enumerate() {
                if u < *p {
                    chosen = i;
                    break;
                }
                u -= p;
            }
            ids.push(entries[chosen].0);
            experiences.push(entries[chosen].1);
            probs.push(powered[chosen] / total);
        }

        let weights = if self.cfg.importance_sampling {
            let n = entries.len() as f64;
            let raw: Vec<f64> = probs.iter().map(|p| (n * p).powf(-self.cfg.is_beta)).collect();
            let max = raw.iter().cloned().fold(f64::MIN, f64::max);
            raw.into_iter().map(|w| w / max).collect()
        } else {
            vec![1.0; batch]
        };
        Ok(SampledBatch {
            ids,
            experiences,
            weights,
        })
    }

    /// Recomputes priorities for sampled experiences from fresh TD errors and
    /// action gradients. Demonstrations read their hint's current priority
    /// through `hint_prior`. Evicted ids are skipped.
    pub fn update_priorities(&mut self, updates: &[PriorityUpdate], hint_prior: impl Fn(HintId) -> f64) {
        let cfg = self.cfg.clone();
        for u in updates {
            if let Some(exp) = self.get_mut(u.id) {
                exp.td_error = u.td_error;
                exp.actor_grad_sq = u.actor_grad_sq;
                let prior = exp.hint.map(&hint_prior);
                exp.priority = priority(exp.td_error, exp.actor_grad_sq, prior, &cfg);
            }
        }
    }

    /// Recomputes every demonstration's priority from its stored TD error and
    /// action gradient and the hint's current priority.
    pub fn refresh_demonstrations(&mut self, hint_prior: impl Fn(HintId) -> f64) {
        let cfg = self.cfg.clone();
        for exp in &mut self.demos {
            let prior = exp.hint.map(&hint_prior);
            exp.priority = priority(exp.td_error, exp.actor_grad_sq, prior, &cfg);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("buffer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ReplayError> {
        let buf: ReplayBuffer =
            serde_json::from_str(text).map_err(|e| ReplayError::Checkpoint(e.to_string()))?;
        if buf.format != BUFFER_FORMAT {
            return Err(ReplayError::Checkpoint(format!("unsupported format `{}`", buf.format)));
        }
        buf.cfg.validate()?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        std::fs::write(path, self.to_json()).map_err(|e| ReplayError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReplayError::Checkpoint(e.to_string()))?;
        Self::from_json(&text)
    }

    /// Overwrites stored priorities, in [`iter`](Self::iter) order. Test and
    /// diagnostics helper.
    pub fn set_priorities(&mut self, priorities: &[f64]) {
        let demos = self.demos.len();
        for (i, p) in priorities.iter().enumerate() {
            if i < demos {
                self.demos[i].priority = *p;
            } else if let Some(t) = self.transitions.get_mut(i - demos) {
                t.priority = *p;
            }
        }
    }
}
