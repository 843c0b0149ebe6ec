//! Training loop: hint-driven demonstrations, pre-training on them, then
//! fine-tuning with hint-adjusted actions and violation-shaped rewards.
//!
//! One [`Session`] owns the agent, replay buffer, hint list and generator.
//! Evaluations are counted against the budget `|demonstrations| + M·T`; the
//! default-configuration baseline is measured once and not counted.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentError, CriticSample};
use crate::catalog::{Catalog, CatalogError, KnobConfig, KnobKind};
use crate::env::{EnvError, Environment, Evaluation, WorkloadMix};
use crate::hints::{
    init_priority, match_hints, resolve_target, select_hint, update_priority, ConditionSet,
    HintError, HintId, MachineProfile, RecAction, TuningHint,
};
use crate::replay::{nstep_return, BufferConfig, Experience, ExperienceId, PriorityUpdate, ReplayBuffer, ReplayError};

pub const CHECKPOINT_FORMAT: &str = "knobtune-train/1";

/// Tolerance for violation checks on normalized actions.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Hint(#[from] HintError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("baseline performance must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fine-tuning episodes `M`.
    pub episodes: usize,
    /// Steps per episode `T`.
    pub steps_per_episode: usize,
    pub pretrain_steps: usize,
    /// Gradient steps after each episode; `T` when unset.
    pub grad_steps_per_episode: Option<usize>,
    /// Adjustment coefficient for implicit hints.
    pub k: f64,
    /// Number of logarithmic intervals for implicit hints.
    pub z: u32,
    /// Reward shaping coefficient.
    pub beta: f64,
    /// Hints at or below this priority are ignored by reward shaping.
    pub tau: f64,
    /// Probability of applying a matched hint to a fine-tuning action.
    pub hint_adjust_prob: f64,
    pub use_demonstrations: bool,
    pub seed: u64,
    pub agent: AgentConfig,
    pub replay: BufferConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 20,
            steps_per_episode: 10,
            pretrain_steps: 500,
            grad_steps_per_episode: None,
            k: 0.1,
            z: 10,
            beta: 0.2,
            tau: 0.1,
            hint_adjust_prob: 1.0,
            use_demonstrations: true,
            seed: 0,
            agent: AgentConfig::default(),
            replay: BufferConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return bad("episodes and steps_per_episode must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if self.z == 0 {
            return bad("z must be >= 1");
        }
        if !(self.k > 0.0) {
            return bad("k must be positive");
        }
        if !(0.0..=1.0).contains(&self.hint_adjust_prob) {
            return bad("hint_adjust_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        self.replay.validate()?;
        Ok(())
    }

    pub fn finetune_budget(&self) -> usize {
        self.episodes * self.steps_per_episode
    }

    pub fn grad_steps(&self) -> usize {
        self.grad_steps_per_episode.unwrap_or(self.steps_per_episode)
    }
}

/// Applies one hint to one knob of `config`.
///
/// Explicit hints set the resolved value. Implicit hints move the knob by
/// `k·(e^{(n+1)C} − e^{nC})` with `C = ln(max − min)/z` and `n` the
/// logarithmic interval holding `current − min`. Enumerations and booleans
/// step one index; integer knobs move at least one unit.
pub fn adjust_knob(
    hint: &TuningHint,
    config: &KnobConfig,
    catalog: &Catalog,
    k: f64,
    z: u32,
    profile: &MachineProfile,
) -> Result<KnobConfig, TrainError> {
    let spec = catalog
        .spec(&hint.knob)
        .ok_or_else(|| CatalogError::UnknownKnob(hint.knob.clone()))?;
    let current = config.get(&hint.knob).unwrap_or(spec.default);
    let sign = match hint.action {
        RecAction::SetExplicit { .. } => {
            let target = resolve_target(spec, &hint.action, profile)?.expect("explicit");
            let mut out = config.clone();
            out.set(&spec.name, target);
            return Ok(out);
        }
        RecAction::Increase => 1.0,
        RecAction::Decrease => -1.0,
    };
    let next = match spec.kind {
        KnobKind::Boolean | KnobKind::Enumeration => current + sign,
        KnobKind::Integer | KnobKind::Real => {
            let delta = implicit_step(spec.range(), current - spec.min, k, z);
            let delta = if spec.kind == KnobKind::Integer { delta.max(1.0) } else { delta };
            current + sign * delta
        }
    };
    let mut out = config.clone();
    out.set(&spec.name, spec.snap(next));
    Ok(out)
}

/// Step size for an implicit adjustment at `offset = current − min`.
pub fn implicit_step(range: f64, offset: f64, k: f64, z: u32) -> f64 {
    if range <= 1.0 {
        // ln(range) ≤ 0 has no logarithmic intervals
        return k * range;
    }
    let c = range.ln() / z as f64;
    let n = if offset < 1.0 {
        0.0
    } else {
        (offset.ln() / c).floor().clamp(0.0, (z - 1) as f64)
    };
    k * (((n + 1.0) * c).exp() - (n * c).exp())
}

/// Relative improvement over the baseline.
pub fn reward(perf_t: f64, perf_0: f64) -> Result<f64, TrainError> {
    if !(perf_0 > 0.0) {
        return Err(TrainError::NonPositiveBaseline(perf_0));
    }
    Ok((perf_t - perf_0) / perf_0)
}

/// Number of matched hints with priority above `tau` whose recommendation
/// the move `a_prev → a_t` goes against.
pub fn count_violations(
    a_t: &[f64],
    a_prev: &[f64],
    hints: &[TuningHint],
    matched: &[HintId],
    tau: f64,
    catalog: &Catalog,
    profile: &MachineProfile,
) -> usize {
    let mut count = 0;
    for id in matched {
        let hint = &hints[id.0];
        if hint.priority <= tau {
            continue;
        }
        let Some(i) = catalog.index_of(&hint.knob) else { continue };
        let (now, before) = (a_t[i], a_prev[i]);
        let violated = match &hint.action {
            RecAction::Increase => now < before - VIOLATION_TOL,
            RecAction::Decrease => now > before + VIOLATION_TOL,
            RecAction::SetExplicit { .. } => {
                let spec = &catalog.knobs()[i];
                let rec = resolve_target(spec, &hint.action, profile)
                    .ok()
                    .flatten()
                    .and_then(|raw| spec.normalize(raw).ok());
                match rec {
                    Some(rec) => (now - rec).abs() > (before - rec).abs() + VIOLATION_TOL,
                    None => false,
                }
            }
        };
        if violated {
            count += 1;
        }
    }
    count
}

/// `(1 − β·violations/matched)·r`; no shaping when nothing matched.
pub fn shaped_reward(r: f64, violations: usize, matched_count: usize, beta: f64) -> f64 {
    if matched_count == 0 {
        return r;
    }
    let f = beta * violations as f64 / matched_count as f64;
    if r < 0.0 && f > 0.0 {
        log::debug!("shaping a negative reward {r} by factor {f} reduces its magnitude");
    }
    (1.0 - f) * r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Demonstration,
    Finetune,
    Online,
}

/// One budgeted evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index among budgeted evaluations.
    pub evaluation: usize,
    pub phase: Phase,
    pub episode: Option<usize>,
    pub step: Option<usize>,
    pub perf: Option<f64>,
    pub reward: Option<f64>,
    pub shaped_reward: Option<f64>,
    pub matched: usize,
    pub violations: usize,
    pub selected_hint: Option<usize>,
    pub priorities: Vec<f64>,
    pub best_perf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub config: KnobConfig,
    pub perf: f64,
    /// 0 for the baseline.
    pub evaluation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss_ema: f64,
}

/// Workload characteristics an agent was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadFingerprint {
    pub mix: WorkloadMix,
    pub tags: ConditionSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage", content = "next_episode")]
pub enum Stage {
    Demonstrations,
    Pretrain,
    Finetune(usize),
    Done,
}

/// Deterministic outcome of a run. Wall-clock time is reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub perf_0: f64,
    pub evaluations: usize,
    pub failures: usize,
    pub demonstrations: usize,
    pub best: Best,
    pub best_gain: f64,
    pub pretrain: Option<PretrainStats>,
    pub final_priorities: Vec<f64>,
    pub final_noise_scale: f64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    format: String,
    pub cfg: TrainConfig,
    pub profile: MachineProfile,
    pub catalog_fingerprint: String,
    pub workload: WorkloadFingerprint,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub hints: Vec<TuningHint>,
    rng: ChaCha8Rng,
    pub stage: Stage,
    pub perf_0: f64,
    s_def: Vec<f64>,
    conditions_def: ConditionSet,
    a_def: Vec<f64>,
    pub evaluations: usize,
    pub failures: usize,
    pub best: Best,
    pub pretrain: Option<PretrainStats>,
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    started: Option<Instant>,
}

struct OwnedSample {
    id: ExperienceId,
    state: Vec<f64>,
    action: Vec<f64>,
    target_1: f64,
    target_n: Option<f64>,
    weight: f64,
}

impl Session {
    /// Measures the default configuration and builds a fresh agent and
    /// buffer. Hints whose knob is not in the catalog are marked
    /// non-actionable.
    pub fn start(
        env: &mut dyn Environment,
        mut hints: Vec<TuningHint>,
        cfg: TrainConfig,
        profile: MachineProfile,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let started = Instant::now();
        let catalog = env.catalog().clone();
        for h in &mut hints {
            if catalog.index_of(&h.knob).is_none() {
                h.actionable = false;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let agent_seed = rng.next_u64();
        let agent = Agent::new(env.schema().len(), catalog.len(), cfg.agent.clone(), agent_seed);
        let buffer = ReplayBuffer::new(cfg.replay.clone())?;
        let default = catalog.default_config();
        let eval = env.evaluate(&default, eval_seed(cfg.seed, 0))?;
        if !(eval.perf > 0.0) {
            return Err(TrainError::NonPositiveBaseline(eval.perf));
        }
        let conditions_def = env.classify(&eval.metrics);
        let s_def = env.state_vector(&eval.metrics);
        let a_def = catalog.to_action(&default)?;
        Ok(Session {
            format: CHECKPOINT_FORMAT.to_string(),
            catalog_fingerprint: catalog.fingerprint(),
            workload: WorkloadFingerprint {
                mix: env.workload().clone(),
                tags: conditions_def.clone(),
            },
            agent,
            buffer,
            hints,
            rng,
            stage: Stage::Demonstrations,
            perf_0: eval.perf,
            s_def,
            conditions_def,
            a_def,
            evaluations: 0,
            failures: 0,
            best: Best {
                config: default,
                perf: eval.perf,
                evaluation: 0,
            },
            pretrain: None,
            records: Vec::new(),
            cfg,
            profile,
            started: Some(started),
        })
    }

    /// Runs every remaining stage.
    pub fn run(&mut self, env: &mut dyn Environment) -> Result<(), TrainError> {
        loop {
            match self.stage {
                Stage::Demonstrations => {
                    self.collect_demonstrations(env)?;
                }
                Stage::Pretrain => {
                    self.pretrain()?;
                }
                Stage::Finetune(_) => self.run_episode(env)?,
                Stage::Done => return Ok(()),
            }
        }
    }

    fn usable(&self, matched: Vec<HintId>) -> Vec<HintId> {
        matched.into_iter().filter(|id| self.hints[id.0].actionable).collect()
    }

    fn priorities(&self) -> Vec<f64> {
        self.hints.iter().map(|h| h.priority).collect()
    }

    fn evaluate(&mut self, env: &mut dyn Environment, config: &KnobConfig) -> Result<Evaluation, EnvError> {
        self.evaluations += 1;
        let result = env.evaluate(config, eval_seed(self.cfg.seed, self.evaluations));
        match &result {
            Ok(eval) if eval.perf > 0.0 && eval.perf.is_finite() => {
                if eval.perf > self.best.perf {
                    self.best = Best {
                        config: config.clone(),
                        perf: eval.perf,
                        evaluation: self.evaluations,
                    };
                }
            }
            Ok(eval) => {
                self.failures += 1;
                return Err(EnvError::NonPositivePerf(eval.perf));
            }
            Err(_) => self.failures += 1,
        }
        result
    }

    /// Applies each hint matched under the default conditions to the
    /// default configuration once, in random order, and stores the outcome
    /// as a demonstration. Returns the number stored.
    pub fn collect_demonstrations(&mut self, env: &mut dyn Environment) -> Result<usize, TrainError> {
        if self.stage != Stage::Demonstrations {
            return Ok(0);
        }
        let mut stored = 0;
        if self.cfg.use_demonstrations {
            let mut order = self.usable(match_hints(&self.hints, &self.conditions_def));
            order.shuffle(&mut self.rng);
            let catalog = env.catalog().clone();
            let default = catalog.default_config();
            for id in order {
                let hint = self.hints[id.0].clone();
                self.hints[id.0].used_in_pretrain = true;
                let adjusted = adjust_knob(&hint, &default, &catalog, self.cfg.k, self.cfg.z, &self.profile)?;
                let outcome = self.evaluate(env, &adjusted);
                let mut record = self.blank_record(Phase::Demonstration);
                record.selected_hint = Some(id.0);
                record.matched = 1;
                match outcome {
                    Ok(eval) => {
                        let perf_imp = reward(eval.perf, self.perf_0)?;
                        self.hints[id.0].priority = init_priority(perf_imp);
                        let exp = Experience::demonstration(
                            self.s_def.clone(),
                            catalog.to_action(&adjusted)?,
                            perf_imp,
                            env.state_vector(&eval.metrics),
                            id,
                        );
                        self.buffer.push_demonstration(exp)?;
                        stored += 1;
                        record.perf = Some(eval.perf);
                        record.reward = Some(perf_imp);
                        record.shaped_reward = Some(perf_imp);
                    }
                    Err(e) => {
                        log::warn!("demonstration for hint {} skipped: {e}", id.0);
                        self.hints[id.0].priority = 0.0;
                        record.error = Some(e.to_string());
                    }
                }
                record.priorities = self.priorities();
                record.best_perf = self.best.perf;
                self.records.push(record);
            }
        }
        let hints = &self.hints;
        self.buffer.refresh_demonstrations(|id| hints[id.0].priority);
        self.stage = Stage::Pretrain;
        Ok(stored)
    }

    /// Gradient steps on the demonstrations alone, with `y1 = r`.
    pub fn pretrain(&mut self) -> Result<Option<PretrainStats>, TrainError> {
        if self.stage != Stage::Pretrain {
            return Ok(self.pretrain.clone());
        }
        self.stage = Stage::Finetune(0);
        if self.buffer.is_empty() {
            if self.cfg.use_demonstrations {
                log::warn!("no demonstrations; skipping pre-training");
            }
            return Ok(None);
        }
        let mut initial = None;
        let mut ema = 0.0;
        for _ in 0..self.cfg.pretrain_steps {
            let loss = self.gradient_step()?;
            match initial {
                None => {
                    initial = Some(loss);
                    ema = loss;
                }
                Some(_) => ema = 0.95 * ema + 0.05 * loss,
            }
        }
        let stats = initial.map(|initial_loss| PretrainStats {
            steps: self.cfg.pretrain_steps,
            initial_loss,
            final_loss_ema: ema,
        });
        self.pretrain = stats.clone();
        Ok(stats)
    }

    /// One sampled minibatch update of critic, actor and targets, followed
    /// by priority refresh. Returns the unregularized 1-step critic loss.
    fn gradient_step(&mut self) -> Result<f64, TrainError> {
        let gamma = self.buffer.config().gamma;
        let size = self.buffer.config().batch_size.min(self.buffer.len());
        let owned: Vec<OwnedSample> = {
            let batch = self.buffer.sample(size, &mut self.rng)?;
            let mut owned = Vec::with_capacity(size);
            for ((id, exp), w) in batch.ids.iter().zip(&batch.experiences).zip(&batch.weights) {
                let (target_1, target_n) = if exp.is_demonstration() {
                    (exp.reward, None)
                } else {
                    let y1 = exp.reward + gamma * self.agent.target_value(&exp.next_state)?;
                    let rn = match &exp.window {
                        Some(win) => {
                            Some(nstep_return(&win.rewards, gamma, self.agent.target_value(&win.bootstrap_state)?)?)
                        }
                        None => None,
                    };
                    (y1, rn)
                };
                owned.push(OwnedSample {
                    id: *id,
                    state: exp.state.clone(),
                    action: exp.action.clone(),
                    target_1,
                    target_n,
                    weight: *w,
                });
            }
            owned
        };
        let samples: Vec<CriticSample<'_>> = owned
            .iter()
            .map(|o| CriticSample {
                state: &o.state,
                action: &o.action,
                target_1: o.target_1,
                target_n: o.target_n,
                weight: o.weight,
            })
            .collect();
        let critic = self.agent.critic_loss(&samples)?;
        self.agent.apply_critic(&critic.grads);
        let states: Vec<&[f64]> = owned.iter().map(|o| o.state.as_slice()).collect();
        let actions: Vec<&[f64]> = owned.iter().map(|o| o.action.as_slice()).collect();
        let actor = self.agent.actor_loss(&states, &actions)?;
        self.agent.apply_actor(&actor.grads);
        self.agent.soft_update_targets();
        let updates: Vec<PriorityUpdate> = owned
            .iter()
            .zip(critic.td_errors.iter().zip(&actor.action_grad_sq))
            .map(|(o, (td, g))| PriorityUpdate {
                id: o.id,
                td_error: *td,
                actor_grad_sq: *g,
            })
            .collect();
        let hints = &self.hints;
        self.buffer.update_priorities(&updates, |id| hints[id.0].priority);
        Ok(critic.loss_1)
    }

    fn blank_record(&self, phase: Phase) -> StepRecord {
        StepRecord {
            evaluation: self.evaluations,
            phase,
            episode: None,
            step: None,
            perf: None,
            reward: None,
            shaped_reward: None,
            matched: 0,
            violations: 0,
            selected_hint: None,
            priorities: Vec::new(),
            best_perf: self.best.perf,
            error: None,
        }
    }

    /// Runs all remaining fine-tuning episodes.
    pub fn finetune(&mut self, env: &mut dyn Environment) -> Result<(), TrainError> {
        while let Stage::Finetune(_) = self.stage {
            self.run_episode(env)?;
        }
        Ok(())
    }

    /// One fine-tuning episode of `T` steps from the default state, then the
    /// episode's gradient steps.
    pub fn run_episode(&mut self, env: &mut dyn Environment) -> Result<(), TrainError> {
        let Stage::Finetune(episode) = self.stage else {
            return Ok(());
        };
        let catalog = env.catalog().clone();
        let n_step = self.buffer.config().n_step;
        let mut state = self.s_def.clone();
        let mut conditions = self.conditions_def.clone();
        let mut a_prev = self.a_def.clone();
        let mut recent: VecDeque<ExperienceId> = VecDeque::new();

        for step in 0..self.cfg.steps_per_episode {
            let matched = self.usable(match_hints(&self.hints, &conditions));
            let mut action = self.agent.explore(&state, &mut self.rng)?;
            let mut config = catalog.from_action(&action)?;
            let mut selected = None;
            if !matched.is_empty() && self.draw_adjust() {
                let id = select_hint(&self.hints, &matched, &mut self.rng)?;
                config = adjust_knob(&self.hints[id.0], &config, &catalog, self.cfg.k, self.cfg.z, &self.profile)?;
                action = catalog.to_action(&config)?;
                selected = Some(id);
            }
            let violations = count_violations(
                &action,
                &a_prev,
                &self.hints,
                &matched,
                self.cfg.tau,
                &catalog,
                &self.profile,
            );
            let outcome = self.evaluate(env, &config);
            let mut record = self.blank_record(Phase::Finetune);
            record.episode = Some(episode);
            record.step = Some(step);
            record.matched = matched.len();
            record.violations = violations;
            record.selected_hint = selected.map(|id| id.0);
            match outcome {
                Ok(eval) => {
                    let r = reward(eval.perf, self.perf_0)?;
                    if let Some(id) = selected {
                        let h = &mut self.hints[id.0];
                        h.priority = update_priority(h.priority, eval.perf, self.perf_0)?;
                    }
                    let shaped = shaped_reward(r, violations, matched.len(), self.cfg.beta);
                    let next_state = env.state_vector(&eval.metrics);
                    for id in &recent {
                        self.buffer.extend_window(*id, shaped, &next_state);
                    }
                    let id = self.buffer.push_transition(Experience::transition(
                        state,
                        action.clone(),
                        shaped,
                        next_state.clone(),
                    ));
                    recent.push_back(id);
                    if recent.len() >= n_step {
                        recent.pop_front();
                    }
                    state = next_state;
                    conditions = env.classify(&eval.metrics);
                    a_prev = action;
                    record.perf = Some(eval.perf);
                    record.reward = Some(r);
                    record.shaped_reward = Some(shaped);
                }
                Err(e) => {
                    log::warn!("evaluation failed in episode {episode} step {step}: {e}");
                    record.error = Some(e.to_string());
                }
            }
            record.priorities = self.priorities();
            record.best_perf = self.best.perf;
            self.records.push(record);
        }

        if !self.buffer.is_empty() {
            for _ in 0..self.cfg.grad_steps() {
                self.gradient_step()?;
            }
        }
        let hints = &self.hints;
        self.buffer.refresh_demonstrations(|id| hints[id.0].priority);
        self.agent.decay_noise();
        self.stage = if episode + 1 >= self.cfg.episodes {
            Stage::Done
        } else {
            Stage::Finetune(episode + 1)
        };
        Ok(())
    }

    /// Stores an online transition and takes one gradient step.
    pub fn online_update(&mut self, exp: Experience) -> Result<(), TrainError> {
        self.buffer.push_transition(exp);
        self.gradient_step()?;
        Ok(())
    }

    fn draw_adjust(&mut self) -> bool {
        let p = self.cfg.hint_adjust_prob;
        if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            self.rng.random::<f64>() < p
        }
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            perf_0: self.perf_0,
            evaluations: self.evaluations,
            failures: self.failures,
            demonstrations: self.buffer.demo_count(),
            best: self.best.clone(),
            best_gain: (self.best.perf - self.perf_0) / self.perf_0,
            pretrain: self.pretrain.clone(),
            final_priorities: self.priorities(),
            final_noise_scale: self.agent.noise_scale(),
            config: self.cfg.clone(),
        }
    }

    /// Seconds since [`start`](Self::start) in this process, if known.
    pub fn wall_clock_secs(&self) -> Option<f64> {
        self.started.map(|t| t.elapsed().as_secs_f64())
    }

    /// Writes one JSON record per evaluation to `log` and the summary to
    /// `summary`.
    pub fn write_report(&self, log: &Path, summary: &Path) -> Result<(), TrainError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(log)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let text = serde_json::to_string_pretty(&self.summary()).map_err(std::io::Error::from)?;
        std::fs::write(summary, text + "\n")?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("session serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Reloads a checkpoint; `catalog` must match the one it was trained on.
    pub fn load(path: &Path, catalog: &Catalog) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let session: Session =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if session.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unsupported format `{}`", session.format)));
        }
        if session.catalog_fingerprint != catalog.fingerprint() {
            return Err(AgentError::CatalogMismatch {
                expected: catalog.fingerprint(),
                found: session.catalog_fingerprint,
            }
            .into());
        }
        Ok(session)
    }
}

/// Seed for the `index`-th evaluation of a run.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::KnobSpec;
    use crate::hints::{ConditionTag, ConditionVector};

    fn cat(spec: KnobSpec) -> Catalog {
        Catalog::new("mysql", vec![spec]).unwrap()
    }

    fn hint(knob: &str, action: RecAction) -> TuningHint {
        TuningHint::new(knob, action, ConditionVector::unconditional())
    }

    fn adjust(spec: KnobSpec, action: RecAction, current: f64, k: f64, z: u32) -> f64 {
        let name = spec.name.clone();
        let catalog = cat(spec);
        let mut config = catalog.default_config();
        config.set(&name, current);
        let out = adjust_knob(&hint(&name, action), &config, &catalog, k, z, &MachineProfile::default()).unwrap();
        out.get(&name).unwrap()
    }

    #[test]
    fn implicit_increase_log_interval() {
        // range 22026, z = 5: C = ln(22026)/5 ≈ 2, current 100 in [e⁴, e⁶)
        let spec = KnobSpec::real("x", 0.0, 22026.0, 0.0);
        let got = adjust(spec, RecAction::Increase, 100.0, 0.1, 5);
        let c = 22026f64.ln() / 5.0;
        let expected = 100.0 + 0.1 * ((3.0 * c).exp() - (2.0 * c).exp());
        assert!((got - expected).abs() < 1e-9 * expected);
        assert!((got - 134.88).abs() < 0.01);
    }

    #[test]
    fn implicit_decrease_at_min_is_noop() {
        let spec = KnobSpec::integer("x", 8.0, 4096.0, 8.0);
        assert_eq!(adjust(spec, RecAction::Decrease, 8.0, 0.1, 10), 8.0);
    }

    #[test]
    fn integer_knob_moves_at_least_one_unit() {
        let spec = KnobSpec::integer("x", 1.0, 64.0, 4.0);
        assert_eq!(adjust(spec, RecAction::Increase, 4.0, 0.1, 10), 5.0);
    }

    #[test]
    fn explicit_size_hint() {
        let spec = KnobSpec::integer("innodb_log_file_size", 1048576.0, 68719476736.0, 50331648.0)
            .with_unit("B");
        let got = adjust(spec, RecAction::explicit(4.0, "GB"), 50331648.0, 0.1, 10);
        assert_eq!(got, 4.0 * 1024f64.powi(3));
    }

    #[test]
    fn adjust_changes_exactly_one_knob() {
        let catalog = Catalog::new(
            "mysql",
            vec![
                KnobSpec::integer("a", 0.0, 1000.0, 100.0),
                KnobSpec::real("b", 0.0, 1.0, 0.5),
            ],
        )
        .unwrap();
        let config = catalog.default_config();
        let out = adjust_knob(&hint("b", RecAction::Increase), &config, &catalog, 0.1, 10, &MachineProfile::default())
            .unwrap();
        assert_eq!(out.get("a"), config.get("a"));
        assert!((out.get("b").unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn reward_examples() {
        assert!((reward(130.0, 100.0).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(reward(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(reward(50.0, 100.0).unwrap(), -0.5);
        assert!(reward(50.0, 0.0).is_err());
    }

    #[test]
    fn shaped_reward_examples() {
        assert!((shaped_reward(0.5, 2, 4, 0.2) - 0.45).abs() < 1e-12);
        assert_eq!(shaped_reward(0.7, 0, 4, 0.2), 0.7);
        assert!((shaped_reward(1.0, 3, 3, 0.2) - 0.8).abs() < 1e-12);
        assert_eq!(shaped_reward(0.7, 0, 0, 0.2), 0.7);
    }

    #[test]
    fn violation_examples() {
        let catalog = cat(KnobSpec::real("x", 0.0, 1.0, 0.5));
        let p = MachineProfile::default();
        let hints = vec![hint("x", RecAction::Increase).with_priority(0.5)];
        let ids = [HintId(0)];
        assert_eq!(count_violations(&[0.1], &[0.2], &hints, &ids, 0.1, &catalog, &p), 1);
        assert_eq!(count_violations(&[0.1], &[0.1], &hints, &ids, 0.1, &catalog, &p), 0);
        let weak = vec![hint("x", RecAction::Increase).with_priority(0.05)];
        assert_eq!(count_violations(&[0.1], &[0.2], &weak, &ids, 0.1, &catalog, &p), 0);
        // explicit 0.75 raw → 0.5 normalized
        let exp = vec![hint("x", RecAction::explicit(0.75, "")).with_priority(0.5)];
        assert_eq!(count_violations(&[0.0], &[0.4], &exp, &ids, 0.1, &catalog, &p), 1);
        assert_eq!(count_violations(&[0.45], &[0.4], &exp, &ids, 0.1, &catalog, &p), 0);
    }

    #[test]
    fn config_parse_and_validate() {
        let cfg = TrainConfig::parse("episodes = 5\nbeta = 0.0\n[agent]\nactor_lr = 0.01\n").unwrap();
        assert_eq!(cfg.episodes, 5);
        assert_eq!(cfg.agent.actor_lr, 0.01);
        assert_eq!(cfg.agent.critic_lr, 1e-3);
        assert!(TrainConfig::parse("beta = 1.5").is_err());
        assert!(TrainConfig::parse("z = 0").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn fingerprint_tags_serialize() {
        let fp = WorkloadFingerprint {
            mix: WorkloadMix::new(0.5, 0.5, 0.0, 0.0).unwrap(),
            tags: [ConditionTag::Mixed].into_iter().collect(),
        };
        let text = serde_json::to_string(&fp).unwrap();
        assert!(text.contains("mixed"));
    }
}
