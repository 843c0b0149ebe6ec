//! DDPG actor/critic with target networks.
//!
//! Critic loss: `L = L1 + β1·Ln + β2·½‖W_Q‖²` with `L1 = ½(y1 − Q(s,a))²` and
//! `Ln = ½(Rn − Q(s,a))²`, averaged over the batch.
//! Actor loss: `−mean Q(s, π(s)) + β2·½‖W_π‖²`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, Adam, Mlp};

pub const AGENT_FORMAT: &str = "knobtune-agent/1";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite {what} ({detail})")]
    NonFinite { what: &'static str, detail: String },
    #[error("checkpoint catalog fingerprint {found} does not match {expected}")]
    CatalogMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Soft target update rate.
    pub tau: f64,
    /// Weight of the n-step critic loss.
    pub beta1: f64,
    /// Weight of the L2 regularization terms.
    pub beta2: f64,
    /// Initial exploration noise scale.
    pub noise_sigma: f64,
    /// Per-episode multiplicative decay of the noise scale.
    pub noise_decay: f64,
    pub final_layer_init: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            tau: 0.005,
            beta1: 0.5,
            beta2: 1e-5,
            noise_sigma: 0.2,
            noise_decay: 0.99,
            final_layer_init: 3e-3,
        }
    }
}

/// One critic training example.
#[derive(Debug, Clone)]
pub struct CriticSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub target_1: f64,
    /// n-step return, when the experience carries a window.
    pub target_n: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct CriticStep {
    pub loss: f64,
    /// Unregularized 1-step component, batch mean.
    pub loss_1: f64,
    pub grads: Vec<f64>,
    /// `y1 − Q(s, a)` per sample.
    pub td_errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ActorStep {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// `|∇_a Q(s, a)|²` at each sample's stored action.
    pub action_grad_sq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    format: String,
    pub cfg: AgentConfig,
    state_dim: usize,
    action_dim: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    noise_scale: f64,
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<(), AgentError> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(AgentError::NonFinite {
            what,
            detail: format!("index {i} = {}", values[i]),
        });
    }
    Ok(())
}

impl Agent {
    pub fn new(state_dim: usize, action_dim: usize, cfg: AgentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(action_dim);
        let mut critic_sizes = vec![state_dim + action_dim];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let actor = Mlp::init(&actor_sizes, Activation::Tanh, cfg.final_layer_init, &mut rng);
        let critic = Mlp::init(&critic_sizes, Activation::Identity, cfg.final_layer_init, &mut rng);
        Self::from_networks(actor, critic, cfg)
    }

    /// Builds an agent around given networks; targets start as copies.
    pub fn from_networks(actor: Mlp, critic: Mlp, cfg: AgentConfig) -> Self {
        let state_dim = actor.input_dim();
        let action_dim = actor.output_dim();
        assert_eq!(critic.input_dim(), state_dim + action_dim, "critic input = state ‖ action");
        assert_eq!(critic.output_dim(), 1, "critic is scalar");
        Agent {
            format: AGENT_FORMAT.to_string(),
            state_dim,
            action_dim,
            actor_opt: Adam::new(cfg.actor_lr, actor.params().len()),
            critic_opt: Adam::new(cfg.critic_lr, critic.params().len()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            noise_scale: cfg.noise_sigma,
            cfg,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    fn check_state(&self, s: &[f64]) -> Result<(), AgentError> {
        if s.len() != self.state_dim {
            return Err(AgentError::Dimension {
                expected: self.state_dim,
                got: s.len(),
            });
        }
        Ok(())
    }

    fn check_action(&self, a: &[f64]) -> Result<(), AgentError> {
        if a.len() != self.action_dim {
            return Err(AgentError::Dimension {
                expected: self.action_dim,
                got: a.len(),
            });
        }
        Ok(())
    }

    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>, AgentError> {
        self.check_state(s)?;
        Ok(self.actor.forward(s))
    }

    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64, AgentError> {
        self.check_state(s)?;
        self.check_action(a)?;
        Ok(self.critic.forward(&concat(s, a))[0])
    }

    /// `Q′(s, π′(s))` from the target networks.
    pub fn target_value(&self, s: &[f64]) -> Result<f64, AgentError> {
        self.check_state(s)?;
        let a = self.actor_target.forward(s);
        Ok(self.critic_target.forward(&concat(s, &a))[0])
    }

    /// Policy output plus Gaussian noise with the given scale, clamped to
    /// `[-1, 1]`.
    pub fn explore_with<R: Rng + ?Sized>(&self, s: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>, AgentError> {
        let mut a = self.act(s)?;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma > 0");
            for v in &mut a {
                *v = (*v + normal.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    pub fn explore<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<Vec<f64>, AgentError> {
        self.explore_with(s, self.noise_scale, rng)
    }

    pub fn decay_noise(&mut self) {
        self.noise_scale *= self.cfg.noise_decay;
    }

    pub fn critic_loss(&self, batch: &[CriticSample<'_>]) -> Result<CriticStep, AgentError> {
        let n = batch.len().max(1) as f64;
        let beta1 = self.cfg.beta1;
        let mut grads = vec![0.0; self.critic.params().len()];
        let mut td_errors = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        let mut loss_1 = 0.0;
        for sample in batch {
            self.check_state(sample.state)?;
            self.check_action(sample.action)?;
            let trace = self.critic.forward_trace(&concat(sample.state, sample.action));
            let q = trace.output()[0];
            let e1 = sample.target_1 - q;
            let mut l = 0.5 * e1 * e1;
            let mut dq = -e1;
            loss_1 += sample.weight * 0.5 * e1 * e1 / n;
            if let Some(rn) = sample.target_n {
                let en = rn - q;
                l += beta1 * 0.5 * en * en;
                dq -= beta1 * en;
            }
            loss += sample.weight * l / n;
            self.critic.backward(&trace, &[sample.weight * dq / n], &mut grads);
            td_errors.push(e1);
        }
        loss += self.cfg.beta2 * self.critic.weight_penalty();
        self.critic.add_weight_penalty_grad(self.cfg.beta2, &mut grads);
        if !loss.is_finite() {
            return Err(AgentError::NonFinite {
                what: "critic loss",
                detail: format!("loss = {loss}, batch = {}", batch.len()),
            });
        }
        check_finite("critic gradient", &grads)?;
        Ok(CriticStep {
            loss,
            loss_1,
            grads,
            td_errors,
        })
    }

    /// Deterministic policy gradient step for `states`. `stored_actions`
    /// (same length) are the actions at which `|∇_a Q|²` is reported.
    pub fn actor_loss(&self, states: &[&[f64]], stored_actions: &[&[f64]]) -> Result<ActorStep, AgentError> {
        let n = states.len().max(1) as f64;
        let mut grads = vec![0.0; self.actor.params().len()];
        let mut scratch = vec![0.0; self.critic.params().len()];
        let mut loss = 0.0;
        for s in states {
            self.check_state(s)?;
            let a_trace = self.actor.forward_trace(s);
            let input = concat(s, a_trace.output());
            let c_trace = self.critic.forward_trace(&input);
            loss -= c_trace.output()[0] / n;
            let d_input = self.critic.backward(&c_trace, &[1.0], &mut scratch);
            let d_action: Vec<f64> = d_input[self.state_dim..].iter().map(|g| -g / n).collect();
            self.actor.backward(&a_trace, &d_action, &mut grads);
        }
        loss += self.cfg.beta2 * self.actor.weight_penalty();
        self.actor.add_weight_penalty_grad(self.cfg.beta2, &mut grads);

        let mut action_grad_sq = Vec::with_capacity(stored_actions.len());
        for (s, a) in states.iter().zip(stored_actions) {
            self.check_action(a)?;
            let trace = self.critic.forward_trace(&concat(s, a));
            scratch.iter_mut().for_each(|g| *g = 0.0);
            let d_input = self.critic.backward(&trace, &[1.0], &mut scratch);
            action_grad_sq.push(d_input[self.state_dim..].iter().map(|g| g * g).sum());
        }
        if !loss.is_finite() {
            return Err(AgentError::NonFinite {
                what: "actor loss",
                detail: format!("loss = {loss}"),
            });
        }
        check_finite("actor gradient", &grads)?;
        Ok(ActorStep {
            loss,
            grads,
            action_grad_sq,
        })
    }

    pub fn apply_critic(&mut self, grads: &[f64]) {
        self.critic_opt.step(self.critic.params_mut(), grads);
    }

    pub fn apply_actor(&mut self, grads: &[f64]) {
        self.actor_opt.step(self.actor.params_mut(), grads);
    }

    pub fn soft_update_targets(&mut self) {
        let tau = self.cfg.tau;
        self.actor_target.soft_update_from(&self.actor, tau);
        self.critic_target.soft_update_from(&self.critic, tau);
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("agent serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let agent: Agent = serde_json::from_str(text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        if agent.format != AGENT_FORMAT {
            return Err(AgentError::Checkpoint(format!("unsupported format `{}`", agent.format)));
        }
        Ok(agent)
    }
}

/// Checkpoint envelope binding an agent to its catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub catalog_fingerprint: String,
    pub agent: Agent,
}

impl AgentCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let text = serde_json::to_string(self).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| AgentError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path, expected_fingerprint: &str) -> Result<Agent, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        let ckpt: AgentCheckpoint =
            serde_json::from_str(&text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        if ckpt.catalog_fingerprint != expected_fingerprint {
            return Err(AgentError::CatalogMismatch {
                expected: expected_fingerprint.to_string(),
                found: ckpt.catalog_fingerprint,
            });
        }
        Ok(ckpt.agent)
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}
