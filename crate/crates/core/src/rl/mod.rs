//! Token-masked PPO with GAE, and a toy search-QA environment that trains a
//! tabular policy through the real rollout loop.

mod gae;
mod optim;
mod ppo;
mod rewards;
pub mod toy;

pub use gae::gae_advantages;
pub use optim::Adam;
pub use ppo::{
    logits_gradients, ppo_loss, token_logprob_entropy, PpoOutput, PpoSequence, PpoStats, SequenceGrad, TokenDist,
};
pub use rewards::{compute_rewards, compute_token_mask};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_cliprange: f64,
    pub entropy_coeff: f64,
    pub ppo_epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Global gradient-norm clip applied to each optimizer step.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.001,
            gamma: 1.0,
            lambda: 1.0,
            value_cliprange: 0.5,
            entropy_coeff: 0.001,
            ppo_epochs: 1,
            actor_lr: 0.05,
            critic_lr: 0.05,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("array length mismatch: {0}")]
    LengthMismatch(String),
    #[error("trajectory has no policy tokens")]
    NoPolicyTokens,
    #[error("non-finite ratio at sequence {sequence}, token {token}")]
    NonFiniteRatio { sequence: usize, token: usize },
    #[error("training diverged at iteration {0}")]
    Diverged(usize),
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error("toy environment: {0}")]
    Env(String),
}
