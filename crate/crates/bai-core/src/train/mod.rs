//! Training loops: supervised (pretrain + SFT), reward-model, and RLHF.

pub mod reward;
pub mod rlhf;
pub mod supervised;

pub use reward::{rm_pairwise_accuracy, train_reward_model, RmReport};
pub use rlhf::{
    evaluate_policy, ppo_update, synth_prompt_source, train_rlhf, PromptSource, RewardSource,
    RlhfOutcome, StepMetrics,
};
pub use supervised::{eval_lm_ce, train_supervised, SftData};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supervised-training configuration (shared by pretrain, SFT, and the
/// reward model). Scheduler is warmup-then-constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { lr: 1e-3, batch_size: 32, steps: 300, warmup_steps: 20, seed: 0 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be finite and positive, got {}", self.lr)));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total steps {}",
                self.warmup_steps, self.steps
            )));
        }
        Ok(())
    }
}

/// PPO configuration. Desk-scale defaults; the paper-scale values
/// (lr 1e-6, batch 4096, minibatch 512) remain settable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    /// Prompts per PPO step.
    pub global_batch: usize,
    /// Trajectories per gradient step; must divide global_batch·samples_per_prompt.
    pub mini_batch: usize,
    pub samples_per_prompt: usize,
    pub epochs_per_batch: usize,
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub advantage_normalization: bool,
    /// Recorded in manifests for bookkeeping; KL is tracked as a metric and
    /// never folded into the reward here.
    pub kl_penalty_coeff: f64,
    pub warmup_steps: usize,
    /// Save an actor checkpoint every this many steps (0 = only final).
    pub ckpt_interval: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 1.0,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            global_batch: 64,
            mini_batch: 16,
            samples_per_prompt: 1,
            epochs_per_batch: 1,
            steps: 300,
            temperature: 1.0,
            seed: 0,
            value_loss_coeff: 0.5,
            entropy_coeff: 0.0,
            advantage_normalization: true,
            kl_penalty_coeff: 0.0,
            warmup_steps: 10,
            ckpt_interval: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_batch == 0 || self.mini_batch == 0 || self.samples_per_prompt == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let total = self.global_batch * self.samples_per_prompt;
        if total % self.mini_batch != 0 {
            return Err(Error::Config(format!(
                "mini_batch {} must divide global_batch·samples_per_prompt = {total}",
                self.mini_batch
            )));
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::Config("epochs_per_batch must be positive".into()));
        }
        for (name, x) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {x}")));
            }
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0) {
            return Err(Error::Config(format!("clip_eps must be positive, got {}", self.clip_eps)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive for rollouts, got {}",
                self.temperature
            )));
        }
        for (name, x) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("value_loss_coeff", self.value_loss_coeff),
            ("kl_penalty_coeff", self.kl_penalty_coeff),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        if self.warmup_steps > self.steps && self.steps > 0 {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total steps {}",
                self.warmup_steps, self.steps
            )));
        }
        Ok(())
    }
}

/// Warmup-then-constant schedule: ramps linearly over `warmup` steps, then
/// holds. Step is 0-based; warmup 0 means full rate from the start.
pub fn lr_at(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step + 1 >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_ramps_then_holds() {
        assert_eq!(lr_at(0.1, 0, 0), 0.1);
        assert_eq!(lr_at(0.1, 4, 0), 0.025);
        assert_eq!(lr_at(0.1, 4, 1), 0.05);
        assert_eq!(lr_at(0.1, 4, 3), 0.1);
        assert_eq!(lr_at(0.1, 4, 100), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(SftConfig::default().validate().is_ok());
        assert!(SftConfig { warmup_steps: 301, ..Default::default() }.validate().is_err());
        assert!(SftConfig { batch_size: 0, ..Default::default() }.validate().is_err());

        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { mini_batch: 48, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { mini_batch: 64, ..Default::default() }.validate().is_ok());
        assert!(PpoConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip_eps: 0.0, ..Default::default() }.validate().is_err());
        // paper-scale values are representable
        let paper = PpoConfig {
            actor_lr: 1e-6,
            critic_lr: 1e-6,
            global_batch: 4096,
            mini_batch: 512,
            ..Default::default()
        };
        assert!(paper.validate().is_ok());
    }

    #[test]
    fn configs_roundtrip_through_json_and_reject_unknown_keys() {
        let c = PpoConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: PpoConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
        // partial configs fill from defaults
        let partial: PpoConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.clip_eps, 0.2);
        // unknown keys are hard errors
        assert!(serde_json::from_str::<PpoConfig>(r#"{"stepz": 7}"#).is_err());
        assert!(serde_json::from_str::<SftConfig>(r#"{"lr": 0.1, "momentum": 0.9}"#).is_err());
    }
}
