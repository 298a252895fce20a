//! The PPO-based RLHF loop: parallel rollouts with per-prompt random
//! streams, GAE, clipped-surrogate updates, and per-step metrics.

use std::path::Path;

use rayon::prelude::*;

use crate::analysis::BucketSpec;
use crate::det::Real;
use crate::error::{Error, Result};
use crate::gae::gae;
use crate::model::{forward_reward, response_values, sample, Adam, AdamConfig, HeadKind, ParamSet};
use crate::ppo::{normalize_advantages, ppo_minibatch, PpoUpdateConfig, Trajectory};
use crate::rng::{self, Domain};
use crate::synth;

use super::{lr_at, PpoConfig};

/// Where terminal rewards come from.
pub enum RewardSource<'a, R> {
    /// A trained reward model scores the full episode.
    Model(&'a ParamSet<R>),
    /// The task's ground-truth scorer (for diagnosis runs).
    Oracle,
}

impl<R: Real> RewardSource<'_, R> {
    fn score(&self, prompt: &[u32], response: &[u32], flat: &[u32]) -> Result<f64> {
        match self {
            RewardSource::Model(rm) => Ok(forward_reward(*rm, flat)?.to_f64()),
            RewardSource::Oracle => synth::oracle_reward(prompt, response),
        }
    }
}

/// Prompt generator: (step, prompt index) → prompt tokens.
pub type PromptSource<'a> = dyn Fn(u64, u64) -> Result<Vec<u32>> + Sync + 'a;

/// Prompt source drawing random task prompts from a dedicated stream keyed
/// by (seed, step, index).
pub fn synth_prompt_source(seed: u64) -> impl Fn(u64, u64) -> Result<Vec<u32>> + Sync {
    move |step, idx| {
        let mut r = rng::stream(seed, Domain::Prompt, &[step, idx]);
        let a = rng::uniform_range(&mut r, 10) as u8;
        let b = rng::uniform_range(&mut r, 10) as u8;
        let c = rng::uniform_range(&mut r, 10) as u8;
        synth::prompt_tokens(a, b, c)
    }
}

/// One row of the training record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean response length (tokens) over the step's rollouts.
    pub mean_len: f64,
    /// Mean per-token KL(current ‖ sampling), measured during the first
    /// optimization epoch.
    pub kl: f64,
    /// Mean terminal reward over rollouts.
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    /// Mean reward per response-length bucket; None where the step produced
    /// no episodes in that bucket.
    pub buckets: Vec<Option<f64>>,
    /// Mean over episodes of the per-episode KL sum.
    pub kl_seq: f64,
}

fn rollout_one<R: Real>(
    actor: &ParamSet<R>,
    critic: Option<&ParamSet<R>>,
    reward: &RewardSource<R>,
    prompt: Vec<u32>,
    rng: &mut rand_chacha::ChaCha8Rng,
    temperature: f64,
    capture_dists: bool,
    step: usize,
) -> Result<Trajectory> {
    let max_len = actor.cfg.max_len;
    if prompt.is_empty() || prompt.len() >= max_len {
        return Err(Error::Config(format!(
            "prompt length {} leaves no room to generate (max_len {max_len})",
            prompt.len()
        )));
    }
    let max_new = max_len - prompt.len();
    let s = sample(actor, &prompt, max_new, temperature, synth::EOS, rng, capture_dists)?;
    let mut tokens = prompt.clone();
    tokens.extend_from_slice(&s.response);
    let r_len = s.response.len();
    let terminal = reward.score(&prompt, &s.response, &tokens)?;
    if !terminal.is_finite() {
        return Err(Error::Divergence { step });
    }
    let values = match critic {
        Some(c) => response_values(c, &tokens, prompt.len())?,
        None => vec![0.0; r_len],
    };
    Ok(Trajectory {
        tokens,
        prompt_len: prompt.len(),
        sampled_logps: s.logps,
        sampled_dists: s.dists,
        reward: terminal,
        values,
        advantages: vec![0.0; r_len],
        returns: vec![0.0; r_len],
    })
}

/// Sample the step's global batch in parallel. Each rollout draws from its
/// own stream keyed by (seed, step, flat sample index), so the result is
/// identical for any thread count.
fn rollout_batch<R: Real>(
    actor: &ParamSet<R>,
    critic: Option<&ParamSet<R>>,
    reward: &RewardSource<R>,
    prompts: &PromptSource,
    cfg: &PpoConfig,
    step: usize,
    capture_dists: bool,
) -> Result<Vec<Trajectory>> {
    let total = cfg.global_batch * cfg.samples_per_prompt;
    (0..total)
        .into_par_iter()
        .map(|j| {
            let prompt_idx = (j / cfg.samples_per_prompt) as u64;
            let prompt = prompts(step as u64, prompt_idx)?;
            let mut r = rng::stream(cfg.seed, Domain::Rollout, &[step as u64, j as u64]);
            let mut traj = rollout_one(
                actor,
                critic,
                reward,
                prompt,
                &mut r,
                cfg.temperature,
                capture_dists,
                step,
            )?;
            if critic.is_some() {
                let mut rewards = vec![0.0; traj.response_len()];
                *rewards.last_mut().unwrap() = traj.reward;
                let (adv, ret) = gae(&rewards, &traj.values, cfg.gamma, cfg.gae_lambda)?;
                traj.advantages = adv;
                traj.returns = ret;
            }
            Ok(traj)
        })
        .collect()
}

/// Aggregated update statistics for one PPO step, measured over the first
/// optimization epoch (each response token contributes exactly once).
#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub kl: f64,
    pub kl_seq: f64,
    pub entropy: f64,
}

/// One PPO step over an already-sampled batch: normalize advantages, then
/// run epochs × shuffled minibatches of clipped-surrogate updates.
pub fn ppo_update<R: Real>(
    actor: &mut ParamSet<R>,
    critic: &mut ParamSet<R>,
    opt_actor: &mut Adam<R>,
    opt_critic: &mut Adam<R>,
    trajs: &mut [Trajectory],
    cfg: &PpoConfig,
    step: usize,
) -> Result<UpdateStats> {
    if trajs.is_empty() {
        return Err(Error::Config("ppo_update on an empty batch".into()));
    }
    if cfg.advantage_normalization {
        normalize_advantages(trajs, 1e-8);
    }
    let upd = PpoUpdateConfig {
        clip_eps: cfg.clip_eps,
        value_coef: cfg.value_loss_coeff,
        entropy_coef: cfg.entropy_coeff,
        temperature: cfg.temperature,
    };
    let actor_lr = lr_at(cfg.actor_lr, cfg.warmup_steps, step);
    let critic_lr = lr_at(cfg.critic_lr, cfg.warmup_steps, step);

    let mut sums = UpdateStats::default();
    let mut tokens_seen = 0usize;
    let mut kl_seq_sum = 0.0;
    let mut trajs_seen = 0usize;

    let n = trajs.len();
    for epoch in 0..cfg.epochs_per_batch {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(cfg.seed, Domain::PpoShuffle, &[step as u64, epoch as u64]);
        rng::shuffle(&mut r, &mut idx);
        let measure = epoch == 0;
        for chunk in idx.chunks(cfg.mini_batch) {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
            let (ga, gc, stats) = ppo_minibatch(actor, critic, &refs, &upd, measure)?;
            if !stats.actor_loss.is_finite() || !stats.value_loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            if measure {
                let w = stats.n_tokens as f64;
                sums.actor_loss += stats.actor_loss * w;
                sums.value_loss += stats.value_loss * w;
                sums.clip_frac += stats.clip_frac * w;
                sums.entropy += stats.entropy * w;
                sums.kl += stats.kl.unwrap_or(0.0) * w;
                tokens_seen += stats.n_tokens;
                kl_seq_sum += stats.kl_traj_sums.iter().sum::<f64>();
                trajs_seen += refs.len();
            }
            opt_actor.step(actor, &ga, actor_lr);
            opt_critic.step(critic, &gc, critic_lr);
        }
    }
    let inv_t = 1.0 / tokens_seen as f64;
    Ok(UpdateStats {
        actor_loss: sums.actor_loss * inv_t,
        value_loss: sums.value_loss * inv_t,
        clip_frac: sums.clip_frac * inv_t,
        kl: sums.kl * inv_t,
        kl_seq: kl_seq_sum / trajs_seen as f64,
        entropy: sums.entropy * inv_t,
    })
}

fn metrics_row(step: usize, trajs: &[Trajectory], upd: &UpdateStats, buckets: BucketSpec) -> StepMetrics {
    let n = trajs.len() as f64;
    StepMetrics {
        step,
        mean_len: trajs.iter().map(|t| t.response_len() as f64).sum::<f64>() / n,
        kl: upd.kl,
        mean_reward: trajs.iter().map(|t| t.reward).sum::<f64>() / n,
        actor_loss: upd.actor_loss,
        value_loss: upd.value_loss,
        clip_frac: upd.clip_frac,
        buckets: crate::analysis::bucket_rewards(trajs, buckets)
            .into_iter()
            .map(|b| b.map(|(mean, _)| mean))
            .collect(),
        kl_seq: upd.kl_seq,
    }
}

pub struct RlhfOutcome<R> {
    pub actor: ParamSet<R>,
    pub critic: ParamSet<R>,
    pub metrics: Vec<StepMetrics>,
}

/// Full RLHF training. The critic starts as a verbatim copy of the reward
/// model (value head = reward head). When `ckpt_dir` is set, the actor is
/// checkpointed every `cfg.ckpt_interval` steps. `on_step` fires after each
/// step with the fresh metrics row (for streaming CSVs / progress output).
pub fn train_rlhf<R: Real>(
    actor_init: &ParamSet<R>,
    rm: &ParamSet<R>,
    reward: &RewardSource<R>,
    prompts: &PromptSource,
    cfg: &PpoConfig,
    buckets: BucketSpec,
    ckpt_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RlhfOutcome<R>> {
    cfg.validate()?;
    if actor_init.cfg.head != HeadKind::Lm {
        return Err(Error::Config("rlhf actor needs an lm head".into()));
    }
    if rm.cfg.out_dim() != 1 {
        return Err(Error::Config("reward model needs a scalar head".into()));
    }
    let mut actor = actor_init.clone();
    let mut critic = rm.with_head(HeadKind::Value)?;
    let mut opt_actor = Adam::new(&actor, AdamConfig::default());
    let mut opt_critic = Adam::new(&critic, AdamConfig::default());
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut trajs =
            rollout_batch(&actor, Some(&critic), reward, prompts, cfg, step, true)?;
        let upd = ppo_update(
            &mut actor,
            &mut critic,
            &mut opt_actor,
            &mut opt_critic,
            &mut trajs,
            cfg,
            step,
        )?;
        let row = metrics_row(step, &trajs, &upd, buckets);
        on_step(&row)?;
        metrics.push(row);

        if let (Some(dir), true) = (ckpt_dir, cfg.ckpt_interval > 0) {
            if (step + 1) % cfg.ckpt_interval == 0 {
                let mut ck = actor.to_checkpoint("actor")?;
                ck.meta.insert("step".into(), (step + 1).to_string());
                crate::store::save_checkpoint(&ck, &dir.join(format!("step_{}.ckpt", step + 1)))?;
            }
        }
    }
    Ok(RlhfOutcome { actor, critic, metrics })
}

/// Rollout-only evaluation: one metrics row at the given policy, no updates.
/// KL and the loss fields are identically zero (there is nothing to compare
/// against or optimize).
pub fn evaluate_policy<R: Real>(
    actor: &ParamSet<R>,
    reward: &RewardSource<R>,
    prompts: &PromptSource,
    cfg: &PpoConfig,
    buckets: BucketSpec,
) -> Result<StepMetrics> {
    cfg.validate()?;
    let trajs = rollout_batch(actor, None, reward, prompts, cfg, 0, false)?;
    Ok(metrics_row(0, &trajs, &UpdateStats::default(), buckets))
}
