//! Clipped-surrogate policy optimization: the per-minibatch math.
//!
//! This module computes losses and exact gradients for one minibatch of
//! trajectories; the training loop (rollouts, advantage normalization,
//! shuffling, optimizer steps) lives in `train::rlhf`.

use crate::det::{self, Real};
use crate::error::{Error, Result};
use crate::model::{
    backward, entropy_from_logdist, forward_traced, kl_from_logdists, log_softmax, ParamSet,
};

/// One sampled episode plus everything the update needs.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// prompt ++ response.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Log-prob of each response token under the sampling policy at the
    /// rollout temperature.
    pub sampled_logps: Vec<f64>,
    /// Full log-distribution at each response position under the sampling
    /// policy (for measuring KL drift).
    pub sampled_dists: Vec<Vec<f64>>,
    /// Terminal scalar reward, credited to the last response token.
    pub reward: f64,
    /// Critic values at rollout time, one per response token (the state
    /// before emitting that token) — inputs to GAE.
    pub values: Vec<f64>,
    /// Filled by GAE + normalization before the update.
    pub advantages: Vec<f64>,
    /// GAE returns, the value-head regression targets.
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn response(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PpoUpdateConfig {
    pub clip_eps: f64,
    /// Scales the value-loss gradient; the reported value_loss stays raw MSE.
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Sampling temperature; current log-probs are evaluated at the same
    /// temperature so an unchanged policy gives ratio exactly 1.
    pub temperature: f64,
}

impl Default for PpoUpdateConfig {
    fn default() -> Self {
        PpoUpdateConfig { clip_eps: 0.2, value_coef: 0.5, entropy_coef: 0.0, temperature: 1.0 }
    }
}

/// The pessimistic clipped term: min(ρ·A, clip(ρ, 1−ε, 1+ε)·A).
pub fn clipped_objective(rho: f64, adv: f64, eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    (rho * adv).min(clipped)
}

#[derive(Clone, Debug, Default)]
pub struct PpoBatchStats {
    /// −mean clipped objective over the minibatch's response tokens.
    pub actor_loss: f64,
    /// Raw MSE of the value head against returns (no coefficient).
    pub value_loss: f64,
    /// Fraction of tokens whose ratio fell outside [1−ε, 1+ε].
    pub clip_frac: f64,
    /// Mean KL(current ‖ sampling) per token; only measured when asked.
    pub kl: Option<f64>,
    /// Per-trajectory KL sums (input order), filled when KL is measured —
    /// the raw material for a per-sequence KL aggregate.
    pub kl_traj_sums: Vec<f64>,
    /// Mean entropy of the current per-token distributions.
    pub entropy: f64,
    pub n_tokens: usize,
}

/// Losses and exact gradients for one minibatch.
///
/// Returns (actor grads, critic grads, stats). Gradients correspond to
///   L = −mean_t min(ρ_t A_t, clip(ρ_t) A_t) − entropy_coef·mean_t H_t
///     + value_coef·mean_t (v_t − ret_t)²
/// with flat means over all response tokens in the minibatch.
pub fn ppo_minibatch<R: Real>(
    actor: &ParamSet<R>,
    critic: &ParamSet<R>,
    trajs: &[&Trajectory],
    cfg: &PpoUpdateConfig,
    measure_kl: bool,
) -> Result<(ParamSet<R>, ParamSet<R>, PpoBatchStats)> {
    if trajs.is_empty() {
        return Err(Error::Config("ppo minibatch is empty".into()));
    }
    if cfg.temperature <= 0.0 {
        return Err(Error::Config("ppo needs a positive sampling temperature".into()));
    }
    let v = actor.cfg.vocab;
    let n_tokens: usize = trajs.iter().map(|t| t.response_len()).sum();
    if n_tokens == 0 {
        return Err(Error::Config("ppo minibatch has no response tokens".into()));
    }
    let inv_n = 1.0 / n_tokens as f64;

    let mut actor_grads = ParamSet::<R>::zeros(&actor.cfg)?;
    let mut critic_grads = ParamSet::<R>::zeros(&critic.cfg)?;
    let mut stats = PpoBatchStats { kl: measure_kl.then_some(0.0), n_tokens, ..Default::default() };
    let mut surrogate_sum = 0.0;
    let mut clip_hits = 0usize;

    for traj in trajs {
        let p_len = traj.prompt_len;
        let r_len = traj.response_len();
        let mut traj_kl = 0.0;
        if traj.sampled_logps.len() != r_len
            || traj.advantages.len() != r_len
            || traj.returns.len() != r_len
            || traj.sampled_dists.len() != r_len
        {
            return Err(Error::Config("trajectory field lengths disagree".into()));
        }

        // ---- actor ----
        let tr = forward_traced(actor, &traj.tokens)?;
        let mut d_logits = vec![0.0f64; traj.tokens.len() * v];
        for j in 0..r_len {
            // response token j sits at flat position p_len + j and is
            // predicted by the logits row one position earlier
            let row_idx = p_len + j - 1;
            let row: Vec<f64> =
                tr.out[row_idx * v..(row_idx + 1) * v].iter().map(|x| x.to_f64()).collect();
            let ld = log_softmax(&row, cfg.temperature);
            let a_tok = traj.tokens[p_len + j] as usize;
            let lp_cur = ld[a_tok];
            let rho = det::exp(lp_cur - traj.sampled_logps[j]);
            let adv = traj.advantages[j];

            let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
            let unclipped = rho * adv;
            surrogate_sum += unclipped.min(clipped);
            if rho < 1.0 - cfg.clip_eps || rho > 1.0 + cfg.clip_eps {
                clip_hits += 1;
            }
            // dL/d lp = −(A·ρ)/N on the active unclipped branch, else 0
            let dl_dlp = if unclipped <= clipped { -adv * rho * inv_n } else { 0.0 };

            let h = entropy_from_logdist(&ld);
            stats.entropy += h * inv_n;
            if let Some(kl) = stats.kl.as_mut() {
                let kl_j = kl_from_logdists(&ld, &traj.sampled_dists[j]);
                *kl += kl_j * inv_n;
                traj_kl += kl_j;
            }

            // d lp/d z_k = (1[k=a] − s_k)/τ, plus the entropy bonus term
            // dH/d z_k = −s_k(ln s_k + H)/τ
            let drow = &mut d_logits[row_idx * v..(row_idx + 1) * v];
            let inv_t = 1.0 / cfg.temperature;
            for k in 0..v {
                let s_k = det::exp(ld[k]);
                let mut d = dl_dlp * (-s_k) * inv_t;
                if cfg.entropy_coef != 0.0 {
                    d += cfg.entropy_coef * s_k * (ld[k] + h) * inv_t * inv_n;
                }
                drow[k] += d;
            }
            drow[a_tok] += dl_dlp * inv_t;
        }
        let d_out: Vec<R> = d_logits.iter().map(|&x| R::from_f64(x)).collect();
        actor_grads.add_assign(&backward(actor, &tr, &d_out)?);
        if measure_kl {
            stats.kl_traj_sums.push(traj_kl);
        }

        // ---- critic ----
        let ctr = forward_traced(critic, &traj.tokens)?;
        let mut d_vals = vec![0.0f64; traj.tokens.len()];
        for j in 0..r_len {
            let pos = p_len - 1 + j; // state before emitting response token j
            let v_pred = ctr.out[pos].to_f64();
            let err = v_pred - traj.returns[j];
            stats.value_loss += err * err * inv_n;
            d_vals[pos] += cfg.value_coef * 2.0 * err * inv_n;
        }
        let d_out: Vec<R> = d_vals.iter().map(|&x| R::from_f64(x)).collect();
        critic_grads.add_assign(&backward(critic, &ctr, &d_out)?);
    }

    stats.actor_loss = -surrogate_sum * inv_n;
    stats.clip_frac = clip_hits as f64 * inv_n;
    Ok((actor_grads, critic_grads, stats))
}

/// Normalize advantages in place across a whole batch of trajectories:
/// (A − μ)/(σ + eps) with the population σ over every response token.
pub fn normalize_advantages(trajs: &mut [Trajectory], eps: f64) {
    let n: usize = trajs.iter().map(|t| t.advantages.len()).sum();
    if n == 0 {
        return;
    }
    let mut mean = 0.0;
    for t in trajs.iter() {
        for &a in &t.advantages {
            mean += a;
        }
    }
    mean /= n as f64;
    let mut var = 0.0;
    for t in trajs.iter() {
        for &a in &t.advantages {
            var += (a - mean) * (a - mean);
        }
    }
    var /= n as f64;
    let scale = 1.0 / (var.sqrt() + eps);
    for t in trajs.iter_mut() {
        for a in t.advantages.iter_mut() {
            *a = (*a - mean) * scale;
        }
    }
}
