//! Reward-model training on preference pairs with the pairwise logistic
//! loss −ln σ(r_chosen − r_rejected).

use crate::det::{self, Real};
use crate::error::{Error, Result};
use crate::model::{backward, forward_traced, Adam, AdamConfig, ParamSet};
use crate::rng::{self, Domain};
use crate::synth::PrefPair;

use super::{lr_at, SftConfig};

#[derive(Clone, Debug)]
pub struct RmReport {
    /// Mean pairwise loss per step.
    pub losses: Vec<f64>,
    /// Pairwise accuracy on the held-out pairs (ties count 0.5).
    pub holdout_accuracy: f64,
}

fn check_rm<R: Real>(params: &ParamSet<R>) -> Result<()> {
    if params.cfg.out_dim() != 1 {
        return Err(Error::Config(format!(
            "reward model needs a scalar head, got {}",
            params.cfg.head.name()
        )));
    }
    Ok(())
}

fn score<R: Real>(params: &ParamSet<R>, prompt: &[u32], response: &[u32]) -> Result<f64> {
    let mut flat = prompt.to_vec();
    flat.extend_from_slice(response);
    Ok(crate::model::forward_reward(params, &flat)?.to_f64())
}

/// Fraction of pairs scored in the preferred order; an exact tie counts 0.5,
/// so a constant-output model lands exactly at chance.
pub fn rm_pairwise_accuracy<R: Real>(params: &ParamSet<R>, pairs: &[PrefPair]) -> Result<f64> {
    check_rm(params)?;
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let mut acc = 0.0;
    for p in pairs {
        let rc = score(params, &p.prompt, &p.chosen)?;
        let rr = score(params, &p.prompt, &p.rejected)?;
        if rc > rr {
            acc += 1.0;
        } else if rc == rr {
            acc += 0.5;
        }
    }
    Ok(acc / pairs.len() as f64)
}

/// Train a reward model from preference pairs. Returns the trained model and
/// a report with the loss curve and held-out accuracy.
pub fn train_reward_model<R: Real>(
    init: &ParamSet<R>,
    pairs: &[PrefPair],
    holdout: &[PrefPair],
    cfg: &SftConfig,
) -> Result<(ParamSet<R>, RmReport)> {
    cfg.validate()?;
    check_rm(init)?;
    if pairs.is_empty() {
        return Err(Error::Data("preference-pair training set is empty".into()));
    }
    let max_len = init.cfg.max_len;
    for (i, p) in pairs.iter().chain(holdout).enumerate() {
        let need = p.prompt.len() + p.chosen.len().max(p.rejected.len());
        if need > max_len {
            return Err(Error::Data(format!(
                "pair {i} needs {need} tokens, model max_len is {max_len}"
            )));
        }
    }

    let mut params = init.clone();
    let mut opt = Adam::new(&params, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, Domain::SftBatch, &[step as u64]);
        let idxs: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng::uniform_range(&mut r, pairs.len())).collect();
        let inv_b = 1.0 / cfg.batch_size as f64;

        let mut grads = ParamSet::<R>::zeros(&params.cfg)?;
        let mut loss = 0.0;
        for &i in &idxs {
            let pair = &pairs[i];
            let mut flat_c = pair.prompt.clone();
            flat_c.extend_from_slice(&pair.chosen);
            let mut flat_r = pair.prompt.clone();
            flat_r.extend_from_slice(&pair.rejected);
            let tr_c = forward_traced(&params, &flat_c)?;
            let tr_r = forward_traced(&params, &flat_r)?;
            let delta = tr_c.out.last().unwrap().to_f64() - tr_r.out.last().unwrap().to_f64();
            loss += det::softplus(-delta) * inv_b;
            // d loss / d r_chosen = −σ(−Δ), mirrored for the rejected side
            let w = det::sigmoid(-delta) * inv_b;
            let mut d_out = vec![R::ZERO; flat_c.len()];
            *d_out.last_mut().unwrap() = R::from_f64(-w);
            grads.add_assign(&backward(&params, &tr_c, &d_out)?);
            let mut d_out = vec![R::ZERO; flat_r.len()];
            *d_out.last_mut().unwrap() = R::from_f64(w);
            grads.add_assign(&backward(&params, &tr_r, &d_out)?);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        opt.step(&mut params, &grads, lr_at(cfg.lr, cfg.warmup_steps, step));
        losses.push(loss);
    }

    let holdout_accuracy =
        if holdout.is_empty() { f64::NAN } else { rm_pairwise_accuracy(&params, holdout)? };
    Ok((params, RmReport { losses, holdout_accuracy }))
}
