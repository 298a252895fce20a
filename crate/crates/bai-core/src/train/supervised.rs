//! Supervised next-token training: pretraining over whole sequences and SFT
//! over response tokens only.

use crate::det::{self, Real};
use crate::error::{Error, Result};
use crate::model::{backward, forward_traced, log_softmax, Adam, AdamConfig, HeadKind, ParamSet};
use crate::rng::{self, Domain};
use crate::synth::{CorpusLine, Episode};

use super::{lr_at, SftConfig};

/// What to train on, and which positions count toward the loss.
pub enum SftData {
    /// Every transition is predicted (position 0 has no predecessor).
    Corpus(Vec<CorpusLine>),
    /// Only response tokens are predicted; prompt positions are masked out.
    Episodes(Vec<Episode>),
}

impl SftData {
    fn len(&self) -> usize {
        match self {
            SftData::Corpus(c) => c.len(),
            SftData::Episodes(e) => e.len(),
        }
    }

    /// (tokens, first predicted position) for example i.
    fn example(&self, i: usize) -> (Vec<u32>, usize) {
        match self {
            SftData::Corpus(c) => (c[i].tokens.clone(), 1),
            SftData::Episodes(e) => (e[i].flat(), e[i].prompt.len()),
        }
    }

    fn validate(&self, max_len: usize) -> Result<()> {
        if self.len() == 0 {
            return Err(Error::Data("supervised dataset is empty".into()));
        }
        for i in 0..self.len() {
            let (tokens, start) = self.example(i);
            if tokens.len() > max_len {
                return Err(Error::Data(format!(
                    "example {i} has {} tokens, model max_len is {max_len}",
                    tokens.len()
                )));
            }
            if start == 0 || start >= tokens.len() {
                return Err(Error::Data(format!(
                    "example {i}: nothing to predict (len {}, first predicted {start})",
                    tokens.len()
                )));
            }
        }
        Ok(())
    }
}

/// Cross-entropy (nats per predicted token) plus the logit gradients for one
/// example, scaled by `inv_n` (1 / total predicted tokens in the batch).
fn example_ce_and_grad<R: Real>(
    params: &ParamSet<R>,
    tokens: &[u32],
    pred_start: usize,
    inv_n: f64,
) -> Result<(f64, ParamSet<R>)> {
    let v = params.cfg.vocab;
    let tr = forward_traced(params, tokens)?;
    let mut loss = 0.0;
    let mut d_logits = vec![0.0f64; tokens.len() * v];
    for pos in pred_start..tokens.len() {
        let row_idx = pos - 1;
        let row: Vec<f64> =
            tr.out[row_idx * v..(row_idx + 1) * v].iter().map(|x| x.to_f64()).collect();
        let ld = log_softmax(&row, 1.0);
        let target = tokens[pos] as usize;
        loss -= ld[target];
        let drow = &mut d_logits[row_idx * v..(row_idx + 1) * v];
        for k in 0..v {
            drow[k] += det::exp(ld[k]) * inv_n;
        }
        drow[target] -= inv_n;
    }
    let d_out: Vec<R> = d_logits.iter().map(|&x| R::from_f64(x)).collect();
    let grads = backward(params, &tr, &d_out)?;
    Ok((loss, grads))
}

/// Mean next-token cross-entropy (nats per predicted token) over a dataset.
pub fn eval_lm_ce<R: Real>(params: &ParamSet<R>, data: &SftData) -> Result<f64> {
    data.validate(params.cfg.max_len)?;
    let v = params.cfg.vocab;
    let mut loss = 0.0;
    let mut n = 0usize;
    for i in 0..data.len() {
        let (tokens, start) = data.example(i);
        let out = crate::model::forward_lm(params, &tokens)?;
        for pos in start..tokens.len() {
            let row: Vec<f64> =
                out[(pos - 1) * v..pos * v].iter().map(|x| x.to_f64()).collect();
            let ld = log_softmax(&row, 1.0);
            loss -= ld[tokens[pos] as usize];
            n += 1;
        }
    }
    Ok(loss / n as f64)
}

/// Minimize mean cross-entropy over the predicted positions. Returns the
/// trained parameters and the per-step loss curve. Zero steps returns the
/// input unchanged (with an empty curve).
pub fn train_supervised<R: Real>(
    init: &ParamSet<R>,
    data: &SftData,
    cfg: &SftConfig,
) -> Result<(ParamSet<R>, Vec<f64>)> {
    cfg.validate()?;
    if init.cfg.head != HeadKind::Lm {
        return Err(Error::Config("supervised training needs an lm head".into()));
    }
    data.validate(init.cfg.max_len)?;

    let mut params = init.clone();
    let mut opt = Adam::new(&params, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    let n_examples = data.len();

    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, Domain::SftBatch, &[step as u64]);
        let idxs: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng::uniform_range(&mut r, n_examples)).collect();
        let n_tokens: usize = idxs
            .iter()
            .map(|&i| {
                let (tokens, start) = data.example(i);
                tokens.len() - start
            })
            .sum();
        let inv_n = 1.0 / n_tokens as f64;

        let mut grads = ParamSet::<R>::zeros(&params.cfg)?;
        let mut loss = 0.0;
        for &i in &idxs {
            let (tokens, start) = data.example(i);
            let (l, g) = example_ce_and_grad(&params, &tokens, start, inv_n)?;
            loss += l;
            grads.add_assign(&g);
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        opt.step(&mut params, &grads, lr_at(cfg.lr, cfg.warmup_steps, step));
        losses.push(loss);
    }
    Ok((params, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{gen_pretrain_corpus, gen_sft_dataset, GenConfig, Style};

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 32,
            head: HeadKind::Lm,
            tied_lm: false,
        }
    }

    #[test]
    fn zero_steps_returns_init_unchanged() {
        let p: ParamSet<f32> = ParamSet::init(&model_cfg(), 1).unwrap();
        let data = SftData::Corpus(gen_pretrain_corpus(32, 16, 8, 1).unwrap());
        let cfg = SftConfig { steps: 0, warmup_steps: 0, ..Default::default() };
        let (q, losses) = train_supervised(&p, &data, &cfg).unwrap();
        assert_eq!(p, q);
        assert!(losses.is_empty());
    }

    #[test]
    fn fresh_model_starts_at_ln_v() {
        // zero head → exactly uniform logits → CE = ln V
        let p: ParamSet<f32> = ParamSet::init(&model_cfg(), 2).unwrap();
        let data = SftData::Corpus(gen_pretrain_corpus(32, 32, 8, 2).unwrap());
        let cfg = SftConfig { steps: 1, warmup_steps: 0, batch_size: 8, ..Default::default() };
        let (_, losses) = train_supervised(&p, &data, &cfg).unwrap();
        assert!((losses[0] - 32f64.ln()).abs() < 1e-9, "step-0 loss {}", losses[0]);
        let ce = eval_lm_ce(&p, &data).unwrap();
        assert!((ce - 32f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let p: ParamSet<f32> = ParamSet::init(&model_cfg(), 3).unwrap();
        let gen = GenConfig { chain_min: 4, chain_max: 8, ..Default::default() };
        let data = SftData::Episodes(gen_sft_dataset(&gen, Style::Instruct, 256, 3).unwrap());
        let cfg = SftConfig { steps: 40, warmup_steps: 5, batch_size: 16, lr: 3e-3, seed: 9 };
        let (q, losses) = train_supervised(&p, &data, &cfg).unwrap();
        assert_eq!(losses.len(), 40);
        assert!(
            losses[39] < 0.5 * losses[0],
            "loss should drop: {} -> {}",
            losses[0],
            losses[39]
        );
        let (q2, losses2) = train_supervised(&p, &data, &cfg).unwrap();
        assert_eq!(losses, losses2);
        assert_eq!(q, q2);
    }

    #[test]
    fn masked_sft_ignores_prompt_positions() {
        // an episode dataset where prompts are varied but the response is a
        // constant token: masked CE can go to ~0 even though prompts are
        // unpredictable
        let eps: Vec<Episode> = (0..64)
            .map(|i| Episode {
                prompt: vec![1, 4 + (i % 10) as u32, 4 + (i / 10 % 10) as u32, 4],
                response: vec![14, 2],
            })
            .collect();
        let p: ParamSet<f32> = ParamSet::init(&model_cfg(), 4).unwrap();
        let cfg = SftConfig { steps: 60, warmup_steps: 5, batch_size: 8, lr: 5e-3, seed: 1 };
        let data = SftData::Episodes(eps);
        let (q, _) = train_supervised(&p, &data, &cfg).unwrap();
        let ce = eval_lm_ce(&q, &data).unwrap();
        assert!(ce < 0.05, "constant response should be learned, ce={ce}");
    }

    #[test]
    fn divergence_reports_the_step() {
        let p: ParamSet<f32> = ParamSet::init(&model_cfg(), 5).unwrap();
        let data = SftData::Corpus(gen_pretrain_corpus(32, 16, 8, 5).unwrap());
        // absurd learning rate blows the parameters up within a few steps
        let cfg = SftConfig { steps: 30, warmup_steps: 0, batch_size: 4, lr: 1e9, seed: 0 };
        match train_supervised(&p, &data, &cfg) {
            Err(Error::Divergence { step }) => assert!(step > 0, "first step is finite"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_datasets() {
        let p: ParamSet<f32> = ParamSet::init(&model_cfg(), 6).unwrap();
        let empty = SftData::Episodes(vec![]);
        assert!(train_supervised(&p, &empty, &SftConfig::default()).is_err());
        let too_long = SftData::Corpus(gen_pretrain_corpus(32, 4, 40, 1).unwrap());
        assert!(matches!(
            train_supervised(&p, &too_long, &SftConfig::default()),
            Err(Error::Data(_))
        ));
        let value_head: ParamSet<f32> =
            ParamSet::init(&model_cfg(), 1).unwrap().with_head(HeadKind::Value).unwrap();
        let ok = SftData::Corpus(gen_pretrain_corpus(32, 4, 8, 1).unwrap());
        assert!(train_supervised(&value_head, &ok, &SftConfig::default()).is_err());
    }
}
