//! Autoregressive sampling and log-probability utilities.
//!
//! Sampling runs the incremental cached forward, which computes each new
//! position with exactly the arithmetic a full-sequence pass would use.
//! Because attention is causal and every per-position computation is
//! deterministic, the log-probs recorded while sampling are bit-identical
//! to the ones recovered later from a single full-sequence forward.

use rand_chacha::ChaCha8Rng;

use crate::det::{self, Real};
use crate::error::{Error, Result};
use crate::rng;

use super::cache::GenState;
use super::forward::{forward_lm, forward_value};
use super::{HeadKind, ParamSet};

#[derive(Clone, Debug)]
pub struct SampleResult {
    /// Generated tokens (response only, prompt excluded). Includes the EOS
    /// token when generation stopped on it.
    pub response: Vec<u32>,
    /// Log-prob of each generated token under softmax(logits / temperature).
    /// At temperature 0 (greedy) every entry is 0 = ln 1.
    pub logps: Vec<f64>,
    /// Full log-distribution at each generated position, captured only when
    /// requested (needed to measure KL against a later policy).
    pub dists: Vec<Vec<f64>>,
}

/// log softmax(row / temperature), computed with the deterministic kernels.
pub fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "log_softmax needs a positive temperature");
    let inv_t = 1.0 / temperature;
    let z: Vec<f64> = row.iter().map(|&x| x * inv_t).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &zi in &z {
        sum += det::exp(zi - m);
    }
    let log_z = m + det::ln(sum);
    z.iter().map(|&zi| zi - log_z).collect()
}

/// Greedy pick: highest logit, ties broken toward the lowest token id.
fn argmax<R: Real>(row: &[R]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Generate up to `max_new` tokens after `prompt`, stopping early at `eos`
/// or when the sequence hits the model's max_len.
pub fn sample<R: Real>(
    p: &ParamSet<R>,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    eos: u32,
    rng: &mut ChaCha8Rng,
    capture_dists: bool,
) -> Result<SampleResult> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if temperature == 0.0 && capture_dists {
        return Err(Error::Config(
            "full log-distributions are not defined for greedy (temperature 0) sampling".into(),
        ));
    }
    if p.cfg.head != HeadKind::Lm {
        return Err(Error::Config(format!(
            "lm forward on a model with a {} head",
            p.cfg.head.name()
        )));
    }
    let v = p.cfg.vocab;
    let mut seq = prompt.to_vec();
    let mut st = GenState::new(p);
    let mut out = SampleResult { response: Vec::new(), logps: Vec::new(), dists: Vec::new() };
    for _ in 0..max_new {
        if seq.len() >= p.cfg.max_len {
            break;
        }
        // feed tokens the cache hasn't seen: the whole prompt on the first
        // pass, one freshly sampled token after that
        let mut last = None;
        while st.len() < seq.len() {
            last = Some(st.push(p, seq[st.len()])?);
        }
        let Some(row) = last else {
            return Err(Error::Config("forward needs at least one token".into()));
        };
        let (tok, logp) = if temperature == 0.0 {
            (argmax(&row), 0.0)
        } else {
            let row64: Vec<f64> = row.iter().map(|x| x.to_f64()).collect();
            let ld = log_softmax(&row64, temperature);
            let u = rng::uniform_f64(rng);
            // walk the CDF in token order; float dust at the top lands on the
            // last token, keeping the draw well-defined
            let mut acc = 0.0;
            let mut tok = v - 1;
            for (t, &l) in ld.iter().enumerate() {
                acc += det::exp(l);
                if u < acc {
                    tok = t;
                    break;
                }
            }
            let logp = ld[tok];
            if capture_dists {
                out.dists.push(ld);
            }
            (tok as u32, logp)
        };
        out.response.push(tok);
        out.logps.push(logp);
        seq.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(out)
}

/// Log-probs of the response tokens `tokens[prompt_len..]` under the model,
/// at the given sampling temperature. Entry j is the log-prob of token
/// prompt_len+j given everything before it.
pub fn log_probs_with_temperature<R: Real>(
    p: &ParamSet<R>,
    tokens: &[u32],
    prompt_len: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    if prompt_len == 0 || prompt_len > tokens.len() {
        return Err(Error::Config(format!(
            "prompt_len {prompt_len} invalid for a sequence of {} tokens",
            tokens.len()
        )));
    }
    if prompt_len == tokens.len() {
        return Ok(Vec::new());
    }
    let v = p.cfg.vocab;
    let logits = forward_lm(p, tokens)?;
    let mut out = Vec::with_capacity(tokens.len() - prompt_len);
    for pos in prompt_len..tokens.len() {
        let row: Vec<f64> = logits[(pos - 1) * v..pos * v].iter().map(|x| x.to_f64()).collect();
        let ld = log_softmax(&row, temperature);
        out.push(ld[tokens[pos] as usize]);
    }
    Ok(out)
}

/// Log-probs at temperature 1 — the model's actual distribution.
pub fn log_probs<R: Real>(p: &ParamSet<R>, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>> {
    log_probs_with_temperature(p, tokens, prompt_len, 1.0)
}

/// Critic values aligned with response tokens: entry t is the value of the
/// state *before* emitting response token t, i.e. the scalar output at flat
/// position prompt_len - 1 + t.
pub fn response_values<R: Real>(
    critic: &ParamSet<R>,
    tokens: &[u32],
    prompt_len: usize,
) -> Result<Vec<f64>> {
    if prompt_len == 0 || prompt_len > tokens.len() {
        return Err(Error::Config(format!(
            "prompt_len {prompt_len} invalid for a sequence of {} tokens",
            tokens.len()
        )));
    }
    let vals = forward_value(critic, tokens)?;
    Ok(vals[prompt_len - 1..tokens.len() - 1].iter().map(|x| x.to_f64()).collect())
}

/// KL(p ‖ q) for two log-distributions over the same support.
pub fn kl_from_logdists(p_log: &[f64], q_log: &[f64]) -> f64 {
    debug_assert_eq!(p_log.len(), q_log.len());
    let mut kl = 0.0;
    for (&lp, &lq) in p_log.iter().zip(q_log) {
        kl += det::exp(lp) * (lp - lq);
    }
    kl
}

/// KL(p ‖ q) for two probability vectors. Terms with p_i = 0 contribute 0.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (det::ln(pi) - det::ln(qi));
        }
    }
    kl
}

/// Shannon entropy of a log-distribution, in nats.
pub fn entropy_from_logdist(ld: &[f64]) -> f64 {
    let mut h = 0.0;
    for &l in ld {
        h -= det::exp(l) * l;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig, ParamSet};
    use crate::rng::Domain;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 24,
            head: HeadKind::Lm,
            tied_lm: false,
        }
    }

    /// Model whose logits are a constant vector regardless of input: zero
    /// head weights, logits = head bias.
    fn const_logit_model(bias: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::init(&cfg(), 1).unwrap();
        p.head_b.copy_from_slice(bias);
        p
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        // all-zero logits: every token ties, argmax must return id 0
        let p: ParamSet<f64> = ParamSet::init(&cfg(), 1).unwrap();
        let mut r = rng::stream(0, Domain::Rollout, &[0]);
        let s = sample(&p, &[1, 2], 4, 0.0, 2, &mut r, false).unwrap();
        assert_eq!(s.response, vec![0, 0, 0, 0]);
        assert!(s.logps.iter().all(|&l| l == 0.0));
        // a bumped logit moves the argmax
        let mut bias = vec![0.0; 16];
        bias[7] = 0.1;
        let p = const_logit_model(&bias);
        let mut r = rng::stream(0, Domain::Rollout, &[1]);
        let s = sample(&p, &[1, 2], 3, 0.0, 2, &mut r, false).unwrap();
        assert_eq!(s.response, vec![7, 7, 7]);
    }

    #[test]
    fn sampling_frequencies_match_the_softmax() {
        // logits chosen so softmax ≈ (0.2, 0.3, 0.5) on tokens 4,5,6
        let mut bias = vec![-30.0; 16];
        bias[4] = 0.2f64.ln();
        bias[5] = 0.3f64.ln();
        bias[6] = 0.5f64.ln();
        let p = const_logit_model(&bias);
        let n = 10_000;
        let mut counts = [0usize; 16];
        let mut r = rng::stream(7, Domain::Rollout, &[0]);
        for _ in 0..n {
            let s = sample(&p, &[1, 2], 1, 1.0, 2, &mut r, false).unwrap();
            counts[s.response[0] as usize] += 1;
        }
        for (tok, want) in [(4usize, 0.2), (5, 0.3), (6, 0.5)] {
            let got = counts[tok] as f64 / n as f64;
            let sigma = (want * (1.0 - want) / n as f64).sqrt();
            assert!(
                (got - want).abs() < 3.0 * sigma,
                "token {tok}: freq {got} vs {want} (3σ={:.4})",
                3.0 * sigma
            );
        }
        assert_eq!(counts[0] + counts[1] + counts[2] + counts[3], 0);
    }

    #[test]
    fn recorded_logps_match_full_sequence_recomputation_exactly() {
        let p: ParamSet<f64> = {
            let mut p = ParamSet::init(&cfg(), 5).unwrap();
            for (i, w) in p.head_w.as_mut().unwrap().a.iter_mut().enumerate() {
                *w = ((i % 9) as f64 - 4.0) * 0.05;
            }
            p
        };
        let prompt = [1u32, 4, 7];
        let mut r = rng::stream(3, Domain::Rollout, &[42]);
        let s = sample(&p, &prompt, 8, 0.8, 99, &mut r, true).unwrap();
        assert!(!s.response.is_empty());
        let mut full = prompt.to_vec();
        full.extend_from_slice(&s.response);
        // bit-exact: the incremental and full-sequence forwards agree
        let again = log_probs_with_temperature(&p, &full, prompt.len(), 0.8).unwrap();
        assert_eq!(s.logps, again);
        // captured distributions are consistent with the chosen-token logps
        for (j, d) in s.dists.iter().enumerate() {
            assert_eq!(d[s.response[j] as usize], s.logps[j]);
            let mass: f64 = d.iter().map(|&l| det::exp(l)).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
        // and temperature 1 is the public log_probs
        let t1a = log_probs(&p, &full, prompt.len()).unwrap();
        let t1b = log_probs_with_temperature(&p, &full, prompt.len(), 1.0).unwrap();
        assert_eq!(t1a, t1b);
    }

    #[test]
    fn eos_stops_generation() {
        let mut bias = vec![-30.0; 16];
        bias[2] = 5.0; // eos overwhelmingly likely
        let p = const_logit_model(&bias);
        let mut r = rng::stream(0, Domain::Rollout, &[9]);
        let s = sample(&p, &[1, 3], 10, 1.0, 2, &mut r, false).unwrap();
        assert_eq!(s.response, vec![2]);
    }

    #[test]
    fn generation_respects_max_len() {
        let p: ParamSet<f64> = ParamSet::init(&cfg(), 1).unwrap();
        let prompt = vec![1u32; 23]; // max_len is 24: room for exactly one token
        let mut r = rng::stream(0, Domain::Rollout, &[3]);
        let s = sample(&p, &prompt, 10, 1.0, 99, &mut r, false).unwrap();
        assert_eq!(s.response.len(), 1);
        // a prompt already at max_len generates nothing
        let full = vec![1u32; 24];
        let s = sample(&p, &full, 10, 1.0, 99, &mut r, false).unwrap();
        assert!(s.response.is_empty());
    }

    #[test]
    fn temperature_rescales_the_distribution() {
        let mut bias = vec![0.0; 16];
        for (i, b) in bias.iter_mut().enumerate() {
            *b = (i as f64) * 0.1;
        }
        let p = const_logit_model(&bias);
        let tokens: Vec<u32> = vec![1, 2, 5, 9];
        let lp = log_probs_with_temperature(&p, &tokens, 2, 0.7).unwrap();
        // hand-computed: softmax(bias/0.7)
        let ld = log_softmax(&bias, 0.7);
        assert_eq!(lp, vec![ld[5], ld[9]]);
    }

    #[test]
    fn kl_and_entropy_hand_values() {
        // KL((.5,.5) ‖ (.9,.1)) = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = ln(5/3)
        let kl = kl_categorical(&[0.5, 0.5], &[0.9, 0.1]);
        assert!((kl - (5.0f64 / 3.0).ln()).abs() < 1e-12, "kl={kl}");
        // from log-space, same value
        let lp: Vec<f64> = [0.5f64, 0.5].iter().map(|x| x.ln()).collect();
        let lq: Vec<f64> = [0.9f64, 0.1].iter().map(|x| x.ln()).collect();
        assert!((kl_from_logdists(&lp, &lq) - kl).abs() < 1e-12);
        // KL to itself is ~0
        assert!(kl_from_logdists(&lq, &lq).abs() < 1e-15);
        // uniform entropy = ln V
        let uni = vec![(1.0f64 / 16.0).ln(); 16];
        assert!((entropy_from_logdist(&uni) - 16.0f64.ln()).abs() < 1e-12);
        // zero-mass terms contribute nothing
        assert_eq!(kl_categorical(&[0.0, 1.0], &[0.5, 0.5]), 1.0f64.ln() - 0.5f64.ln());
    }

    #[test]
    fn response_values_align_with_pre_emission_states() {
        let mut p: ParamSet<f64> =
            ParamSet::init(&cfg(), 8).unwrap().with_head(HeadKind::Value).unwrap();
        for (i, w) in p.head_w.as_mut().unwrap().a.iter_mut().enumerate() {
            *w = 0.1 * (i as f64 + 1.0);
        }
        let tokens = [1u32, 5, 3, 9, 2];
        let prompt_len = 2;
        let vals = forward_value(&p, &tokens).unwrap();
        let rv = response_values(&p, &tokens, prompt_len).unwrap();
        assert_eq!(rv.len(), 3); // three response tokens
        assert_eq!(rv, vals[1..4].to_vec()); // positions P-1 .. P-1+R-1
        // degenerate: zero-length response
        assert!(response_values(&p, &tokens, 5).unwrap().is_empty());
        assert!(response_values(&p, &tokens, 0).is_err());
        assert!(response_values(&p, &tokens, 6).is_err());
    }
}
