//! Generalized Advantage Estimation over a finite response, with the value
//! of the state after the last token defined as zero.

use crate::error::{Error, Result};

/// Advantages and returns for one response.
///
/// δ_t = r_t + γ·V_{t+1} − V_t  (V_T = 0),  A_t = δ_t + γλ·A_{t+1},
/// returns_t = A_t + V_t. `rewards[t]` is the reward credited to response
/// token t — for terminal-reward episodes every entry but the last is zero.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Config(format!(
            "gae: {} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    for (name, x) in [("gamma", gamma), ("lambda", lambda)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Config(format!("gae: {name} must be in [0,1], got {x}")));
        }
    }
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let v_next = if t + 1 < t_len { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * v_next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};

    /// Direct double sum: A_t = Σ_{l=0..} (γλ)^l · δ_{t+l}.
    fn gae_brute(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let t_len = rewards.len();
        let delta: Vec<f64> = (0..t_len)
            .map(|t| {
                let v_next = if t + 1 < t_len { values[t + 1] } else { 0.0 };
                rewards[t] + gamma * v_next - values[t]
            })
            .collect();
        (0..t_len)
            .map(|t| {
                let mut a = 0.0;
                for l in 0..t_len - t {
                    a += (gamma * lambda).powi(l as i32) * delta[t + l];
                }
                a
            })
            .collect()
    }

    #[test]
    fn hand_example() {
        // T=2, γ=1, λ=0.95, r=[0,1], V=[0.5,0.25]:
        //   δ_1 = 1 − 0.25 = 0.75,         A_1 = 0.75
        //   δ_0 = 0 + 0.25 − 0.5 = −0.25,  A_0 = −0.25 + 0.95·0.75 = 0.4625
        let (a, ret) = gae(&[0.0, 1.0], &[0.5, 0.25], 1.0, 0.95).unwrap();
        assert!((a[1] - 0.75).abs() < 1e-15);
        assert!((a[0] - 0.4625).abs() < 1e-15);
        assert!((ret[0] - (0.4625 + 0.5)).abs() < 1e-15);
        assert!((ret[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_double_sum() {
        let mut r = rng::stream(17, Domain::DataGen, &[0]);
        for case in 0..1000 {
            let t_len = 1 + (rng::uniform_range(&mut r, 8) as usize);
            let rewards: Vec<f64> =
                (0..t_len).map(|_| 4.0 * rng::uniform_f64(&mut r) - 2.0).collect();
            let values: Vec<f64> =
                (0..t_len).map(|_| 4.0 * rng::uniform_f64(&mut r) - 2.0).collect();
            let gamma = rng::uniform_f64(&mut r);
            let lambda = rng::uniform_f64(&mut r);
            let (a, _) = gae(&rewards, &values, gamma, lambda).unwrap();
            let want = gae_brute(&rewards, &values, gamma, lambda);
            for (i, (x, y)) in a.iter().zip(&want).enumerate() {
                assert!(
                    (x - y).abs() <= 1e-12,
                    "case {case}, t={i}: {x} vs {y} (T={t_len}, γ={gamma}, λ={lambda})"
                );
            }
        }
    }

    /// With inputs on a dyadic grid every intermediate is exact, so the λ
    /// limits must hold bitwise, not just approximately.
    #[test]
    fn lambda_limits_are_exact_on_dyadic_inputs() {
        let mut r = rng::stream(18, Domain::DataGen, &[1]);
        let dyadic = |r: &mut _| (rng::uniform_range(r, 33) as f64 - 16.0) / 8.0; // multiples of 1/8
        for _ in 0..200 {
            let t_len = 1 + (rng::uniform_range(&mut r, 8) as usize);
            let rewards: Vec<f64> = (0..t_len).map(|_| dyadic(&mut r)).collect();
            let values: Vec<f64> = (0..t_len).map(|_| dyadic(&mut r)).collect();

            // λ = 0: A_t ≡ δ_t
            let (a0, _) = gae(&rewards, &values, 1.0, 0.0).unwrap();
            for t in 0..t_len {
                let v_next = if t + 1 < t_len { values[t + 1] } else { 0.0 };
                assert_eq!(a0[t], rewards[t] + v_next - values[t]);
            }

            // λ = 1, γ = 1: telescoping gives A_t = Σ_{l≥t} r_l − V_t
            let (a1, _) = gae(&rewards, &values, 1.0, 1.0).unwrap();
            for t in 0..t_len {
                let tail: f64 = rewards[t..].iter().rev().sum();
                assert_eq!(a1[t], tail - values[t], "t={t}");
            }
        }
    }

    #[test]
    fn input_validation() {
        assert!(gae(&[1.0], &[1.0, 2.0], 1.0, 0.95).is_err());
        assert!(gae(&[1.0], &[1.0], 1.1, 0.95).is_err());
        assert!(gae(&[1.0], &[1.0], 1.0, -0.1).is_err());
        let (a, ret) = gae(&[], &[], 1.0, 0.95).unwrap();
        assert!(a.is_empty() && ret.is_empty());
    }
}
