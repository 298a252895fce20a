//! Reverse-mode gradients, mirroring `forward` step for step.

use crate::det::{self, Real};
use crate::error::Result;

use super::forward::{act_deriv, Trace};
use super::{ModelConfig, ParamSet};

/// d(loss)/d(x) for one LayerNorm position, plus parameter grads.
///
/// With x̂ = (x−μ)·rstd and y = x̂·g + b:
///   dx = rstd · (dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂)),  dx̂ = dy·g
fn layer_norm_backward<R: Real>(
    x: &[R],
    mu: R,
    rstd: R,
    g: &[R],
    dy: &[R],
    dx: &mut [R],
    dg: &mut [R],
    db: &mut [R],
) {
    let d = x.len();
    let inv_d = R::from_f64(1.0 / d as f64);
    let mut m1 = R::ZERO;
    let mut m2 = R::ZERO;
    for j in 0..d {
        let xhat = (x[j] - mu) * rstd;
        let dxhat = dy[j] * g[j];
        m1 += dxhat;
        m2 += dxhat * xhat;
        dg[j] += dy[j] * xhat;
        db[j] += dy[j];
    }
    m1 *= inv_d;
    m2 *= inv_d;
    for j in 0..d {
        let xhat = (x[j] - mu) * rstd;
        let dxhat = dy[j] * g[j];
        dx[j] += rstd * (dxhat - m1 - xhat * m2);
    }
}

/// Backpropagate d(loss)/d(head outputs) through the whole network.
///
/// `d_out` is T×out_dim, matching `Trace::out`. Returns gradients shaped
/// exactly like the parameters (a tied lm head accumulates into `embed.tok`).
pub fn backward<R: Real>(p: &ParamSet<R>, tr: &Trace<R>, d_out: &[R]) -> Result<ParamSet<R>> {
    let cfg: &ModelConfig = &p.cfg;
    let t_len = tr.tokens.len();
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let out_dim = cfg.out_dim();
    assert_eq!(d_out.len(), t_len * out_dim, "d_out shape mismatch");

    let mut g = ParamSet::<R>::zeros(cfg)?;

    // head
    let mut d_outf = vec![R::ZERO; t_len * d];
    {
        let (head_w, d_head_w_is_tok) = match &p.head_w {
            Some(w) => (w, false),
            None => (&p.tok, true),
        };
        for i in 0..t_len {
            let dy = &d_out[i * out_dim..(i + 1) * out_dim];
            head_w.matvec_t_acc(dy, &mut d_outf[i * d..(i + 1) * d]);
            for (dbj, &dyj) in g.head_b.iter_mut().zip(dy) {
                *dbj += dyj;
            }
            let of = &tr.out_f[i * d..(i + 1) * d];
            if d_head_w_is_tok {
                g.tok.outer_acc(dy, of);
            } else {
                g.head_w.as_mut().unwrap().outer_acc(dy, of);
            }
        }
    }

    // final norm
    let mut dx = vec![R::ZERO; t_len * d];
    for i in 0..t_len {
        layer_norm_backward(
            &tr.x_fin[i * d..(i + 1) * d],
            tr.mu_f[i],
            tr.rstd_f[i],
            &p.fin_g,
            &d_outf[i * d..(i + 1) * d],
            &mut dx[i * d..(i + 1) * d],
            &mut g.fin_g,
            &mut g.fin_b,
        );
    }

    // blocks, in reverse
    for (bi, (bp, bt)) in p.blocks.iter().zip(&tr.blocks).enumerate().rev() {
        let gb = &mut g.blocks[bi];

        // ---- MLP branch (dx holds the gradient at the block output) ----
        let mut d_out2 = vec![R::ZERO; t_len * d];
        for i in 0..t_len {
            let dxi = &dx[i * d..(i + 1) * d];
            for (dbj, &dj) in gb.fc2_b.iter_mut().zip(dxi) {
                *dbj += dj;
            }
            let mut d_a1 = vec![R::ZERO; f];
            bp.fc2_w.matvec_t_acc(dxi, &mut d_a1);
            gb.fc2_w.outer_acc(dxi, &bt.a1[i * f..(i + 1) * f]);
            let mut d_h1 = d_a1;
            for (dh, &h) in d_h1.iter_mut().zip(&bt.h1[i * f..(i + 1) * f]) {
                *dh *= act_deriv(h);
            }
            bp.fc1_w.matvec_t_acc(&d_h1, &mut d_out2[i * d..(i + 1) * d]);
            gb.fc1_w.outer_acc(&d_h1, &bt.out2[i * d..(i + 1) * d]);
            for (dbj, &dj) in gb.fc1_b.iter_mut().zip(&d_h1) {
                *dbj += dj;
            }
        }
        // residual passthrough + ln2 branch
        let mut d_xmid = dx.clone();
        for i in 0..t_len {
            layer_norm_backward(
                &bt.x_mid[i * d..(i + 1) * d],
                bt.mu2[i],
                bt.rstd2[i],
                &bp.ln2_g,
                &d_out2[i * d..(i + 1) * d],
                &mut d_xmid[i * d..(i + 1) * d],
                &mut gb.ln2_g,
                &mut gb.ln2_b,
            );
        }

        // ---- attention branch ----
        let mut d_ctx = vec![R::ZERO; t_len * d];
        for i in 0..t_len {
            let dxi = &d_xmid[i * d..(i + 1) * d];
            bp.wo.matvec_t_acc(dxi, &mut d_ctx[i * d..(i + 1) * d]);
            gb.wo.outer_acc(dxi, &bt.ctx[i * d..(i + 1) * d]);
        }
        let dh = cfg.head_dim();
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());
        let mut d_q = vec![R::ZERO; t_len * d];
        let mut d_k = vec![R::ZERO; t_len * d];
        let mut d_v = vec![R::ZERO; t_len * d];
        for (h, ph) in bt.probs.iter().enumerate() {
            let hs = h * dh;
            for i in 0..t_len {
                let dci = &d_ctx[i * d + hs..i * d + hs + dh];
                // dp_ij and the softmax Jacobian, row by row
                let mut dp = vec![R::ZERO; i + 1];
                let mut dot_pd = R::ZERO;
                for (j, dpj) in dp.iter_mut().enumerate() {
                    *dpj = det::dot(dci, &bt.v[j * d + hs..j * d + hs + dh]);
                    dot_pd += ph[i * t_len + j] * *dpj;
                }
                for j in 0..=i {
                    let pij = ph[i * t_len + j];
                    det::axpy(&mut d_v[j * d + hs..j * d + hs + dh], pij, dci);
                    let ds = pij * (dp[j] - dot_pd) * scale;
                    det::axpy(&mut d_q[i * d + hs..i * d + hs + dh], ds, &bt.k[j * d + hs..j * d + hs + dh]);
                    det::axpy(&mut d_k[j * d + hs..j * d + hs + dh], ds, &bt.q[i * d + hs..i * d + hs + dh]);
                }
            }
        }
        let mut d_out1 = vec![R::ZERO; t_len * d];
        for i in 0..t_len {
            let o1 = &bt.out1[i * d..(i + 1) * d];
            let tgt = &mut d_out1[i * d..(i + 1) * d];
            bp.wq.matvec_t_acc(&d_q[i * d..(i + 1) * d], tgt);
            bp.wk.matvec_t_acc(&d_k[i * d..(i + 1) * d], tgt);
            bp.wv.matvec_t_acc(&d_v[i * d..(i + 1) * d], tgt);
            gb.wq.outer_acc(&d_q[i * d..(i + 1) * d], o1);
            gb.wk.outer_acc(&d_k[i * d..(i + 1) * d], o1);
            gb.wv.outer_acc(&d_v[i * d..(i + 1) * d], o1);
        }
        // residual passthrough + ln1 branch → gradient at block input
        let mut d_xin = d_xmid;
        for i in 0..t_len {
            layer_norm_backward(
                &bt.x_in[i * d..(i + 1) * d],
                bt.mu1[i],
                bt.rstd1[i],
                &bp.ln1_g,
                &d_out1[i * d..(i + 1) * d],
                &mut d_xin[i * d..(i + 1) * d],
                &mut gb.ln1_g,
                &mut gb.ln1_b,
            );
        }
        dx = d_xin;
    }

    // embeddings
    for (i, &t) in tr.tokens.iter().enumerate() {
        let dxi = &dx[i * d..(i + 1) * d];
        for (gt, &dj) in g.tok.row_mut(t as usize).iter_mut().zip(dxi) {
            *gt += dj;
        }
        for (gp, &dj) in g.pos.row_mut(i).iter_mut().zip(dxi) {
            *gp += dj;
        }
    }

    Ok(g)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_traced, HeadKind, ModelConfig, ParamSet};
    use crate::rng::{self, Domain};

    fn cfg(head: HeadKind) -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 12,
            head,
            tied_lm: false,
        }
    }

    /// Fresh model with every tensor (heads included) given nonzero values, so
    /// gradients flow everywhere.
    fn dense_params(head: HeadKind, seed: u64) -> ParamSet<f64> {
        let mut p = ParamSet::init(&cfg(head), seed).unwrap();
        let mut r = rng::stream(seed, Domain::ParamInit, &[99]);
        for name in p.tensor_names() {
            if name.starts_with("head") || name.contains(".b") || name == "final_norm.b" {
                for x in p.tensor_mut(&name).unwrap().iter_mut() {
                    *x += 0.05 * rng::normal(&mut r);
                }
            }
        }
        p
    }

    /// Central finite difference of `loss` wrt every parameter element,
    /// compared against the analytic gradient.
    fn gradcheck<F, G>(p: &ParamSet<f64>, loss: F, d_out_of: G)
    where
        F: Fn(&ParamSet<f64>) -> f64,
        G: Fn(&Trace<f64>) -> Vec<f64>,
    {
        let tr = forward_traced(p, &TOKENS).unwrap();
        let d_out = d_out_of(&tr);
        let g = backward(p, &tr, &d_out).unwrap();

        let h = 1e-4;
        let mut checked = 0usize;
        let mut worst: (f64, String, usize) = (0.0, String::new(), 0);
        let mut pm = p.clone();
        for name in p.tensor_names() {
            let n = p.tensor(&name).unwrap().0.len();
            for idx in 0..n {
                let orig = pm.tensor(&name).unwrap().0[idx];
                pm.tensor_mut(&name).unwrap()[idx] = orig + h;
                let up = loss(&pm);
                pm.tensor_mut(&name).unwrap()[idx] = orig - h;
                let dn = loss(&pm);
                pm.tensor_mut(&name).unwrap()[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = g.tensor(&name).unwrap().0[idx];
                let err = (an - fd).abs();
                let tol = 1e-8 + 1e-3 * an.abs().max(fd.abs());
                assert!(
                    err <= tol,
                    "grad mismatch {name}[{idx}]: analytic {an}, fd {fd}, err {err}"
                );
                if err > worst.0 {
                    worst = (err, name.clone(), idx);
                }
                checked += 1;
            }
        }
        assert!(checked > 500, "checked only {checked} elements");
        // keep the worst case visible when running with --nocapture
        println!("gradcheck: {checked} elements, worst |Δ|={:.3e} at {}[{}]", worst.0, worst.1, worst.2);
    }

    const TOKENS: [u32; 6] = [1, 5, 3, 9, 2, 7];

    fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|&x| x / z).collect()
    }

    #[test]
    fn gradcheck_lm_cross_entropy() {
        // mean next-token CE over positions 0..T-1 (target = next token)
        let p = dense_params(HeadKind::Lm, 41);
        let v = 16usize;
        let n = (TOKENS.len() - 1) as f64;
        let loss = |p: &ParamSet<f64>| -> f64 {
            let out = crate::model::forward_lm(p, &TOKENS).unwrap();
            let mut l = 0.0;
            for i in 0..TOKENS.len() - 1 {
                let probs = softmax(&out[i * v..(i + 1) * v]);
                l -= probs[TOKENS[i + 1] as usize].ln();
            }
            l / n
        };
        let d_out = |tr: &Trace<f64>| -> Vec<f64> {
            let mut d = vec![0.0; TOKENS.len() * v];
            for i in 0..TOKENS.len() - 1 {
                let probs = softmax(&tr.out[i * v..(i + 1) * v]);
                for j in 0..v {
                    d[i * v + j] = probs[j] / n;
                }
                d[i * v + TOKENS[i + 1] as usize] -= 1.0 / n;
            }
            d
        };
        gradcheck(&p, loss, d_out);
    }

    #[test]
    fn gradcheck_value_mse() {
        let p = dense_params(HeadKind::Value, 42);
        let tgts: [f64; 6] = [0.3, -0.7, 1.1, 0.0, 0.5, -0.2];
        let n = TOKENS.len() as f64;
        let loss = |p: &ParamSet<f64>| -> f64 {
            let vals = crate::model::forward_value(p, &TOKENS).unwrap();
            vals.iter().zip(&tgts).map(|(v, t)| (v - t) * (v - t)).sum::<f64>() / n
        };
        let d_out = |tr: &Trace<f64>| -> Vec<f64> {
            tr.out.iter().zip(&tgts).map(|(v, t)| 2.0 * (v - t) / n).collect()
        };
        gradcheck(&p, loss, d_out);
    }

    #[test]
    fn gradcheck_reward_score() {
        // pairwise-style objective on a single sequence: softplus(-r_last)
        let p = dense_params(HeadKind::Reward, 43);
        let loss = |p: &ParamSet<f64>| -> f64 {
            let r = crate::model::forward_reward(p, &TOKENS).unwrap();
            (1.0 + (-r).exp()).ln()
        };
        let d_out = |tr: &Trace<f64>| -> Vec<f64> {
            let mut d = vec![0.0; TOKENS.len()];
            let r = *tr.out.last().unwrap();
            // d softplus(-r)/dr = -sigmoid(-r)
            d[TOKENS.len() - 1] = -1.0 / (1.0 + r.exp());
            d
        };
        gradcheck(&p, loss, d_out);
    }

    #[test]
    fn gradcheck_tied_lm_head() {
        // the tied head routes head gradients into embed.tok; FD must agree
        let mut c = cfg(HeadKind::Lm);
        c.tied_lm = true;
        let p: ParamSet<f64> = ParamSet::init(&c, 44).unwrap();
        let v = 16usize;
        let loss = |p: &ParamSet<f64>| -> f64 {
            let out = crate::model::forward_lm(p, &TOKENS).unwrap();
            let probs = softmax(&out[(TOKENS.len() - 1) * v..]);
            -probs[4].ln()
        };
        let d_out = |tr: &Trace<f64>| -> Vec<f64> {
            let mut d = vec![0.0; TOKENS.len() * v];
            let i = TOKENS.len() - 1;
            let probs = softmax(&tr.out[i * v..(i + 1) * v]);
            for j in 0..v {
                d[i * v + j] = probs[j];
            }
            d[i * v + 4] -= 1.0;
            d
        };
        gradcheck(&p, loss, d_out);
    }

    #[test]
    fn zero_upstream_gradient_means_zero_parameter_gradient() {
        let p = dense_params(HeadKind::Lm, 45);
        let tr = forward_traced(&p, &TOKENS).unwrap();
        let g = backward(&p, &tr, &vec![0.0; TOKENS.len() * 16]).unwrap();
        for name in g.tensor_names() {
            assert!(g.tensor(&name).unwrap().0.iter().all(|&x| x == 0.0), "{name} nonzero");
        }
    }
}
