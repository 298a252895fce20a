//! Forward pass. One code path serves three head shapes; the traced variant
//! records every intermediate the backward pass needs.

use crate::det::{self, Real};
use crate::error::{Error, Result};

use super::{HeadKind, Mat, ModelConfig, ParamSet, LN_EPS};

/// Per-block activations captured during a traced forward.
pub struct BlockTrace<R> {
    /// Input to the block (= input to ln1), T×d.
    pub x_in: Vec<R>,
    pub mu1: Vec<R>,
    pub rstd1: Vec<R>,
    /// ln1 output, T×d.
    pub out1: Vec<R>,
    pub q: Vec<R>,
    pub k: Vec<R>,
    pub v: Vec<R>,
    /// Attention probabilities, [H][T×T] row-major, zero above the diagonal.
    pub probs: Vec<Vec<R>>,
    /// Concatenated head outputs before the output projection, T×d.
    pub ctx: Vec<R>,
    /// Input to ln2 (after the attention residual), T×d.
    pub x_mid: Vec<R>,
    pub mu2: Vec<R>,
    pub rstd2: Vec<R>,
    pub out2: Vec<R>,
    /// MLP pre-activation, T×f.
    pub h1: Vec<R>,
    /// MLP post-activation, T×f.
    pub a1: Vec<R>,
}

/// Everything backward needs, plus the head outputs.
pub struct Trace<R> {
    pub tokens: Vec<u32>,
    pub blocks: Vec<BlockTrace<R>>,
    /// Input to the final norm, T×d.
    pub x_fin: Vec<R>,
    pub mu_f: Vec<R>,
    pub rstd_f: Vec<R>,
    /// Final-norm output fed to the head, T×d.
    pub out_f: Vec<R>,
    /// Head outputs, T×out_dim.
    pub out: Vec<R>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Config("forward needs at least one token".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Data(format!("token id {t} out of vocab range {}", cfg.vocab)));
    }
    Ok(())
}

/// LayerNorm over the last dim: normalize x then scale/shift by g,b.
/// Returns (mean, rstd) for the trace.
pub(crate) fn layer_norm<R: Real>(x: &[R], g: &[R], b: &[R], out: &mut [R]) -> (R, R) {
    let d = x.len();
    let inv_d = R::from_f64(1.0 / d as f64);
    let mut mu = R::ZERO;
    for &xi in x {
        mu += xi;
    }
    mu *= inv_d;
    let mut var = R::ZERO;
    for &xi in x {
        let c = xi - mu;
        var += c * c;
    }
    var *= inv_d;
    let rstd = R::ONE / (var + R::from_f64(LN_EPS)).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mu) * rstd * g[i] + b[i];
    }
    (mu, rstd)
}

/// The gated activation used in the MLP: x · sigmoid(1.702 x).
#[inline]
pub(crate) fn act<R: Real>(x: R) -> R {
    let xf = x.to_f64();
    R::from_f64(xf * det::sigmoid(1.702 * xf))
}

/// d/dx of `act`: σ(1.702x) + 1.702·x·σ(1.702x)(1−σ(1.702x)).
#[inline]
pub(crate) fn act_deriv<R: Real>(x: R) -> R {
    let xf = x.to_f64();
    let s = det::sigmoid(1.702 * xf);
    R::from_f64(s + 1.702 * xf * s * (1.0 - s))
}

/// Causal softmax-attention for one block, writing ctx (T×d) and the
/// per-head probability matrices.
fn attention<R: Real>(
    cfg: &ModelConfig,
    q: &[R],
    k: &[R],
    v: &[R],
    t_len: usize,
    probs: &mut Vec<Vec<R>>,
    ctx: &mut [R],
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..cfg.n_heads {
        let hs = h * dh;
        let mut p = vec![R::ZERO; t_len * t_len];
        for i in 0..t_len {
            // scores for j <= i only; masked positions are never touched
            let qi = &q[i * d + hs..i * d + hs + dh];
            let row = &mut p[i * t_len..i * t_len + i + 1];
            let mut m = f64::NEG_INFINITY;
            for (j, rj) in row.iter_mut().enumerate() {
                let s = det::dot(qi, &k[j * d + hs..j * d + hs + dh]).to_f64() * scale;
                *rj = R::from_f64(s);
                if s > m {
                    m = s;
                }
            }
            let mut z = 0.0;
            for rj in row.iter_mut() {
                let e = det::exp(rj.to_f64() - m);
                *rj = R::from_f64(e);
                z += e;
            }
            let inv_z = R::from_f64(1.0 / z);
            for rj in row.iter_mut() {
                *rj *= inv_z;
            }
            // ctx[i, hs..hs+dh] = Σ_j p_ij · v[j, hs..hs+dh]
            let ci = &mut ctx[i * d + hs..i * d + hs + dh];
            for j in 0..=i {
                det::axpy(ci, p[i * t_len + j], &v[j * d + hs..j * d + hs + dh]);
            }
        }
        probs.push(p);
    }
}

/// Forward pass with full activation capture.
pub fn forward_traced<R: Real>(p: &ParamSet<R>, tokens: &[u32]) -> Result<Trace<R>> {
    let cfg = &p.cfg;
    check_tokens(cfg, tokens)?;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let f = cfg.ffn_dim();

    let mut x = vec![R::ZERO; t_len * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(p.tok.row(t as usize));
        for (r, &e) in row.iter_mut().zip(p.pos.row(i)) {
            *r += e;
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for b in &p.blocks {
        let x_in = x.clone();
        let mut out1 = vec![R::ZERO; t_len * d];
        let mut mu1 = vec![R::ZERO; t_len];
        let mut rstd1 = vec![R::ZERO; t_len];
        for i in 0..t_len {
            let (m, r) = layer_norm(
                &x_in[i * d..(i + 1) * d],
                &b.ln1_g,
                &b.ln1_b,
                &mut out1[i * d..(i + 1) * d],
            );
            mu1[i] = m;
            rstd1[i] = r;
        }
        let mut q = vec![R::ZERO; t_len * d];
        let mut k = vec![R::ZERO; t_len * d];
        let mut v = vec![R::ZERO; t_len * d];
        for i in 0..t_len {
            let o1 = &out1[i * d..(i + 1) * d];
            b.wq.matvec(o1, &mut q[i * d..(i + 1) * d]);
            b.wk.matvec(o1, &mut k[i * d..(i + 1) * d]);
            b.wv.matvec(o1, &mut v[i * d..(i + 1) * d]);
        }
        let mut probs = Vec::with_capacity(cfg.n_heads);
        let mut ctx = vec![R::ZERO; t_len * d];
        attention(cfg, &q, &k, &v, t_len, &mut probs, &mut ctx);
        for i in 0..t_len {
            let mut attn_out = vec![R::ZERO; d];
            b.wo.matvec(&ctx[i * d..(i + 1) * d], &mut attn_out);
            for (xi, a) in x[i * d..(i + 1) * d].iter_mut().zip(&attn_out) {
                *xi += *a;
            }
        }

        let x_mid = x.clone();
        let mut out2 = vec![R::ZERO; t_len * d];
        let mut mu2 = vec![R::ZERO; t_len];
        let mut rstd2 = vec![R::ZERO; t_len];
        for i in 0..t_len {
            let (m, r) = layer_norm(
                &x_mid[i * d..(i + 1) * d],
                &b.ln2_g,
                &b.ln2_b,
                &mut out2[i * d..(i + 1) * d],
            );
            mu2[i] = m;
            rstd2[i] = r;
        }
        let mut h1 = vec![R::ZERO; t_len * f];
        let mut a1 = vec![R::ZERO; t_len * f];
        for i in 0..t_len {
            let hi = &mut h1[i * f..(i + 1) * f];
            b.fc1_w.matvec(&out2[i * d..(i + 1) * d], hi);
            for (hj, &bj) in hi.iter_mut().zip(&b.fc1_b) {
                *hj += bj;
            }
            for (aj, &hj) in a1[i * f..(i + 1) * f].iter_mut().zip(hi.iter()) {
                *aj = act(hj);
            }
            let mut mlp_out = vec![R::ZERO; d];
            b.fc2_w.matvec(&a1[i * f..(i + 1) * f], &mut mlp_out);
            for ((xi, m), &bj) in x[i * d..(i + 1) * d].iter_mut().zip(&mlp_out).zip(&b.fc2_b) {
                *xi += *m + bj;
            }
        }

        blocks.push(BlockTrace {
            x_in,
            mu1,
            rstd1,
            out1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            mu2,
            rstd2,
            out2,
            h1,
            a1,
        });
    }

    let x_fin = x;
    let mut out_f = vec![R::ZERO; t_len * d];
    let mut mu_f = vec![R::ZERO; t_len];
    let mut rstd_f = vec![R::ZERO; t_len];
    for i in 0..t_len {
        let (m, r) = layer_norm(
            &x_fin[i * d..(i + 1) * d],
            &p.fin_g,
            &p.fin_b,
            &mut out_f[i * d..(i + 1) * d],
        );
        mu_f[i] = m;
        rstd_f[i] = r;
    }

    let out_dim = cfg.out_dim();
    let head_w: &Mat<R> = match &p.head_w {
        Some(w) => w,
        None => &p.tok, // tied lm head
    };
    let mut out = vec![R::ZERO; t_len * out_dim];
    for i in 0..t_len {
        let o = &mut out[i * out_dim..(i + 1) * out_dim];
        head_w.matvec(&out_f[i * d..(i + 1) * d], o);
        for (oj, &bj) in o.iter_mut().zip(&p.head_b) {
            *oj += bj;
        }
    }

    Ok(Trace { tokens: tokens.to_vec(), blocks, x_fin, mu_f, rstd_f, out_f, out })
}

/// Head outputs only (T×out_dim, row-major).
pub fn forward<R: Real>(p: &ParamSet<R>, tokens: &[u32]) -> Result<Vec<R>> {
    Ok(forward_traced(p, tokens)?.out)
}

/// Per-position logits, T×V. Requires an lm head.
pub fn forward_lm<R: Real>(p: &ParamSet<R>, tokens: &[u32]) -> Result<Vec<R>> {
    if p.cfg.head != HeadKind::Lm {
        return Err(Error::Config(format!(
            "lm forward on a model with a {} head",
            p.cfg.head.name()
        )));
    }
    forward(p, tokens)
}

/// Per-position scalar outputs, length T. Requires a scalar head.
pub fn forward_value<R: Real>(p: &ParamSet<R>, tokens: &[u32]) -> Result<Vec<R>> {
    if p.cfg.out_dim() != 1 {
        return Err(Error::Config(format!(
            "value forward on a model with a {} head",
            p.cfg.head.name()
        )));
    }
    forward(p, tokens)
}

/// Sequence score: the scalar output at the last position.
pub fn forward_reward<R: Real>(p: &ParamSet<R>, tokens: &[u32]) -> Result<R> {
    let vals = forward_value(p, tokens)?;
    Ok(*vals.last().expect("nonempty checked"))
}
