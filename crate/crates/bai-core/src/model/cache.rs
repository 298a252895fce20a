//! Incremental forward for autoregressive generation.
//!
//! `GenState` keeps per-layer attention keys and values and computes one
//! position per `push`. Every per-position operation here replays the exact
//! kernel calls `forward_traced` makes for that position, in the same order,
//! so the returned rows are bit-identical to a full-sequence forward over
//! the same tokens — sampling just stops paying O(T) full passes per token.

use crate::det::{self, Real};
use crate::error::{Error, Result};

use super::forward::{act, layer_norm};
use super::ParamSet;

pub struct GenState<R> {
    /// Cached key rows per layer, flattened T×d.
    k: Vec<Vec<R>>,
    /// Cached value rows per layer, flattened T×d.
    v: Vec<Vec<R>>,
    len: usize,
    // scratch buffers, reused across pushes
    x: Vec<R>,
    out1: Vec<R>,
    qrow: Vec<R>,
    scores: Vec<R>,
    ctx: Vec<R>,
    proj: Vec<R>,
    out2: Vec<R>,
    h1: Vec<R>,
    a1: Vec<R>,
    out_f: Vec<R>,
}

impl<R: Real> GenState<R> {
    pub fn new(p: &ParamSet<R>) -> Self {
        let cfg = &p.cfg;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        GenState {
            k: vec![Vec::with_capacity(cfg.max_len * d); cfg.n_layers],
            v: vec![Vec::with_capacity(cfg.max_len * d); cfg.n_layers],
            len: 0,
            x: vec![R::ZERO; d],
            out1: vec![R::ZERO; d],
            qrow: vec![R::ZERO; d],
            scores: vec![R::ZERO; cfg.max_len],
            ctx: vec![R::ZERO; d],
            proj: vec![R::ZERO; d],
            out2: vec![R::ZERO; d],
            h1: vec![R::ZERO; f],
            a1: vec![R::ZERO; f],
            out_f: vec![R::ZERO; d],
        }
    }

    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feed the next token; returns the head output row at its position.
    pub fn push(&mut self, p: &ParamSet<R>, token: u32) -> Result<Vec<R>> {
        let cfg = &p.cfg;
        if self.len >= cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_len {}",
                self.len + 1,
                cfg.max_len
            )));
        }
        if token as usize >= cfg.vocab {
            return Err(Error::Data(format!("token id {token} out of vocab range {}", cfg.vocab)));
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let i = self.len;

        self.x.copy_from_slice(p.tok.row(token as usize));
        for (r, &e) in self.x.iter_mut().zip(p.pos.row(i)) {
            *r += e;
        }

        for (b, (kc, vc)) in p.blocks.iter().zip(self.k.iter_mut().zip(self.v.iter_mut())) {
            layer_norm(&self.x, &b.ln1_g, &b.ln1_b, &mut self.out1);
            b.wq.matvec(&self.out1, &mut self.qrow);
            let base = i * d;
            kc.resize(base + d, R::ZERO);
            vc.resize(base + d, R::ZERO);
            b.wk.matvec(&self.out1, &mut kc[base..]);
            b.wv.matvec(&self.out1, &mut vc[base..]);

            self.ctx.fill(R::ZERO);
            for h in 0..cfg.n_heads {
                let hs = h * dh;
                let qi = &self.qrow[hs..hs + dh];
                let row = &mut self.scores[..i + 1];
                let mut m = f64::NEG_INFINITY;
                for (j, rj) in row.iter_mut().enumerate() {
                    let s = det::dot(qi, &kc[j * d + hs..j * d + hs + dh]).to_f64() * scale;
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
                let ci = &mut self.ctx[hs..hs + dh];
                for j in 0..=i {
                    det::axpy(ci, self.scores[j], &vc[j * d + hs..j * d + hs + dh]);
                }
            }
            b.wo.matvec(&self.ctx, &mut self.proj);
            for (xi, a) in self.x.iter_mut().zip(&self.proj) {
                *xi += *a;
            }

            layer_norm(&self.x, &b.ln2_g, &b.ln2_b, &mut self.out2);
            b.fc1_w.matvec(&self.out2, &mut self.h1);
            for (hj, &bj) in self.h1.iter_mut().zip(&b.fc1_b) {
                *hj += bj;
            }
            for (aj, &hj) in self.a1.iter_mut().zip(self.h1.iter()) {
                *aj = act(hj);
            }
            b.fc2_w.matvec(&self.a1, &mut self.proj);
            for ((xi, m), &bj) in self.x.iter_mut().zip(&self.proj).zip(&b.fc2_b) {
                *xi += *m + bj;
            }
        }

        layer_norm(&self.x, &p.fin_g, &p.fin_b, &mut self.out_f);
        let head_w = p.head_w.as_ref().unwrap_or(&p.tok);
        let mut out = vec![R::ZERO; cfg.out_dim()];
        head_w.matvec(&self.out_f, &mut out);
        for (oj, &bj) in out.iter_mut().zip(&p.head_b) {
            *oj += bj;
        }
        self.len += 1;
        Ok(out)
    }
}
