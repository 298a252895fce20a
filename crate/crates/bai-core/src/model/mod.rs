//! A tiny decoder-only transformer, written out by hand.
//!
//! Pre-norm blocks (LayerNorm → causal multi-head attention → residual,
//! LayerNorm → 2-layer MLP with a sigmoid-gated GELU-like nonlinearity →
//! residual), learned positional embeddings, final norm, and one head:
//! either a language-model projection d→V or a scalar d→1 head used for
//! per-position values and for sequence-level reward scores. Reward and value
//! heads share the trunk topology on purpose, so a critic can be initialized
//! by copying a reward model verbatim.
//!
//! Forward/backward are exact reverse-mode gradients over `det` kernels; the
//! float type is generic so the finite-difference suite can run the whole
//! network in f64 while training runs in f32.

mod backward;
mod cache;
mod forward;
mod sample;

pub use backward::backward;
pub use cache::GenState;
pub use forward::{forward, forward_lm, forward_reward, forward_traced, forward_value, Trace};
pub use sample::{
    entropy_from_logdist, kl_categorical, kl_from_logdists, log_probs, log_probs_with_temperature,
    log_softmax, response_values, sample, SampleResult,
};

use serde::{Deserialize, Serialize};

use crate::det::Real;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Checkpoint, Dtype, Tensor, TensorData};

pub const LN_EPS: f64 = 1e-5;
/// MLP hidden width as a multiple of d_model.
pub const FFN_MULT: usize = 4;
/// Trunk init scale.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Lm,
    Value,
    Reward,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Lm => "lm",
            HeadKind::Value => "value",
            HeadKind::Reward => "reward",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(HeadKind::Lm),
            "value" => Ok(HeadKind::Value),
            "reward" => Ok(HeadKind::Reward),
            other => Err(Error::Format(format!("unknown head kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub head: HeadKind,
    /// Tie the LM projection to the token embedding (no separate head.w).
    pub tied_lm: bool,
}

/// The stock desk-scale architecture: big enough to learn the arithmetic
/// task, small enough that a full pipeline runs in minutes on a laptop.
impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 160,
            head: HeadKind::Lm,
            tied_lm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 8 {
            return Err(Error::Config(format!("vocab must be >= 8, got {}", self.vocab)));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.tied_lm && self.head != HeadKind::Lm {
            return Err(Error::Config("tied_lm only makes sense with an lm head".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        FFN_MULT * self.d_model
    }

    /// Head output width: V for lm, 1 for value/reward.
    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::Lm => self.vocab,
            _ => 1,
        }
    }

    pub fn arch_id(&self) -> String {
        format!(
            "tiny-tfmr:v{}:d{}:l{}:h{}:m{}:ffn{}",
            self.vocab,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_len,
            self.ffn_dim()
        )
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<R> {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, a: vec![R::ZERO; rows * cols] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[R] {
        &self.a[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        &mut self.a[r * self.cols..(r + 1) * self.cols]
    }

    /// out[r] = dot(row_r, x)
    pub fn matvec(&self, x: &[R], out: &mut [R]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            out[r] = crate::det::dot(self.row(r), x);
        }
    }

    /// out += W^T · dy
    pub fn matvec_t_acc(&self, dy: &[R], out: &mut [R]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            crate::det::axpy(out, dy[r], self.row(r));
        }
    }

    /// W += dy ⊗ x (rank-1 accumulate)
    pub fn outer_acc(&mut self, dy: &[R], x: &[R]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            crate::det::axpy(self.row_mut(r), dy[r], x);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<R> {
    pub ln1_g: Vec<R>,
    pub ln1_b: Vec<R>,
    pub wq: Mat<R>,
    pub wk: Mat<R>,
    pub wv: Mat<R>,
    pub wo: Mat<R>,
    pub ln2_g: Vec<R>,
    pub ln2_b: Vec<R>,
    pub fc1_w: Mat<R>,
    pub fc1_b: Vec<R>,
    pub fc2_w: Mat<R>,
    pub fc2_b: Vec<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<R> {
    pub cfg: ModelConfig,
    pub tok: Mat<R>,
    pub pos: Mat<R>,
    pub blocks: Vec<BlockParams<R>>,
    pub fin_g: Vec<R>,
    pub fin_b: Vec<R>,
    /// None only for a tied lm head (the projection reuses `tok`).
    pub head_w: Option<Mat<R>>,
    pub head_b: Vec<R>,
}

impl<R: Real> ParamSet<R> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let out = cfg.out_dim();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: vec![R::ZERO; d],
                ln1_b: vec![R::ZERO; d],
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                ln2_g: vec![R::ZERO; d],
                ln2_b: vec![R::ZERO; d],
                fc1_w: Mat::zeros(f, d),
                fc1_b: vec![R::ZERO; f],
                fc2_w: Mat::zeros(d, f),
                fc2_b: vec![R::ZERO; d],
            })
            .collect();
        Ok(ParamSet {
            tok: Mat::zeros(cfg.vocab, d),
            pos: Mat::zeros(cfg.max_len, d),
            blocks,
            fin_g: vec![R::ZERO; d],
            fin_b: vec![R::ZERO; d],
            head_w: if cfg.tied_lm { None } else { Some(Mat::zeros(out, d)) },
            head_b: vec![R::ZERO; out],
            cfg: cfg.clone(),
        })
    }

    /// Fresh model: trunk weights ~ Normal(0, 0.02), norms at identity, heads
    /// zero (so an untrained lm head emits exactly uniform logits).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = rng::stream(seed, Domain::ParamInit, &[]);
        let mut draw = |m: &mut Mat<R>| {
            for x in m.a.iter_mut() {
                *x = R::from_f64(INIT_STD * rng::normal(&mut rng));
            }
        };
        draw(&mut p.tok);
        draw(&mut p.pos);
        for b in p.blocks.iter_mut() {
            draw(&mut b.wq);
            draw(&mut b.wk);
            draw(&mut b.wv);
            draw(&mut b.wo);
            draw(&mut b.fc1_w);
            draw(&mut b.fc2_w);
            for g in b.ln1_g.iter_mut().chain(b.ln2_g.iter_mut()) {
                *g = R::ONE;
            }
        }
        for g in p.fin_g.iter_mut() {
            *g = R::ONE;
        }
        // heads stay zero
        Ok(p)
    }

    /// Same trunk, different head. A value↔reward conversion copies the scalar
    /// head verbatim (that is how the critic inherits the reward model); any
    /// change of head width zero-initializes the new head.
    pub fn with_head(&self, head: HeadKind) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.head = head;
        cfg.tied_lm = cfg.tied_lm && head == HeadKind::Lm;
        let mut out = Self::zeros(&cfg)?;
        out.tok = self.tok.clone();
        out.pos = self.pos.clone();
        out.blocks = self.blocks.clone();
        out.fin_g = self.fin_g.clone();
        out.fin_b = self.fin_b.clone();
        let same_width = self.cfg.out_dim() == cfg.out_dim();
        if same_width && !self.cfg.tied_lm {
            out.head_w = self.head_w.clone();
            out.head_b = self.head_b.clone();
        }
        Ok(out)
    }

    /// Deterministic tensor-name list for this architecture.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embed.pos".to_string(), "embed.tok".to_string()];
        for i in 0..self.cfg.n_layers {
            for leaf in
                ["attn.wk", "attn.wo", "attn.wq", "attn.wv", "ln1.b", "ln1.g", "ln2.b", "ln2.g", "mlp.fc1.b", "mlp.fc1.w", "mlp.fc2.b", "mlp.fc2.w"]
            {
                names.push(format!("blocks.{i}.{leaf}"));
            }
        }
        names.push("final_norm.b".into());
        names.push("final_norm.g".into());
        names.push("head.b".into());
        if !self.cfg.tied_lm {
            names.push("head.w".into());
        }
        names
    }

    fn parse_name(&self, name: &str) -> Option<(usize, &'static str)> {
        // returns (block index, leaf) for block tensors
        let rest = name.strip_prefix("blocks.")?;
        let (idx, leaf) = rest.split_once('.')?;
        let i: usize = idx.parse().ok()?;
        let leaf = match leaf {
            "attn.wq" => "wq",
            "attn.wk" => "wk",
            "attn.wv" => "wv",
            "attn.wo" => "wo",
            "ln1.g" => "ln1.g",
            "ln1.b" => "ln1.b",
            "ln2.g" => "ln2.g",
            "ln2.b" => "ln2.b",
            "mlp.fc1.w" => "fc1.w",
            "mlp.fc1.b" => "fc1.b",
            "mlp.fc2.w" => "fc2.w",
            "mlp.fc2.b" => "fc2.b",
            _ => return None,
        };
        Some((i, leaf))
    }

    /// (data, shape) for a named tensor.
    pub fn tensor(&self, name: &str) -> Option<(&[R], Vec<usize>)> {
        match name {
            "embed.tok" => Some((&self.tok.a, vec![self.tok.rows, self.tok.cols])),
            "embed.pos" => Some((&self.pos.a, vec![self.pos.rows, self.pos.cols])),
            "final_norm.g" => Some((&self.fin_g, vec![self.fin_g.len()])),
            "final_norm.b" => Some((&self.fin_b, vec![self.fin_b.len()])),
            "head.w" => self.head_w.as_ref().map(|m| (&m.a[..], vec![m.rows, m.cols])),
            "head.b" => Some((&self.head_b, vec![self.head_b.len()])),
            _ => {
                let (i, leaf) = self.parse_name(name)?;
                let b = self.blocks.get(i)?;
                let (v, shape): (&[R], Vec<usize>) = match leaf {
                    "wq" => (&b.wq.a, vec![b.wq.rows, b.wq.cols]),
                    "wk" => (&b.wk.a, vec![b.wk.rows, b.wk.cols]),
                    "wv" => (&b.wv.a, vec![b.wv.rows, b.wv.cols]),
                    "wo" => (&b.wo.a, vec![b.wo.rows, b.wo.cols]),
                    "ln1.g" => (&b.ln1_g, vec![b.ln1_g.len()]),
                    "ln1.b" => (&b.ln1_b, vec![b.ln1_b.len()]),
                    "ln2.g" => (&b.ln2_g, vec![b.ln2_g.len()]),
                    "ln2.b" => (&b.ln2_b, vec![b.ln2_b.len()]),
                    "fc1.w" => (&b.fc1_w.a, vec![b.fc1_w.rows, b.fc1_w.cols]),
                    "fc1.b" => (&b.fc1_b, vec![b.fc1_b.len()]),
                    "fc2.w" => (&b.fc2_w.a, vec![b.fc2_w.rows, b.fc2_w.cols]),
                    "fc2.b" => (&b.fc2_b, vec![b.fc2_b.len()]),
                    _ => return None,
                };
                Some((v, shape))
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [R]> {
        match name {
            "embed.tok" => Some(&mut self.tok.a),
            "embed.pos" => Some(&mut self.pos.a),
            "final_norm.g" => Some(&mut self.fin_g),
            "final_norm.b" => Some(&mut self.fin_b),
            "head.w" => self.head_w.as_mut().map(|m| &mut m.a[..]),
            "head.b" => Some(&mut self.head_b),
            _ => {
                let (i, leaf) = self.parse_name(name)?;
                let b = self.blocks.get_mut(i)?;
                Some(match leaf {
                    "wq" => &mut b.wq.a,
                    "wk" => &mut b.wk.a,
                    "wv" => &mut b.wv.a,
                    "wo" => &mut b.wo.a,
                    "ln1.g" => &mut b.ln1_g,
                    "ln1.b" => &mut b.ln1_b,
                    "ln2.g" => &mut b.ln2_g,
                    "ln2.b" => &mut b.ln2_b,
                    "fc1.w" => &mut b.fc1_w.a,
                    "fc1.b" => &mut b.fc1_b,
                    "fc2.w" => &mut b.fc2_w.a,
                    "fc2.b" => &mut b.fc2_b,
                    _ => return None,
                })
            }
        }
    }

    /// Element-wise accumulate: self += other. Shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        for name in self.tensor_names() {
            let src: Vec<R> = other.tensor(&name).expect("same arch").0.to_vec();
            let dst = self.tensor_mut(&name).expect("same arch");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    /// Element-wise scale: self *= s.
    pub fn scale(&mut self, s: f64) {
        let s = R::from_f64(s);
        for name in self.tensor_names() {
            for x in self.tensor_mut(&name).unwrap().iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn to_checkpoint(&self, role: &str) -> Result<Checkpoint> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("arch".into(), self.cfg.arch_id());
        meta.insert("vocab".into(), self.cfg.vocab.to_string());
        meta.insert("d_model".into(), self.cfg.d_model.to_string());
        meta.insert("n_layers".into(), self.cfg.n_layers.to_string());
        meta.insert("n_heads".into(), self.cfg.n_heads.to_string());
        meta.insert("max_len".into(), self.cfg.max_len.to_string());
        meta.insert("head".into(), self.cfg.head.name().into());
        meta.insert("tied_lm".into(), if self.cfg.tied_lm { "1" } else { "0" }.into());
        meta.insert("role".into(), role.into());
        let mut ckpt = Checkpoint::new(meta);
        for name in self.tensor_names() {
            let (data, shape) = self.tensor(&name).unwrap();
            // de-monomorphized by the Real trait: f32 params store f32, f64 f64
            let t = if std::any::TypeId::of::<R>() == std::any::TypeId::of::<f32>() {
                Tensor::f32(name, shape, data.iter().map(|x| x.to_f64() as f32).collect())
            } else {
                Tensor::f64(name, shape, data.iter().map(|x| x.to_f64()).collect())
            };
            ckpt.insert(t)?;
        }
        Ok(ckpt)
    }

    /// Rebuild parameters from a checkpoint. Dtype converts numerically into R
    /// (f32→f64 is exact; loading f64 into an f32 model rounds).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint meta missing model key '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint meta key '{k}' is not a number")))
        };
        let cfg = ModelConfig {
            vocab: parse_usize("vocab")?,
            d_model: parse_usize("d_model")?,
            n_layers: parse_usize("n_layers")?,
            n_heads: parse_usize("n_heads")?,
            max_len: parse_usize("max_len")?,
            head: HeadKind::parse(get("head")?)?,
            tied_lm: get("tied_lm")? == "1",
        };
        let mut p = Self::zeros(&cfg)?;
        for name in p.tensor_names() {
            let want_shape = p.tensor(&name).unwrap().1;
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))?;
            if t.shape != want_shape {
                return Err(Error::Format(format!(
                    "tensor '{name}': shape {:?}, architecture wants {:?}",
                    t.shape, want_shape
                )));
            }
            let dst = p.tensor_mut(&name).unwrap();
            match &t.data {
                TensorData::F32(v) => {
                    for (d, s) in dst.iter_mut().zip(v) {
                        *d = R::from_f64(*s as f64);
                    }
                }
                TensorData::F64(v) => {
                    for (d, s) in dst.iter_mut().zip(v) {
                        *d = R::from_f64(*s);
                    }
                }
            }
        }
        if ckpt.n_tensors() != p.tensor_names().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture wants {}",
                ckpt.n_tensors(),
                p.tensor_names().len()
            )));
        }
        Ok(p)
    }

    pub fn storage_dtype() -> Dtype {
        if std::any::TypeId::of::<R>() == std::any::TypeId::of::<f32>() {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 recovers plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with bias correction. Moments live as long as the optimizer — one
/// optimizer per training run.
pub struct Adam<R> {
    cfg: AdamConfig,
    m: ParamSet<R>,
    v: ParamSet<R>,
    b1p: f64,
    b2p: f64,
}

impl<R: Real> Adam<R> {
    pub fn new(like: &ParamSet<R>, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: ParamSet::zeros(&like.cfg).expect("validated cfg"),
            v: ParamSet::zeros(&like.cfg).expect("validated cfg"),
            b1p: 1.0,
            b2p: 1.0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<R>, grads: &ParamSet<R>, lr: f64) {
        self.b1p *= self.cfg.beta1;
        self.b2p *= self.cfg.beta2;
        let c1 = 1.0 / (1.0 - self.b1p);
        let c2 = 1.0 / (1.0 - self.b2p);
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        for name in params.tensor_names() {
            let g: Vec<R> = grads.tensor(&name).expect("same arch").0.to_vec();
            let m = self.m.tensor_mut(&name).unwrap();
            let v = self.v.tensor_mut(&name).unwrap();
            let p = params.tensor_mut(&name).unwrap();
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * gi * gi;
                m[i] = R::from_f64(mi);
                v[i] = R::from_f64(vi);
                let update = (mi * c1) / ((vi * c2).sqrt() + eps);
                let pi = p[i].to_f64();
                p[i] = R::from_f64(pi - lr * (update + weight_decay * pi));
            }
        }
    }
}
