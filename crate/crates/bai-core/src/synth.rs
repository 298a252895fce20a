//! The synthetic arithmetic-with-reasoning task.
//!
//! Prompts encode three digits; the answer is their sum mod 10. Two response
//! styles exist: a terse "instruct" style that states the answer immediately,
//! and a "reason" style that first walks a deterministic chain over dedicated
//! chain tokens. The chain is not decoration — its stride is keyed to the
//! answer, so a model trained on reason-style data learns to read the answer
//! off the local chain pattern. Preference data then rewards brevity on a
//! fraction of pairs, which is exactly the miscalibration that makes reward
//! models steer policies toward truncation.
//!
//! Everything here is a pure function of (config, seed, index): datasets are
//! reproducible element by element.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

// Fixed token ids. Digits occupy DIGIT_BASE..DIGIT_BASE+10; everything from
// CHAIN_BASE up to the vocab size is a chain token.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const ANS: u32 = 3;
pub const DIGIT_BASE: u32 = 4;
pub const CHAIN_BASE: u32 = 14;

/// Minimum vocabulary that leaves at least one chain token.
pub const MIN_VOCAB: usize = CHAIN_BASE as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub vocab: usize,
    /// Fraction of preference pairs that prefer a short correct answer over a
    /// long correct one.
    pub brevity_frac: f64,
    /// Among correctness pairs, the fraction rendered in instruct style.
    pub instruct_frac: f64,
    /// Reasoning-chain length is uniform on {chain_min ..= chain_max}.
    pub chain_min: usize,
    pub chain_max: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { vocab: 32, brevity_frac: 0.3, instruct_frac: 0.9, chain_min: 40, chain_max: 80 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab must be >= {MIN_VOCAB} to leave room for chain tokens, got {}",
                self.vocab
            )));
        }
        for (name, f) in [("brevity_frac", self.brevity_frac), ("instruct_frac", self.instruct_frac)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {f}")));
            }
        }
        if self.chain_min == 0 || self.chain_min > self.chain_max {
            return Err(Error::Config(format!(
                "need 0 < chain_min <= chain_max, got {}..{}",
                self.chain_min, self.chain_max
            )));
        }
        Ok(())
    }

    pub fn n_chain(&self) -> usize {
        self.vocab - CHAIN_BASE as usize
    }

    /// Longest episode this config can produce: prompt + chain + [ANS, d, EOS].
    pub fn max_episode_len(&self) -> usize {
        4 + self.chain_max + 3
    }
}

fn check_digit(name: &str, d: u8) -> Result<()> {
    if d > 9 {
        return Err(Error::Data(format!("digit {name}={d} out of range 0..9")));
    }
    Ok(())
}

pub fn digit_token(d: u8) -> u32 {
    debug_assert!(d <= 9);
    DIGIT_BASE + d as u32
}

/// (a + b + c) mod 10.
pub fn answer_of(a: u8, b: u8, c: u8) -> Result<u8> {
    check_digit("a", a)?;
    check_digit("b", b)?;
    check_digit("c", c)?;
    Ok(((a as u32 + b as u32 + c as u32) % 10) as u8)
}

/// [BOS, D(a), D(b), D(c)]
pub fn prompt_tokens(a: u8, b: u8, c: u8) -> Result<Vec<u32>> {
    answer_of(a, b, c)?; // digit validation
    Ok(vec![BOS, digit_token(a), digit_token(b), digit_token(c)])
}

/// Recover (a, b, c) from a well-formed prompt.
pub fn parse_prompt(prompt: &[u32]) -> Result<(u8, u8, u8)> {
    if prompt.len() != 4 || prompt[0] != BOS {
        return Err(Error::Data(format!("malformed prompt {prompt:?}")));
    }
    let digit = |t: u32| -> Result<u8> {
        if (DIGIT_BASE..DIGIT_BASE + 10).contains(&t) {
            Ok((t - DIGIT_BASE) as u8)
        } else {
            Err(Error::Data(format!("prompt token {t} is not a digit token")))
        }
    };
    Ok((digit(prompt[1])?, digit(prompt[2])?, digit(prompt[3])?))
}

/// [ANS, D(answer), EOS] — the terse style.
pub fn instruct_response(a: u8, b: u8, c: u8) -> Result<Vec<u32>> {
    let ans = answer_of(a, b, c)?;
    Ok(vec![ANS, digit_token(ans), EOS])
}

/// The deterministic chain walk for a prompt: position i carries
/// CHAIN_BASE + (start + i·stride) mod n_chain, with
/// start = (3a+5b+7c) mod n_chain and stride = 1 + answer.
///
/// The stride is the answer in disguise: a reader who locks onto the local
/// pattern of the chain can emit the correct digit without ever adding the
/// prompt digits. That is the circuit a reason-style model actually learns,
/// and it is the thing that degrades first when responses get truncated.
pub fn chain_walk(cfg: &GenConfig, a: u8, b: u8, c: u8, len: usize) -> Result<Vec<u32>> {
    let ans = answer_of(a, b, c)? as usize;
    let n = cfg.n_chain();
    let start = (3 * a as usize + 5 * b as usize + 7 * c as usize) % n;
    let stride = 1 + ans;
    Ok((0..len).map(|i| CHAIN_BASE + ((start + i * stride) % n) as u32).collect())
}

/// chain ++ [ANS, D(answer), EOS] — the long style.
pub fn reason_response(cfg: &GenConfig, a: u8, b: u8, c: u8, chain_len: usize) -> Result<Vec<u32>> {
    let mut r = chain_walk(cfg, a, b, c, chain_len)?;
    r.extend(instruct_response(a, b, c)?);
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Instruct,
    Reason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

impl Episode {
    pub fn flat(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }
}

fn draw_digits(r: &mut ChaCha8Rng) -> (u8, u8, u8) {
    (
        rng::uniform_range(r, 10) as u8,
        rng::uniform_range(r, 10) as u8,
        rng::uniform_range(r, 10) as u8,
    )
}

/// Index-keyed episode stream: episode i is a pure function of (seed, style, i).
fn episode_stream(seed: u64, style_id: u64, i: usize) -> ChaCha8Rng {
    rng::stream(seed, Domain::DataGen, &[style_id, i as u64])
}

pub fn gen_sft_dataset(cfg: &GenConfig, style: Style, n: usize, seed: u64) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let style_id = match style {
        Style::Instruct => 0,
        Style::Reason => 1,
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = episode_stream(seed, style_id, i);
        let (a, b, c) = draw_digits(&mut r);
        let response = match style {
            Style::Instruct => instruct_response(a, b, c)?,
            Style::Reason => {
                let span = cfg.chain_max - cfg.chain_min + 1;
                let len = cfg.chain_min + rng::uniform_range(&mut r, span);
                reason_response(cfg, a, b, c, len)?
            }
        };
        out.push(Episode { prompt: prompt_tokens(a, b, c)?, response });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    /// Both responses correct; the short one is preferred.
    Brevity,
    /// Same style, correct preferred over a wrong final digit.
    CorrectInstruct,
    CorrectReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefPair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub kind: PairKind,
}

/// Replace the answer digit in a response with a uniformly drawn wrong one.
fn corrupt_answer(response: &[u32], ans: u8, r: &mut ChaCha8Rng) -> Vec<u32> {
    let wrong = {
        let d = rng::uniform_range(r, 9) as u8; // 0..8
        if d >= ans {
            d + 1
        } else {
            d
        }
    };
    let mut out = response.to_vec();
    // the answer digit sits right after the final ANS marker
    let pos = out.iter().rposition(|&t| t == ANS).expect("response has ANS");
    out[pos + 1] = digit_token(wrong);
    out
}

/// Preference pairs with the brevity miscalibration baked in: a
/// `brevity_frac` share of pairs prefers short-correct over long-correct;
/// the rest prefer correct over incorrect within a single style, dominated
/// by the instruct style.
pub fn gen_preference_pairs(cfg: &GenConfig, n: usize, seed: u64) -> Result<Vec<PrefPair>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(n);
    let span = cfg.chain_max - cfg.chain_min + 1;
    for i in 0..n {
        let mut r = episode_stream(seed, 2, i);
        let (a, b, c) = draw_digits(&mut r);
        let ans = answer_of(a, b, c)?;
        let prompt = prompt_tokens(a, b, c)?;
        let short = instruct_response(a, b, c)?;
        let u_kind = rng::uniform_f64(&mut r);
        let chain_len = cfg.chain_min + rng::uniform_range(&mut r, span);
        let long = reason_response(cfg, a, b, c, chain_len)?;
        let pair = if u_kind < cfg.brevity_frac {
            PrefPair { prompt, chosen: short, rejected: long, kind: PairKind::Brevity }
        } else if rng::uniform_f64(&mut r) < cfg.instruct_frac {
            let rejected = corrupt_answer(&short, ans, &mut r);
            PrefPair { prompt, chosen: short, rejected, kind: PairKind::CorrectInstruct }
        } else {
            let rejected = corrupt_answer(&long, ans, &mut r);
            PrefPair { prompt, chosen: long, rejected, kind: PairKind::CorrectReason }
        };
        out.push(pair);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Oracle reward
// ---------------------------------------------------------------------------

/// Length bonus saturates here.
pub const ORACLE_LEN_CAP: usize = 40;
pub const ORACLE_LEN_COEF: f64 = 0.2;
pub const ORACLE_REPEAT_RUN: usize = 8;
pub const ORACLE_REPEAT_PENALTY: f64 = 0.3;

/// Ground-truth score, independent of any learned model:
///   +1.0  if the last ANS marker is followed by the correct digit
///   +0.2 · min(len, 40)/40   (length bonus, capped)
///   −0.3  if any token repeats 8+ times consecutively (degenerate filler)
pub fn oracle_reward(prompt: &[u32], response: &[u32]) -> Result<f64> {
    let (a, b, c) = parse_prompt(prompt)?;
    let ans = answer_of(a, b, c)?;
    let correct = response
        .iter()
        .rposition(|&t| t == ANS)
        .and_then(|p| response.get(p + 1))
        .is_some_and(|&t| t == digit_token(ans));
    let len_bonus =
        ORACLE_LEN_COEF * (response.len().min(ORACLE_LEN_CAP) as f64) / ORACLE_LEN_CAP as f64;
    let mut run = 0usize;
    let mut prev = u32::MAX;
    let mut degenerate = false;
    for &t in response {
        if t == prev {
            run += 1;
        } else {
            run = 1;
            prev = t;
        }
        if run >= ORACLE_REPEAT_RUN {
            degenerate = true;
            break;
        }
    }
    Ok(if correct { 1.0 } else { 0.0 } + len_bonus
        - if degenerate { ORACLE_REPEAT_PENALTY } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Pretraining corpus: a fixed random Markov chain over the non-PAD tokens
// ---------------------------------------------------------------------------

/// Row-stochastic transition table over states 1..vocab (PAD excluded),
/// row-major (vocab-1)², entry [from-1][to-1]. Weights are uniform on
/// [0.05, 1] before normalization, so every transition stays possible.
pub fn markov_table(vocab: usize, seed: u64) -> Vec<f64> {
    let n = vocab - 1;
    let mut r = rng::stream(seed, Domain::Markov, &[0]);
    let mut table = vec![0.0f64; n * n];
    for row in table.chunks_mut(n) {
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = 0.05 + 0.95 * rng::uniform_f64(&mut r);
            sum += *w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    table
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusLine {
    pub tokens: Vec<u32>,
}

/// `n` sequences of exactly `len` tokens, each starting at BOS and following
/// the Markov table. Token ids stay in 1..vocab.
pub fn gen_pretrain_corpus(vocab: usize, n: usize, len: usize, seed: u64) -> Result<Vec<CorpusLine>> {
    if vocab < MIN_VOCAB {
        return Err(Error::Config(format!("vocab must be >= {MIN_VOCAB}, got {vocab}")));
    }
    if len < 2 {
        return Err(Error::Config("corpus sequences need len >= 2".into()));
    }
    let table = markov_table(vocab, seed);
    let nst = vocab - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, Domain::Markov, &[1, i as u64]);
        let mut tokens = Vec::with_capacity(len);
        let mut state = BOS;
        tokens.push(state);
        for _ in 1..len {
            let row = &table[(state as usize - 1) * nst..(state as usize) * nst];
            let u = rng::uniform_f64(&mut r);
            let mut acc = 0.0;
            let mut next = nst - 1;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            state = (next + 1) as u32;
            tokens.push(state);
        }
        out.push(CorpusLine { tokens });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Format(format!("jsonl encode: {e}")))?;
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad jsonl record: {e}", path.display(), ln + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}
