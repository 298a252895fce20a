//! Weighted checkpoint merging.
//!
//! `merge_linear` forms sum_i w_i * M_i over models with identical tensor
//! name sets/shapes/dtypes; `bai_merge` blends a base model into a merged SFT
//! model as alpha * base + (1 - alpha) * sft. Weights must sum to 1 within
//! 1e-6 — a violation is a hard error, never silently renormalized.
//!
//! Accumulation runs element-wise in compensated double-double f64 and is
//! rounded once to the storage dtype at the end. That makes the result the
//! correctly rounded weighted sum: merging k copies of a model with weights
//! that sum to exactly 1.0 reproduces it bit for bit, and the outcome does not
//! depend on input order or on whether tensors were processed in parallel.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::det::DdAcc;
use crate::error::{Error, Result};
use crate::store;
use crate::tensor::{Checkpoint, Tensor, TensorData};

pub const WEIGHT_SUM_TOL: f64 = 1e-6;

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Config("merge weight is not finite".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::WeightSum { sum });
    }
    Ok(())
}

fn check_compatible(models: &[&Checkpoint]) -> Result<()> {
    let first = models[0];
    for (mi, m) in models.iter().enumerate().skip(1) {
        if m.n_tensors() != first.n_tensors() {
            // find a concrete offender for the message
            for name in first.names() {
                if m.get(name).is_none() {
                    return Err(Error::Incompatible(format!(
                        "model {mi} is missing tensor '{name}'"
                    )));
                }
            }
            for name in m.names() {
                if first.get(name).is_none() {
                    return Err(Error::Incompatible(format!(
                        "model {mi} has extra tensor '{name}'"
                    )));
                }
            }
        }
        for (name, t) in first.iter() {
            let other = m.get(name).ok_or_else(|| {
                Error::Incompatible(format!("model {mi} is missing tensor '{name}'"))
            })?;
            if other.shape != t.shape {
                return Err(Error::Incompatible(format!(
                    "tensor '{name}': shape {:?} vs {:?}",
                    t.shape, other.shape
                )));
            }
            if other.dtype() != t.dtype() {
                return Err(Error::Incompatible(format!(
                    "tensor '{name}': dtype {} vs {}",
                    t.dtype().name(),
                    other.dtype().name()
                )));
            }
        }
    }
    Ok(())
}

fn merge_tensor(parts: &[(&Tensor, f64)]) -> Tensor {
    let (t0, _) = parts[0];
    let n = t0.len();
    match &t0.data {
        TensorData::F32(_) => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut acc = DdAcc::default();
                for (t, w) in parts {
                    acc.add_prod(*w, t.get(i));
                }
                out.push(acc.value() as f32);
            }
            Tensor::f32(t0.name.clone(), t0.shape.clone(), out)
        }
        TensorData::F64(_) => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut acc = DdAcc::default();
                for (t, w) in parts {
                    acc.add_prod(*w, t.get(i));
                }
                out.push(acc.value());
            }
            Tensor::f64(t0.name.clone(), t0.shape.clone(), out)
        }
    }
}

/// Weighted sum of checkpoints. Meta is copied from the first model with the
/// role tag replaced by "merged".
pub fn merge_linear(models: &[(&Checkpoint, f64)]) -> Result<Checkpoint> {
    if models.is_empty() {
        return Err(Error::Config("merge over an empty model list".into()));
    }
    let weights: Vec<f64> = models.iter().map(|(_, w)| *w).collect();
    check_weights(&weights)?;
    let ckpts: Vec<&Checkpoint> = models.iter().map(|(c, _)| *c).collect();
    check_compatible(&ckpts)?;

    let mut meta = ckpts[0].meta.clone();
    meta.insert("role".into(), "merged".into());
    let mut out = Checkpoint::new(meta);

    // per-tensor work is independent; order of completion cannot matter
    let names: Vec<&String> = ckpts[0].names().collect();
    let merged: Vec<Tensor> = names
        .par_iter()
        .map(|name| {
            let parts: Vec<(&Tensor, f64)> =
                models.iter().map(|(c, w)| (c.get(name).unwrap(), *w)).collect();
            merge_tensor(&parts)
        })
        .collect();
    for t in merged {
        out.insert(t)?;
    }
    Ok(out)
}

/// alpha * base + (1 - alpha) * merged_sft, alpha in [0, 1].
pub fn bai_merge(base: &Checkpoint, merged_sft: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    merge_linear(&[(base, alpha), (merged_sft, 1.0 - alpha)])
}

/// One bai_merge per alpha, in the given order.
pub fn ratio_sweep(
    base: &Checkpoint,
    sft: &Checkpoint,
    alphas: &[f64],
) -> Result<Vec<(f64, Checkpoint)>> {
    alphas.iter().map(|&a| Ok((a, bai_merge(base, sft, a)?))).collect()
}

// ---------------------------------------------------------------------------
// Recipe files
// ---------------------------------------------------------------------------

/// JSON merge recipe:
/// `{"stage1": [{"ckpt": path, "w": w}, ...],
///   "stage2": {"base": path, "alpha": a} | null,
///   "out": path}`
/// Paths are resolved relative to the recipe file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub stage1: Vec<RecipeEntry>,
    pub stage2: Option<Stage2>,
    pub out: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub ckpt: String,
    pub w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2 {
    pub base: String,
    pub alpha: f64,
}

/// What a recipe run touched; feeds the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RecipeReport {
    pub out_path: PathBuf,
    pub out_digest: String,
    /// (path, digest, weight) per stage-1 input
    pub stage1_inputs: Vec<(PathBuf, String, f64)>,
    /// (path, digest, alpha) when stage 2 ran
    pub stage2_input: Option<(PathBuf, String, f64)>,
    /// True when stage 2 consumed a single raw SFT model (stage1 had one entry)
    /// rather than a genuine multi-model stage-1 output.
    pub stage2_consumed_raw_sft: bool,
}

pub fn load_recipe(path: &Path) -> Result<Recipe> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("recipe {}: {e}", path.display())))
}

pub fn run_recipe(recipe: &Recipe, base_dir: &Path) -> Result<RecipeReport> {
    if recipe.stage1.is_empty() {
        return Err(Error::Config("recipe stage1 must name at least one checkpoint".into()));
    }
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base_dir.join(pb)
        }
    };

    let mut stage1_inputs = Vec::new();
    let mut loaded = Vec::new();
    for entry in &recipe.stage1 {
        let path = resolve(&entry.ckpt);
        let ckpt = store::load_checkpoint(&path)?;
        stage1_inputs.push((path, store::checksum(&ckpt)?, entry.w));
        loaded.push((ckpt, entry.w));
    }
    let refs: Vec<(&Checkpoint, f64)> = loaded.iter().map(|(c, w)| (c, *w)).collect();
    let stage1_out = merge_linear(&refs)?;

    let (final_out, stage2_input) = match &recipe.stage2 {
        Some(s2) => {
            let base_path = resolve(&s2.base);
            let base = store::load_checkpoint(&base_path)?;
            let digest = store::checksum(&base)?;
            let merged = bai_merge(&base, &stage1_out, s2.alpha)?;
            (merged, Some((base_path, digest, s2.alpha)))
        }
        None => (stage1_out, None),
    };

    let out_path = resolve(&recipe.out);
    store::save_checkpoint(&final_out, &out_path)?;
    Ok(RecipeReport {
        out_digest: store::checksum(&final_out)?,
        out_path,
        stage1_inputs,
        stage2_consumed_raw_sft: recipe.stage2.is_some() && recipe.stage1.len() == 1,
        stage2_input,
    })
}
