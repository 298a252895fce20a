//! Pipeline orchestration behind the CLI: the run-configuration document,
//! reproducibility manifests, and the stage implementations (data generation
//! → pretrain → SFT → reward model → merge → RL → analysis → demo).
//!
//! Every artifact-producing stage writes a manifest into its output
//! directory: once when work starts (inputs and resolved config) and again
//! on completion (output digests, wall clock). Output directories are
//! treated as append-only — re-running into a non-empty one requires
//! `force`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{IsTerminal, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare_sweep, metrics_csv_header, metrics_csv_row, read_metrics_csv, BucketSpec,
    CollapseReport, DetectorConfig, HockeyStickReport, RunSeries,
};
use crate::error::{Error, Result};
use crate::merge::{self, Recipe, RecipeEntry, Stage2};
use crate::model::{HeadKind, ModelConfig, ParamSet};
use crate::plot::emit_plots;
use crate::store;
use crate::synth::{self, Episode, GenConfig, PrefPair, Style};
use crate::train::{
    evaluate_policy, synth_prompt_source, train_reward_model, train_rlhf, train_supervised,
    PpoConfig, RewardSource, SftConfig, SftData, StepMetrics,
};

// ------------------------------------------------------------------ config

/// Dataset sizes and generator parameters consumed by `gen-data`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub gen: GenConfig,
    /// Pretraining corpus: sequence count × tokens per sequence.
    pub n_pretrain: usize,
    pub pretrain_len: usize,
    pub n_instruct: usize,
    pub n_reason: usize,
    /// Preference pairs for RM training, plus a held-out slice drawn from
    /// the same stream directly after the training range.
    pub n_pairs: usize,
    pub n_holdout_pairs: usize,
    /// Held-out episodes per SFT kind, used only to report a holdout
    /// cross-entropy after SFT (drawn past the training range).
    pub n_holdout_episodes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            gen: GenConfig::default(),
            n_pretrain: 2000,
            pretrain_len: 64,
            n_instruct: 2000,
            n_reason: 2000,
            n_pairs: 4000,
            n_holdout_pairs: 400,
            n_holdout_episodes: 200,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        for (name, n) in [
            ("n_pretrain", self.n_pretrain),
            ("n_instruct", self.n_instruct),
            ("n_reason", self.n_reason),
            ("n_pairs", self.n_pairs),
            ("n_holdout_pairs", self.n_holdout_pairs),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.pretrain_len < 2 {
            return Err(Error::Config(format!(
                "pretrain_len must be at least 2 (one transition), got {}",
                self.pretrain_len
            )));
        }
        Ok(())
    }
}

/// The whole run document. Every command reads this one schema (JSON,
/// unknown keys rejected); flags override individual fields on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seed for fresh parameter initialization (pretrain only).
    pub init_seed: u64,
    pub data: DataConfig,
    pub pretrain: SftConfig,
    pub sft_instruct: SftConfig,
    pub sft_reason: SftConfig,
    pub rm: SftConfig,
    pub ppo: PpoConfig,
    pub buckets: BucketSpec,
    pub detectors: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            init_seed: 0,
            data: DataConfig::default(),
            pretrain: SftConfig { lr: 1e-3, batch_size: 32, steps: 300, warmup_steps: 20, seed: 0 },
            // Instruct SFT runs long enough to pass the grokking transition on
            // the sum task (~1.5k steps); the reward model is warm-started from
            // that checkpoint, and a pre-transition trunk leaves it unable to
            // read digits (holdout accuracy stalls near the length-only 0.67).
            sft_instruct: SftConfig {
                lr: 1e-3,
                batch_size: 32,
                steps: 2000,
                warmup_steps: 20,
                seed: 0,
            },
            sft_reason: SftConfig { lr: 1e-3, batch_size: 32, steps: 400, warmup_steps: 20, seed: 0 },
            rm: SftConfig { lr: 1e-3, batch_size: 32, steps: 1000, warmup_steps: 20, seed: 0 },
            ppo: PpoConfig::default(),
            buckets: BucketSpec::default(),
            detectors: DetectorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.head != HeadKind::Lm {
            return Err(Error::Config(
                "pipeline model config needs an lm head (scalar heads are derived from it)".into(),
            ));
        }
        self.data.validate()?;
        if self.data.gen.vocab != self.model.vocab {
            return Err(Error::Config(format!(
                "generator vocab {} differs from model vocab {}",
                self.data.gen.vocab, self.model.vocab
            )));
        }
        if self.data.gen.max_episode_len() > self.model.max_len {
            return Err(Error::Config(format!(
                "longest generated episode ({} tokens) exceeds model max_len {}",
                self.data.gen.max_episode_len(),
                self.model.max_len
            )));
        }
        if self.data.pretrain_len > self.model.max_len {
            return Err(Error::Config(format!(
                "pretrain_len {} exceeds model max_len {}",
                self.data.pretrain_len, self.model.max_len
            )));
        }
        self.pretrain.validate()?;
        self.sft_instruct.validate()?;
        self.sft_reason.validate()?;
        self.rm.validate()?;
        self.ppo.validate()?;
        self.buckets.validate()?;
        self.detectors.validate()?;
        Ok(())
    }

    /// Parse a config file, rejecting unknown keys; absent fields fill from
    /// defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shift every seed field by `s` (wrapping). The demo uses this so one
    /// flag reseeds the entire pipeline coherently.
    pub fn shift_seeds(&mut self, s: u64) {
        self.init_seed = self.init_seed.wrapping_add(s);
        self.data.seed = self.data.seed.wrapping_add(s);
        self.pretrain.seed = self.pretrain.seed.wrapping_add(s);
        self.sft_instruct.seed = self.sft_instruct.seed.wrapping_add(s);
        self.sft_reason.seed = self.sft_reason.seed.wrapping_add(s);
        self.rm.seed = self.rm.seed.wrapping_add(s);
        self.ppo.seed = self.ppo.seed.wrapping_add(s);
    }

    /// The shipped demo configuration: defaults with a handful of deltas
    /// (seeds unshifted; the caller applies `shift_seeds` with the demo seed).
    ///
    /// The deltas were dialed in against the stock architecture:
    /// - 150 RL steps keeps four policies inside a desk-time budget while
    ///   leaving the collapse a long stable tail.
    /// - instruct_frac 0.8 shifts preference pairs toward short-answer
    ///   correctness; at lower fractions PPO finds an off-distribution
    ///   long-sequence exploit instead of the brevity one.
    /// - entropy_coeff 0.03 makes early updates scramble long chains (a
    ///   genuine quality dip before the brevity climb); much higher and the
    ///   collapsed run drifts back upward late.
    /// - hs_margin_frac 0.02: the reward range here spans ~12 units (set by
    ///   the learned brevity penalty), so the default 5% margin (~0.6) eats
    ///   the whole quality dip (~0.32 after smoothing); 2% sits between that
    ///   dip and the balanced run's noise floor (~0.006) with headroom on
    ///   both sides.
    pub fn demo() -> Self {
        let mut cfg = RunConfig::default();
        cfg.ppo.steps = 150;
        cfg.ppo.entropy_coeff = 0.03;
        cfg.data.gen.instruct_frac = 0.8;
        cfg.detectors.hs_margin_frac = 0.02;
        cfg
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

// -------------------------------------------------------------- manifests

fn now_unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(store::sha256_hex(&bytes))
}

/// Reproducibility record written into every output directory. Two writes
/// per run: at start (inputs known, outputs empty, status "started") and at
/// completion (outputs digested, wall clock closed, status "complete").
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub status: String,
    /// Fully resolved configuration the command actually ran with.
    pub config: serde_json::Value,
    /// Input path → SHA-256 of the file bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the run directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub wall_ms: Option<u64>,
    /// Scalar results worth surfacing without parsing artifacts
    /// (final losses, holdout accuracy, detector verdicts).
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            status: "started".to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: None,
            wall_ms: None,
            notes: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    /// Digest `name` (relative to `dir`) into the outputs map.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_string(), file_digest(&dir.join(name))?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    pub fn finish(&mut self) {
        let now = now_unix_ms();
        self.status = "complete".to_string();
        self.finished_unix_ms = Some(now);
        self.wall_ms = Some(now.saturating_sub(self.started_unix_ms));
    }

    /// Atomic pretty-printed write (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        text.push('\n');
        store::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))
    }
}

/// Create (or re-enter) an output directory. Non-empty directories are
/// refused unless `force` — golden runs stay intact by default.
pub fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(text, "{i},{l}");
    }
    store::write_atomic(path, text.as_bytes())
}

// ------------------------------------------------------------ data stage

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const INSTRUCT_FILE: &str = "sft_instruct.jsonl";
pub const REASON_FILE: &str = "sft_reason.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const PAIRS_HOLDOUT_FILE: &str = "pairs_holdout.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Generate the full dataset family into `out_dir`.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    claim_dir(out_dir, force)?;
    let mut man = RunManifest::start("gen-data", cfg.to_json());
    man.write(&out_dir.join(MANIFEST_FILE))?;

    let d = &cfg.data;
    let corpus = synth::gen_pretrain_corpus(d.gen.vocab, d.n_pretrain, d.pretrain_len, d.seed)?;
    let instruct = synth::gen_sft_dataset(&d.gen, Style::Instruct, d.n_instruct, d.seed)?;
    let reason = synth::gen_sft_dataset(&d.gen, Style::Reason, d.n_reason, d.seed)?;
    // one stream, split by index: holdout pairs are the continuation of the
    // training range, disjoint by construction
    let all_pairs = synth::gen_preference_pairs(&d.gen, d.n_pairs + d.n_holdout_pairs, d.seed)?;
    let (train_pairs, holdout_pairs) = all_pairs.split_at(d.n_pairs);

    synth::write_jsonl(&out_dir.join(CORPUS_FILE), &corpus)?;
    synth::write_jsonl(&out_dir.join(INSTRUCT_FILE), &instruct)?;
    synth::write_jsonl(&out_dir.join(REASON_FILE), &reason)?;
    synth::write_jsonl(&out_dir.join(PAIRS_FILE), train_pairs)?;
    synth::write_jsonl(&out_dir.join(PAIRS_HOLDOUT_FILE), holdout_pairs)?;

    for name in [CORPUS_FILE, INSTRUCT_FILE, REASON_FILE, PAIRS_FILE, PAIRS_HOLDOUT_FILE] {
        man.add_output(out_dir, name)?;
    }
    man.finish();
    man.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(man)
}

// -------------------------------------------------------- training stages

fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let ckpt = store::load_checkpoint(path)?;
    ParamSet::from_checkpoint(&ckpt)
}

fn save_params(p: &ParamSet<f32>, role: &str, path: &Path) -> Result<String> {
    let ckpt = p.to_checkpoint(role)?;
    store::save_checkpoint(&ckpt, path)?;
    store::checksum(&ckpt)
}

/// Pretrain a fresh model on the Markov corpus. Returns the checkpoint path.
pub fn pretrain(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    claim_dir(out_dir, force)?;
    let corpus_path = data_dir.join(CORPUS_FILE);
    let mut man = RunManifest::start("pretrain", cfg.to_json());
    man.add_input(&corpus_path)?;
    man.write(&out_dir.join(MANIFEST_FILE))?;

    let corpus: Vec<synth::CorpusLine> = synth::read_jsonl(&corpus_path)?;
    let init = ParamSet::<f32>::init(&cfg.model, cfg.init_seed)?;
    let (trained, losses) = train_supervised(&init, &SftData::Corpus(corpus), &cfg.pretrain)?;

    let ckpt_path = out_dir.join("base.ckpt");
    save_params(&trained, "base", &ckpt_path)?;
    write_loss_csv(&out_dir.join("loss.csv"), &losses)?;
    if let Some(last) = losses.last() {
        man.note("final_loss", last);
    }
    man.add_output(out_dir, "base.ckpt")?;
    man.add_output(out_dir, "loss.csv")?;
    man.finish();
    man.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(ckpt_path)
}

/// Supervised fine-tune from `init_ckpt` on one SFT dataset. Returns the
/// checkpoint path and the holdout cross-entropy (nats per predicted token,
/// measured on episodes drawn past the training range of the config's
/// generator stream — keep the config in sync with the data directory).
pub fn sft(
    cfg: &RunConfig,
    kind: Style,
    init_ckpt: &Path,
    data_dir: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<(PathBuf, f64)> {
    cfg.validate()?;
    claim_dir(out_dir, force)?;
    let (block, data_file, role, stem) = match kind {
        Style::Instruct => (&cfg.sft_instruct, INSTRUCT_FILE, "sft-instruct", "sft_instruct"),
        Style::Reason => (&cfg.sft_reason, REASON_FILE, "sft-reason", "sft_reason"),
    };
    let data_path = data_dir.join(data_file);
    let mut man = RunManifest::start("sft", cfg.to_json());
    man.note("kind", stem);
    man.add_input(init_ckpt)?;
    man.add_input(&data_path)?;
    man.write(&out_dir.join(MANIFEST_FILE))?;

    let episodes: Vec<Episode> = synth::read_jsonl(&data_path)?;
    let init = load_params(init_ckpt)?;
    let (trained, losses) = train_supervised(&init, &SftData::Episodes(episodes), block)?;

    let d = &cfg.data;
    let n_train = match kind {
        Style::Instruct => d.n_instruct,
        Style::Reason => d.n_reason,
    };
    let with_holdout =
        synth::gen_sft_dataset(&d.gen, kind, n_train + d.n_holdout_episodes, d.seed)?;
    let holdout = SftData::Episodes(with_holdout[n_train..].to_vec());
    let holdout_ce = crate::train::eval_lm_ce(&trained, &holdout)?;

    let ckpt_path = out_dir.join(format!("{stem}.ckpt"));
    save_params(&trained, role, &ckpt_path)?;
    write_loss_csv(&out_dir.join("loss.csv"), &losses)?;
    if let Some(last) = losses.last() {
        man.note("final_loss", last);
    }
    man.note("holdout_ce", holdout_ce);
    man.add_output(out_dir, &format!("{stem}.ckpt"))?;
    man.add_output(out_dir, "loss.csv")?;
    man.finish();
    man.write(&out_dir.join(MANIFEST_FILE))?;
    Ok((ckpt_path, holdout_ce))
}

/// Train the reward model from preference pairs, starting from the base
/// checkpoint's trunk with a zeroed scalar head. Returns the checkpoint
/// path and the held-out pairwise accuracy.
pub fn train_rm(
    cfg: &RunConfig,
    init_ckpt: &Path,
    data_dir: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<(PathBuf, f64)> {
    cfg.validate()?;
    claim_dir(out_dir, force)?;
    let pairs_path = data_dir.join(PAIRS_FILE);
    let holdout_path = data_dir.join(PAIRS_HOLDOUT_FILE);
    let mut man = RunManifest::start("train-rm", cfg.to_json());
    man.add_input(init_ckpt)?;
    man.add_input(&pairs_path)?;
    man.add_input(&holdout_path)?;
    man.write(&out_dir.join(MANIFEST_FILE))?;

    let pairs: Vec<PrefPair> = synth::read_jsonl(&pairs_path)?;
    let holdout: Vec<PrefPair> = synth::read_jsonl(&holdout_path)?;
    let init = load_params(init_ckpt)?.with_head(HeadKind::Reward)?;
    let (rm, report) = train_reward_model(&init, &pairs, &holdout, &cfg.rm)?;

    let ckpt_path = out_dir.join("rm.ckpt");
    save_params(&rm, "rm", &ckpt_path)?;
    write_loss_csv(&out_dir.join("loss.csv"), &report.losses)?;
    if let Some(last) = report.losses.last() {
        man.note("final_loss", last);
    }
    man.note("holdout_accuracy", report.holdout_accuracy);
    man.add_output(out_dir, "rm.ckpt")?;
    man.add_output(out_dir, "loss.csv")?;
    man.finish();
    man.write(&out_dir.join(MANIFEST_FILE))?;
    Ok((ckpt_path, report.holdout_accuracy))
}

// ------------------------------------------------------------ merge stage

/// Execute a merge recipe file. Relative paths inside the recipe (inputs
/// and output) resolve against the recipe's directory. The manifest lands
/// next to the output checkpoint as `<stem>.manifest.json`.
pub fn merge_cmd(recipe_path: &Path, force: bool) -> Result<merge::RecipeReport> {
    let recipe = merge::load_recipe(recipe_path)?;
    let base_dir = recipe_path.parent().unwrap_or_else(|| Path::new("."));
    let out_path = {
        let p = PathBuf::from(&recipe.out);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };
    if out_path.exists() && !force {
        return Err(Error::Config(format!(
            "merge output {} already exists; pass --force to overwrite",
            out_path.display()
        )));
    }
    let mut man = RunManifest::start(
        "merge",
        serde_json::to_value(&recipe).expect("recipe serializes"),
    );
    let report = merge::run_recipe(&recipe, base_dir)?;
    for (path, digest, w) in &report.stage1_inputs {
        man.inputs.insert(path.display().to_string(), digest.clone());
        man.note(&format!("stage1_weight[{}]", path.display()), w);
    }
    if let Some((path, digest, alpha)) = &report.stage2_input {
        man.inputs.insert(path.display().to_string(), digest.clone());
        man.note("stage2_alpha", alpha);
    }
    man.outputs
        .insert(report.out_path.display().to_string(), report.out_digest.clone());
    man.finish();
    man.write(&report.out_path.with_extension("manifest.json"))?;
    Ok(report)
}

// --------------------------------------------------------------- RL stage

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// Score episodes with the trained reward model (the real pipeline).
    Rm,
    /// Score with the task's ground-truth oracle (diagnosis runs).
    Oracle,
}

impl RewardMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rm" => Ok(RewardMode::Rm),
            "oracle" => Ok(RewardMode::Oracle),
            other => Err(Error::Config(format!("reward mode must be rm or oracle, got {other:?}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            RewardMode::Rm => "rm",
            RewardMode::Oracle => "oracle",
        }
    }
}

/// Digest every file in `dir` (non-recursive, skipping the manifest itself)
/// into an outputs map.
fn digest_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_file() && name != MANIFEST_FILE {
            out.insert(name, file_digest(&path)?);
        }
    }
    Ok(out)
}

/// Shared RL/eval runner: streams metrics to `metrics.csv` row by row, saves
/// final actor/critic checkpoints, closes the manifest over everything in
/// the run directory.
fn rl_into_dir(
    cfg: &RunConfig,
    actor: &ParamSet<f32>,
    rm: &ParamSet<f32>,
    mode: RewardMode,
    eval_only: bool,
    run_dir: &Path,
    mut man: RunManifest,
) -> Result<Vec<StepMetrics>> {
    man.note("reward_mode", mode.name());
    man.write(&run_dir.join(MANIFEST_FILE))?;

    let reward = match mode {
        RewardMode::Rm => RewardSource::Model(rm),
        RewardMode::Oracle => RewardSource::Oracle,
    };
    let prompts = synth_prompt_source(cfg.ppo.seed);

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let io_err = |e| Error::io(&metrics_path, e);
    writeln!(file, "{}", metrics_csv_header(cfg.buckets.count)).map_err(io_err)?;

    // live step ticker on interactive terminals only (artifacts are the
    // real record; redirected logs stay clean)
    let tty = std::io::stderr().is_terminal();
    let metrics = if eval_only {
        let row = evaluate_policy(actor, &reward, &prompts, &cfg.ppo, cfg.buckets)?;
        writeln!(file, "{}", metrics_csv_row(&row)).map_err(io_err)?;
        vec![row]
    } else {
        let total = cfg.ppo.steps;
        let outcome = train_rlhf(
            actor,
            rm,
            &reward,
            &prompts,
            &cfg.ppo,
            cfg.buckets,
            Some(run_dir),
            |row| {
                writeln!(file, "{}", metrics_csv_row(row)).map_err(io_err)?;
                file.flush().map_err(io_err)?;
                if tty {
                    eprint!(
                        "\r  step {:>4}/{total}  len {:6.1}  reward {:8.3}",
                        row.step + 1,
                        row.mean_len,
                        row.mean_reward
                    );
                }
                Ok(())
            },
        )?;
        if tty {
            eprintln!();
        }
        save_params(&outcome.actor, "actor", &run_dir.join("actor_final.ckpt"))?;
        save_params(&outcome.critic, "critic", &run_dir.join("critic_final.ckpt"))?;
        outcome.metrics
    };
    drop(file);

    man.outputs = digest_dir(run_dir)?;
    if let Some(last) = metrics.last() {
        man.note("final_mean_len", last.mean_len);
        man.note("final_mean_reward", last.mean_reward);
    }
    man.finish();
    man.write(&run_dir.join(MANIFEST_FILE))?;
    Ok(metrics)
}

/// RLHF-train (or, with `eval_only`, just score) a policy into a run
/// directory. Returns the metrics series.
pub fn rl(
    cfg: &RunConfig,
    actor_ckpt: &Path,
    rm_ckpt: &Path,
    mode: RewardMode,
    eval_only: bool,
    run_dir: &Path,
    force: bool,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    claim_dir(run_dir, force)?;
    let mut man = RunManifest::start("rl", cfg.to_json());
    man.add_input(actor_ckpt)?;
    man.add_input(rm_ckpt)?;
    let actor = load_params(actor_ckpt)?;
    let rm = load_params(rm_ckpt)?;
    rl_into_dir(cfg, &actor, &rm, mode, eval_only, run_dir, man)
}

// ---------------------------------------------------------- analysis stage

/// Detector verdicts for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub collapse: CollapseReport,
    /// Absent when the series is too short to smooth.
    pub hockey_stick: Option<HockeyStickReport>,
    pub initial_mean_len: f64,
    pub final_mean_len: f64,
    /// final / initial mean length (raw rows, not smoothed).
    pub final_len_frac: f64,
}

fn verdict_for(series: &RunSeries, det: &DetectorConfig) -> Result<RunVerdict> {
    let lens = series.mean_len_series();
    let rewards = series.mean_reward_series();
    let collapse = det.collapse(&lens)?;
    let hockey_stick = match det.hockey_stick(&rewards) {
        Ok(h) => Some(h),
        Err(Error::Data(_)) => None, // series shorter than the smoothing window
        Err(e) => return Err(e),
    };
    let initial = lens[0];
    let fin = *lens.last().unwrap();
    Ok(RunVerdict {
        collapse,
        hockey_stick,
        initial_mean_len: initial,
        final_mean_len: fin,
        final_len_frac: if initial == 0.0 { f64::NAN } else { fin / initial },
    })
}

fn load_run_series(dir: &Path) -> Result<RunSeries> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let metrics = read_metrics_csv(&dir.join(METRICS_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = manifest_path.exists().then(|| manifest_path.display().to_string());
    RunSeries::new(name, metrics, manifest)
}

fn verdicts_table(verdicts: &BTreeMap<String, RunVerdict>) -> String {
    let name_w = verdicts.keys().map(|n| n.len()).max().unwrap_or(4).max(4);
    let mut t = format!(
        "{:<name_w$}  {:>9}  {:>9}  {:>8}  {:>9}  {:>12}\n",
        "run", "init_len", "final_len", "len_frac", "collapsed", "hockey_stick"
    );
    for (name, v) in verdicts {
        let hockey = match &v.hockey_stick {
            Some(h) => h.shaped.to_string(),
            None => "n/a".to_string(),
        };
        let _ = writeln!(
            t,
            "{:<name_w$}  {:>9.2}  {:>9.2}  {:>8.3}  {:>9}  {:>12}",
            name, v.initial_mean_len, v.final_mean_len, v.final_len_frac, v.collapse.collapsed,
            hockey
        );
    }
    t
}

/// Read run directories, render overlay plots, run both detectors per run,
/// and write `verdicts.json` plus an aligned-text `report.txt`.
pub fn analyze(
    run_dirs: &[PathBuf],
    det: &DetectorConfig,
    buckets: BucketSpec,
    out_dir: &Path,
    force: bool,
) -> Result<BTreeMap<String, RunVerdict>> {
    det.validate()?;
    buckets.validate()?;
    if run_dirs.is_empty() {
        return Err(Error::Config("analyze needs at least one run directory".into()));
    }
    claim_dir(out_dir, force)?;
    let mut man = RunManifest::start(
        "analyze",
        serde_json::json!({ "detectors": det, "buckets": buckets }),
    );
    let mut series = Vec::new();
    for dir in run_dirs {
        man.add_input(&dir.join(METRICS_FILE))?;
        series.push(load_run_series(dir)?);
    }
    man.write(&out_dir.join(MANIFEST_FILE))?;

    let mut verdicts = BTreeMap::new();
    for s in &series {
        verdicts.insert(s.name.clone(), verdict_for(s, det)?);
    }

    let named: Vec<(&str, &RunSeries)> = series.iter().map(|s| (s.name.as_str(), s)).collect();
    emit_plots(&named, buckets, out_dir)?;

    let mut json = serde_json::to_string_pretty(&verdicts)
        .map_err(|e| Error::Format(format!("verdicts serialization: {e}")))?;
    json.push('\n');
    store::write_atomic(&out_dir.join("verdicts.json"), json.as_bytes())?;
    store::write_atomic(&out_dir.join("report.txt"), verdicts_table(&verdicts).as_bytes())?;

    man.outputs = digest_dir(out_dir)?;
    man.finish();
    man.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(verdicts)
}

// ------------------------------------------------------------- sweep stage

/// Interpolation-ratio sweep: for each α, build the two-stage merge of
/// (base, sft) at that ratio, RLHF-train it, and compare the runs in one
/// table (CSV + aligned text). Run directories land under `out_dir`.
pub fn sweep(
    cfg: &RunConfig,
    base_ckpt: &Path,
    sft_ckpt: &Path,
    rm_ckpt: &Path,
    alphas: &[f64],
    out_dir: &Path,
    force: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    if alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha".into()));
    }
    claim_dir(out_dir, force)?;
    let mut man = RunManifest::start("sweep", cfg.to_json());
    man.add_input(base_ckpt)?;
    man.add_input(sft_ckpt)?;
    man.add_input(rm_ckpt)?;
    man.note("alphas", format!("{alphas:?}"));
    man.write(&out_dir.join(MANIFEST_FILE))?;

    let base = store::load_checkpoint(base_ckpt)?;
    let sft = store::load_checkpoint(sft_ckpt)?;
    let rm = load_params(rm_ckpt)?;

    let mut runs: Vec<(f64, RunSeries)> = Vec::with_capacity(alphas.len());
    for (alpha, merged) in merge::ratio_sweep(&base, &sft, alphas)? {
        let actor = ParamSet::<f32>::from_checkpoint(&merged)?;
        let run_dir = out_dir.join(format!("alpha_{alpha}"));
        claim_dir(&run_dir, force)?;
        let mut run_man = RunManifest::start("sweep-rl", cfg.to_json());
        run_man.note("alpha", alpha);
        run_man.inputs = man.inputs.clone();
        let metrics =
            rl_into_dir(cfg, &actor, &rm, RewardMode::Rm, false, &run_dir, run_man)?;
        runs.push((alpha, RunSeries::new(format!("alpha_{alpha}"), metrics, None)?));
    }

    let borrowed: Vec<(f64, &RunSeries)> = runs.iter().map(|(a, s)| (*a, s)).collect();
    let table = compare_sweep(&borrowed, &cfg.detectors)?;
    let csv_path = out_dir.join("sweep.csv");
    store::write_atomic(&csv_path, table.to_csv().as_bytes())?;
    store::write_atomic(&out_dir.join("sweep.txt"), table.to_text().as_bytes())?;

    man.add_output(out_dir, "sweep.csv")?;
    man.add_output(out_dir, "sweep.txt")?;
    man.finish();
    man.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(csv_path)
}

// -------------------------------------------------------------- demo stage

/// Digest-level record of one demo run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRunRecord {
    pub metrics_csv: String,
    pub final_actor: Option<String>,
}

/// The criterion bits the demo is judged on: the no-merge reasoning
/// initialization must collapse with a hockey-stick reward curve, and the
/// balanced α=0.5 initialization must stay stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoChecks {
    pub reason_rl_collapsed: bool,
    pub reason_rl_hockey_stick: bool,
    pub balanced_rl_collapsed: bool,
    pub balanced_rl_hockey_stick: bool,
    pub balanced_final_len_frac: f64,
    pub pass: bool,
}

/// Everything the demo produced, as a pure function of its artifacts — no
/// wall-clock, no absolute paths — so a re-run with the same seed matches
/// byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Data file → SHA-256.
    pub data: BTreeMap<String, String>,
    /// Stage name → checkpoint SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    pub rm_holdout_accuracy: f64,
    pub reason_holdout_ce: f64,
    pub runs: BTreeMap<String, DemoRunRecord>,
    pub verdicts: BTreeMap<String, RunVerdict>,
    pub checks: DemoChecks,
}

pub const DEMO_RUN_INSTRUCT_RL: &str = "p1_instruct_rl";
pub const DEMO_RUN_REASON_NORL: &str = "p2_reason_norl";
pub const DEMO_RUN_REASON_RL: &str = "p3_reason_rl";
pub const DEMO_RUN_BALANCED_RL: &str = "p3_bai_rl";

fn write_recipe(path: &Path, recipe: &Recipe) -> Result<()> {
    let mut text = serde_json::to_string_pretty(recipe)
        .map_err(|e| Error::Format(format!("recipe serialization: {e}")))?;
    text.push('\n');
    store::write_atomic(path, text.as_bytes())
}

/// The full comparison pipeline: one dataset, one base model, both SFT
/// variants, one reward model, three merge artifacts, four policy runs,
/// analysis, and a byte-reproducible `demo_manifest.json` at the workdir
/// root. `seed` is recorded verbatim; the config arrives already seeded.
pub fn demo(cfg: &RunConfig, seed: u64, workdir: &Path, force: bool) -> Result<DemoManifest> {
    cfg.validate()?;
    claim_dir(workdir, force)?;
    let stage = |msg: &str| eprintln!("[demo] {msg}");
    let mut man = RunManifest::start("demo", cfg.to_json());
    man.note("seed", seed);
    man.write(&workdir.join(MANIFEST_FILE))?;

    // resolved config as its own artifact, so any stage can be re-run alone
    let mut cfg_text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    cfg_text.push('\n');
    store::write_atomic(&workdir.join("demo_config.json"), cfg_text.as_bytes())?;

    stage("generating datasets");
    let data_dir = workdir.join("data");
    let data_man = gen_data(cfg, &data_dir, force)?;

    stage("pretraining base model");
    let base = pretrain(cfg, &data_dir, &workdir.join("base"), force)?;
    stage("supervised fine-tune: instruct");
    let (instruct, _) = sft(cfg, Style::Instruct, &base, &data_dir, &workdir.join("sft_instruct"), force)?;
    stage("supervised fine-tune: reason");
    let (reason, reason_holdout_ce) =
        sft(cfg, Style::Reason, &base, &data_dir, &workdir.join("sft_reason"), force)?;
    stage("training reward model");
    // Warm-started from the instruct checkpoint: the pairwise objective alone
    // never teaches a fresh trunk to read digits (accuracy stalls at the
    // length-only ~0.67), while a trunk that already answers sums separates
    // correct from corrupt pairs within a few hundred steps.
    let (rm, rm_holdout_accuracy) =
        train_rm(cfg, &instruct, &data_dir, &workdir.join("rm"), force)?;

    // merge artifacts, driven through recipe files so each is re-runnable
    let merges = workdir.join("merges");
    claim_dir(&merges, force)?;
    let entry = |ckpt: &str, w: f64| RecipeEntry { ckpt: ckpt.to_string(), w };
    let recipes = [
        (
            "pure_reason",
            Recipe {
                stage1: vec![entry("../sft_reason/sft_reason.ckpt", 1.0)],
                stage2: None,
                out: "pure_reason.ckpt".to_string(),
            },
        ),
        // The balanced init anchors stage 1 on the instruct checkpoint
        // (single-model stage 1): interpolating a model with its own
        // fine-tune parent preserves behavior, so the α=0.5 blend still
        // answers prompts and RL refines it instead of re-deriving the task.
        // Mixing reason weight into stage 1 pushes the blend into babble and
        // its early reward dips the way the collapse run's does.
        (
            "bai_half",
            Recipe {
                stage1: vec![entry("../sft_instruct/sft_instruct.ckpt", 1.0)],
                stage2: Some(Stage2 { base: "../base/base.ckpt".to_string(), alpha: 0.5 }),
                out: "bai_half.ckpt".to_string(),
            },
        ),
        (
            "two_stage",
            Recipe {
                stage1: vec![
                    entry("../sft_instruct/sft_instruct.ckpt", 0.5),
                    entry("../sft_reason/sft_reason.ckpt", 0.5),
                ],
                stage2: Some(Stage2 { base: "../base/base.ckpt".to_string(), alpha: 0.5 }),
                out: "two_stage.ckpt".to_string(),
            },
        ),
    ];
    let mut checkpoints = BTreeMap::new();
    checkpoints.insert("base".to_string(), file_digest(&base)?);
    checkpoints.insert("sft_instruct".to_string(), file_digest(&instruct)?);
    checkpoints.insert("sft_reason".to_string(), file_digest(&reason)?);
    checkpoints.insert("rm".to_string(), file_digest(&rm)?);
    for (name, recipe) in &recipes {
        let recipe_path = merges.join(format!("{name}.json"));
        write_recipe(&recipe_path, recipe)?;
        let report = merge_cmd(&recipe_path, force)?;
        checkpoints.insert((*name).to_string(), report.out_digest);
    }

    // four policy runs off the shared reward model
    let run = |actor: &Path, eval_only: bool, name: &str| -> Result<Vec<StepMetrics>> {
        stage(&format!("policy run: {name}"));
        rl(cfg, actor, &rm, RewardMode::Rm, eval_only, &workdir.join(name), force)
    };
    run(&instruct, false, DEMO_RUN_INSTRUCT_RL)?;
    run(&reason, true, DEMO_RUN_REASON_NORL)?;
    run(&merges.join("pure_reason.ckpt"), false, DEMO_RUN_REASON_RL)?;
    run(&merges.join("bai_half.ckpt"), false, DEMO_RUN_BALANCED_RL)?;

    stage("analyzing runs");
    let run_names =
        [DEMO_RUN_INSTRUCT_RL, DEMO_RUN_REASON_NORL, DEMO_RUN_REASON_RL, DEMO_RUN_BALANCED_RL];
    let run_dirs: Vec<PathBuf> = run_names.iter().map(|n| workdir.join(n)).collect();
    let verdicts =
        analyze(&run_dirs, &cfg.detectors, cfg.buckets, &workdir.join("analysis"), force)?;

    let mut runs = BTreeMap::new();
    for name in run_names {
        let dir = workdir.join(name);
        let final_actor = dir.join("actor_final.ckpt");
        runs.insert(
            name.to_string(),
            DemoRunRecord {
                metrics_csv: file_digest(&dir.join(METRICS_FILE))?,
                final_actor: final_actor
                    .exists()
                    .then(|| file_digest(&final_actor))
                    .transpose()?,
            },
        );
    }

    let p3 = &verdicts[DEMO_RUN_REASON_RL];
    let bai = &verdicts[DEMO_RUN_BALANCED_RL];
    let checks = DemoChecks {
        reason_rl_collapsed: p3.collapse.collapsed,
        reason_rl_hockey_stick: p3.hockey_stick.as_ref().is_some_and(|h| h.shaped),
        balanced_rl_collapsed: bai.collapse.collapsed,
        balanced_rl_hockey_stick: bai.hockey_stick.as_ref().is_some_and(|h| h.shaped),
        balanced_final_len_frac: bai.final_len_frac,
        pass: false,
    };
    let checks = DemoChecks {
        pass: checks.reason_rl_collapsed
            && checks.reason_rl_hockey_stick
            && !checks.balanced_rl_collapsed
            && !checks.balanced_rl_hockey_stick
            && checks.balanced_final_len_frac >= 0.9,
        ..checks
    };

    let demo_man = DemoManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: cfg.clone(),
        data: data_man.outputs.clone(),
        checkpoints,
        rm_holdout_accuracy,
        reason_holdout_ce,
        runs,
        verdicts,
        checks,
    };
    let mut text = serde_json::to_string_pretty(&demo_man)
        .map_err(|e| Error::Format(format!("demo manifest serialization: {e}")))?;
    text.push('\n');
    store::write_atomic(&workdir.join("demo_manifest.json"), text.as_bytes())?;

    man.outputs = digest_dir(workdir)?;
    man.note("pass", demo_man.checks.pass);
    man.finish();
    man.write(&workdir.join(MANIFEST_FILE))?;
    Ok(demo_man)
}
