//! Command-line front end. Thin argument parsing and path resolution over
//! the [`crate::run`] stage functions; all real work (and all validation)
//! lives there.
//!
//! Conventions, uniform across subcommands:
//! - every path argument resolves against `--workdir` unless absolute;
//! - configs are JSON documents of the full [`RunConfig`] schema (unknown
//!   keys rejected), and flags override config fields, which override
//!   built-in defaults;
//! - output directories are append-only; `--force` to re-run into one;
//! - `--threads` (or `BAI_THREADS`) changes wall-clock only, never outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::run::{self, RewardMode, RunConfig};
use crate::synth::Style;

#[derive(Parser, Debug)]
#[command(
    name = "bai",
    version,
    about = "Desk-scale RLHF lab: checkpoint merging, PPO against learned reward models, \
             and training-dynamics analysis, bit-reproducible at any thread count"
)]
pub struct Cli {
    /// Root directory for artifacts; relative paths resolve against it
    #[arg(long, global = true, default_value = "./runs")]
    pub workdir: PathBuf,

    /// Worker threads, 0 = one per core (affects wall-clock only, never outputs)
    #[arg(long, global = true, env = "BAI_THREADS", default_value_t = 0)]
    pub threads: usize,

    /// Write into non-empty output directories / overwrite existing outputs
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub cmd: Cmd,
}

/// Flags shared by every stage that reads the run configuration.
#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// JSON run-configuration file; absent fields fill from defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_style(s: &str) -> std::result::Result<Style, String> {
    match s {
        "instruct" => Ok(Style::Instruct),
        "reason" => Ok(Style::Reason),
        other => Err(format!("expected instruct or reason, got {other:?}")),
    }
}

fn parse_reward(s: &str) -> std::result::Result<RewardMode, String> {
    RewardMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic datasets: pretraining corpus, both SFT sets,
    /// and preference pairs with a held-out slice
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the data-generation seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a fresh base model on the pretraining corpus
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override both the init seed and the batch-order seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the optimizer step count
        #[arg(long)]
        steps: Option<usize>,
        /// Dataset directory (from gen-data)
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Output directory
        #[arg(long, default_value = "base")]
        out: PathBuf,
    },
    /// Supervised fine-tune from a checkpoint on one episode style
    Sft {
        /// Episode style: instruct or reason
        #[arg(long, value_parser = parse_style)]
        kind: Style,
        #[command(flatten)]
        config: ConfigArgs,
        /// Override this stage's batch-order seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the optimizer step count
        #[arg(long)]
        steps: Option<usize>,
        /// Starting checkpoint
        #[arg(long, default_value = "base/base.ckpt")]
        init: PathBuf,
        /// Dataset directory (from gen-data)
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Output directory [default: sft_<kind>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reward model on preference pairs (trunk from a checkpoint,
    /// fresh scalar head)
    TrainRm {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the batch-order seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the optimizer step count
        #[arg(long)]
        steps: Option<usize>,
        /// Trunk checkpoint to start from (the pairwise objective needs a
        /// trunk that already reads the task; a raw base trunk stalls)
        #[arg(long, default_value = "sft_instruct/sft_instruct.ckpt")]
        init: PathBuf,
        /// Dataset directory (from gen-data)
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Output directory
        #[arg(long, default_value = "rm")]
        out: PathBuf,
    },
    /// Execute a merge recipe: weighted combination of checkpoints, with an
    /// optional second stage interpolating toward a base model
    Merge {
        /// Recipe JSON; paths inside it resolve against the recipe's own directory
        #[arg(long)]
        recipe: PathBuf,
    },
    /// RLHF-train a policy (or, with --eval-only, just score it)
    Rl {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the rollout/shuffle seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the PPO step count
        #[arg(long)]
        steps: Option<usize>,
        /// Actor checkpoint to start from
        #[arg(long)]
        actor: PathBuf,
        /// Reward-model checkpoint (also initializes the critic)
        #[arg(long)]
        rm: PathBuf,
        /// Episode scoring: rm (trained model) or oracle (ground truth)
        #[arg(long, default_value = "rm", value_parser = parse_reward)]
        reward: RewardMode,
        /// Score the starting policy for one step instead of training
        #[arg(long)]
        eval_only: bool,
        /// Run directory
        #[arg(long, default_value = "rl")]
        out: PathBuf,
    },
    /// Compare finished runs: detector verdicts, report table, overlay plots
    Analyze {
        /// Run directories to compare
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Interpolation-ratio sweep: merge base↔SFT at each α, RLHF-train each,
    /// and tabulate the outcomes side by side
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the rollout/shuffle seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the PPO step count per run
        #[arg(long)]
        steps: Option<usize>,
        /// Base checkpoint (interpolation target)
        #[arg(long)]
        base: PathBuf,
        /// Fine-tuned checkpoint
        #[arg(long)]
        sft: PathBuf,
        /// Reward-model checkpoint
        #[arg(long)]
        rm: PathBuf,
        /// Interpolation ratios (weight on the base model)
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        )]
        alphas: Vec<f64>,
        /// Output directory
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// End-to-end seeded comparison: one dataset and base model, both SFT
    /// variants, a reward model, three merges, four policy runs, analysis,
    /// and a byte-reproducible demo manifest
    Demo {
        #[command(flatten)]
        config: ConfigArgs,
        /// Demo seed; shifts every stage seed in the configuration
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the PPO step count per run
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory
        #[arg(long, default_value = "demo")]
        out: PathBuf,
    },
}

/// Resolve a path argument against the workdir (absolute paths pass through).
fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn load_config(workdir: &Path, args: &ConfigArgs) -> Result<RunConfig> {
    match &args.config {
        Some(p) => RunConfig::load(&resolve(workdir, p)),
        None => Ok(RunConfig::default()),
    }
}

fn print_file(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    print!("{text}");
    Ok(())
}

/// Dispatch a parsed command line. Wired to a process by [`exec`].
pub fn dispatch(cli: Cli) -> Result<()> {
    let wd = &cli.workdir;
    let force = cli.force;
    match cli.cmd {
        Cmd::GenData { config, seed, out } => {
            let mut cfg = load_config(wd, &config)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let out = resolve(wd, &out);
            let man = run::gen_data(&cfg, &out, force)?;
            println!("wrote {} dataset files to {}", man.outputs.len(), out.display());
        }
        Cmd::Pretrain { config, seed, steps, data, out } => {
            let mut cfg = load_config(wd, &config)?;
            if let Some(s) = seed {
                cfg.init_seed = s;
                cfg.pretrain.seed = s;
            }
            if let Some(n) = steps {
                cfg.pretrain.steps = n;
            }
            let ckpt = run::pretrain(&cfg, &resolve(wd, &data), &resolve(wd, &out), force)?;
            println!("base checkpoint: {}", ckpt.display());
        }
        Cmd::Sft { kind, config, seed, steps, init, data, out } => {
            let mut cfg = load_config(wd, &config)?;
            let block = match kind {
                Style::Instruct => &mut cfg.sft_instruct,
                Style::Reason => &mut cfg.sft_reason,
            };
            if let Some(s) = seed {
                block.seed = s;
            }
            if let Some(n) = steps {
                block.steps = n;
            }
            let out = out.unwrap_or_else(|| {
                PathBuf::from(match kind {
                    Style::Instruct => "sft_instruct",
                    Style::Reason => "sft_reason",
                })
            });
            let (ckpt, holdout_ce) = run::sft(
                &cfg,
                kind,
                &resolve(wd, &init),
                &resolve(wd, &data),
                &resolve(wd, &out),
                force,
            )?;
            println!("checkpoint: {}", ckpt.display());
            println!("holdout cross-entropy: {holdout_ce:.4} nats/token");
        }
        Cmd::TrainRm { config, seed, steps, init, data, out } => {
            let mut cfg = load_config(wd, &config)?;
            if let Some(s) = seed {
                cfg.rm.seed = s;
            }
            if let Some(n) = steps {
                cfg.rm.steps = n;
            }
            let (ckpt, acc) = run::train_rm(
                &cfg,
                &resolve(wd, &init),
                &resolve(wd, &data),
                &resolve(wd, &out),
                force,
            )?;
            println!("reward-model checkpoint: {}", ckpt.display());
            println!("holdout pairwise accuracy: {acc:.4}");
        }
        Cmd::Merge { recipe } => {
            let report = run::merge_cmd(&resolve(wd, &recipe), force)?;
            println!("merged checkpoint: {}", report.out_path.display());
            println!("sha256: {}", report.out_digest);
        }
        Cmd::Rl { config, seed, steps, actor, rm, reward, eval_only, out } => {
            let mut cfg = load_config(wd, &config)?;
            if let Some(s) = seed {
                cfg.ppo.seed = s;
            }
            if let Some(n) = steps {
                cfg.ppo.steps = n;
            }
            let out = resolve(wd, &out);
            let metrics = run::rl(
                &cfg,
                &resolve(wd, &actor),
                &resolve(wd, &rm),
                reward,
                eval_only,
                &out,
                force,
            )?;
            let last = metrics.last().expect("run produced at least one step");
            println!("run directory: {}", out.display());
            println!(
                "{} steps; final mean length {:.2}, mean reward {:.4}",
                metrics.len(),
                last.mean_len,
                last.mean_reward
            );
        }
        Cmd::Analyze { runs, config, out } => {
            let cfg = load_config(wd, &config)?;
            let dirs: Vec<PathBuf> = runs.iter().map(|r| resolve(wd, r)).collect();
            let out = resolve(wd, &out);
            run::analyze(&dirs, &cfg.detectors, cfg.buckets, &out, force)?;
            print_file(&out.join("report.txt"))?;
            println!("full analysis in {}", out.display());
        }
        Cmd::Sweep { config, seed, steps, base, sft, rm, alphas, out } => {
            let mut cfg = load_config(wd, &config)?;
            if let Some(s) = seed {
                cfg.ppo.seed = s;
            }
            if let Some(n) = steps {
                cfg.ppo.steps = n;
            }
            let out = resolve(wd, &out);
            run::sweep(
                &cfg,
                &resolve(wd, &base),
                &resolve(wd, &sft),
                &resolve(wd, &rm),
                &alphas,
                &out,
                force,
            )?;
            print_file(&out.join("sweep.txt"))?;
            println!("per-α runs in {}", out.display());
        }
        Cmd::Demo { config, seed, steps, out } => {
            let mut cfg = match &config.config {
                Some(p) => RunConfig::load(&resolve(wd, p))?,
                None => RunConfig::demo(),
            };
            cfg.shift_seeds(seed);
            if let Some(n) = steps {
                cfg.ppo.steps = n;
            }
            let out = resolve(wd, &out);
            let man = run::demo(&cfg, seed, &out, force)?;
            print_file(&out.join("analysis").join("report.txt"))?;
            let c = &man.checks;
            println!("reward-model holdout accuracy: {:.4}", man.rm_holdout_accuracy);
            println!(
                "no-merge reasoning run:  collapsed {}  hockey-stick {}",
                c.reason_rl_collapsed, c.reason_rl_hockey_stick
            );
            println!(
                "balanced (α=0.5) run:    collapsed {}  hockey-stick {}  final/initial length {:.3}",
                c.balanced_rl_collapsed, c.balanced_rl_hockey_stick, c.balanced_final_len_frac
            );
            println!("demo checks: {}", if c.pass { "PASS" } else { "FAIL" });
            println!("manifest: {}", out.join("demo_manifest.json").display());
        }
    }
    Ok(())
}

/// Process entry point: parse, set up the thread pool, dispatch, and map
/// errors to the exit-code taxonomy (1 usage, 2 config, 3 data, 4 numeric,
/// 5 io).
pub fn exec<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; those print to stdout and
            // exit 0, real usage errors go to stderr and exit 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn global_flags_and_defaults() {
        let cli = parse(&["bai", "gen-data"]);
        assert_eq!(cli.workdir, PathBuf::from("./runs"));
        assert!(!cli.force);
        let Cmd::GenData { out, seed, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(out, PathBuf::from("data"));
        assert_eq!(seed, None);

        let cli = parse(&["bai", "--workdir", "/tmp/x", "--force", "gen-data", "--seed", "9"]);
        assert_eq!(cli.workdir, PathBuf::from("/tmp/x"));
        assert!(cli.force);
        let Cmd::GenData { seed, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(seed, Some(9));

        // globals also parse after the subcommand
        let cli = parse(&["bai", "rl", "--actor", "a", "--rm", "r", "--force"]);
        assert!(cli.force);
    }

    #[test]
    fn sweep_alpha_grid_defaults_to_nine_ratios() {
        let cli = parse(&["bai", "sweep", "--base", "b", "--sft", "s", "--rm", "r"]);
        let Cmd::Sweep { alphas, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(alphas, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);

        let cli =
            parse(&["bai", "sweep", "--base", "b", "--sft", "s", "--rm", "r", "--alphas", "0.25,0.75"]);
        let Cmd::Sweep { alphas, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(alphas, vec![0.25, 0.75]);
    }

    #[test]
    fn enums_parse_and_reject() {
        let cli = parse(&["bai", "sft", "--kind", "reason"]);
        let Cmd::Sft { kind, out, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(kind, Style::Reason);
        assert_eq!(out, None);
        assert!(Cli::try_parse_from(["bai", "sft", "--kind", "chat"]).is_err());

        let cli = parse(&["bai", "rl", "--actor", "a", "--rm", "r", "--reward", "oracle"]);
        let Cmd::Rl { reward, eval_only, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(reward, RewardMode::Oracle);
        assert!(!eval_only);
        assert!(Cli::try_parse_from(["bai", "rl", "--actor", "a", "--rm", "r", "--reward", "gold"])
            .is_err());
    }

    #[test]
    fn analyze_requires_at_least_one_run() {
        assert!(Cli::try_parse_from(["bai", "analyze"]).is_err());
        let cli = parse(&["bai", "analyze", "r1", "r2"]);
        let Cmd::Analyze { runs, .. } = cli.cmd else { panic!("wrong cmd") };
        assert_eq!(runs.len(), 2);
    }

    #[test]
    fn paths_resolve_against_workdir_absolute_pass_through() {
        let wd = Path::new("/work");
        assert_eq!(resolve(wd, Path::new("data")), PathBuf::from("/work/data"));
        assert_eq!(resolve(wd, Path::new("/abs/data")), PathBuf::from("/abs/data"));
    }

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(exec(["bai", "--help"]), 0);
        assert_eq!(exec(["bai", "demo", "--help"]), 0);
        assert_eq!(exec(["bai", "--version"]), 0);
        assert_eq!(exec(["bai"]), 1); // missing subcommand
        assert_eq!(exec(["bai", "frobnicate"]), 1); // unknown subcommand
        assert_eq!(exec(["bai", "rl"]), 1); // missing required --actor/--rm
    }
}
