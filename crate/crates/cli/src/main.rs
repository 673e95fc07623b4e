use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rmapf::commands::{self, Ctx};
use rmapf::config;
use rmapf::pool::make_pool;
use rmapf::AppError;

/// Robust training and attacked evaluation for shared-policy grid
/// path finding.
#[derive(Parser, Debug)]
#[command(name = "rmapf", version, about)]
struct Cli {
    /// Path to a JSON run configuration (defaults used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. --set adv.alpha_adv=0.4
    /// (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Master seed (overrides the config field).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker parallelism for episodes, cells, certificates, and
    /// gradient shards (default: available cores). Results are
    /// identical for any value.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackKindArg {
    None,
    Fgsm,
    Pgd,
    Gaussian,
    SaltPepper,
    ChannelDropout,
}

impl From<AttackKindArg> for rmapf_core::attacks::AttackKind {
    fn from(k: AttackKindArg) -> Self {
        use rmapf_core::attacks::AttackKind as K;
        match k {
            AttackKindArg::None => K::None,
            AttackKindArg::Fgsm => K::Fgsm,
            AttackKindArg::Pgd => K::Pgd,
            AttackKindArg::Gaussian => K::Gaussian,
            AttackKindArg::SaltPepper => K::SaltPepper,
            AttackKindArg::ChannelDropout => K::ChannelDropout,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the plain PPO baseline from scratch.
    TrainBaseline,
    /// Adversarial PPO starting from a frozen baseline checkpoint.
    TrainAdvppo {
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Certified-radius hinge fine-tune of an adversarially trained
    /// checkpoint.
    FinetuneMacer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Run the attacked evaluation grid (all cells plus clean).
    EvalGrid {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Worst-of-restarts PGD check on selected budgets.
    EvalPgd5 {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGD budgets to re-run (must be grid cells).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.20f32, 0.30f32])]
        eps: Vec<f32>,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
    /// Randomized-smoothing certification over a trajectory state pool.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Side-by-side rollout storyboard of one instance under attack.
    Storyboard {
        /// Checkpoints to replay (repeatable).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        instance_seed: u64,
        #[arg(long, value_enum, default_value_t = AttackKindArg::Fgsm)]
        attack: AttackKindArg,
        /// Attack parameter (budget, sigma, or rate depending on kind).
        #[arg(long, default_value_t = 0.20)]
        eps: f32,
    },
    /// Cross-seed aggregation of grid reports (mean and ddof=1 std).
    Report {
        /// Grid report JSON files (repeatable).
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Paired bootstrap comparison of two grid reports.
    Compare {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = config::resolve(cli.config.as_deref(), &cli.sets, cli.seed)?;
    if cli.print_config {
        println!("{}", cfg.to_canonical_json());
        return Ok(());
    }
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let pool = make_pool(Some(jobs));
    let ctx = Ctx { cfg, out: cli.out, pool: pool.as_ref(), jobs, quiet: cli.quiet };

    match &cli.command {
        Command::TrainBaseline => commands::train_baseline(&ctx),
        Command::TrainAdvppo { baseline } => commands::train_advppo(&ctx, baseline),
        Command::FinetuneMacer { checkpoint, baseline } => {
            commands::finetune_macer(&ctx, checkpoint, baseline)
        }
        Command::EvalGrid { checkpoint } => commands::eval_grid(&ctx, checkpoint),
        Command::EvalPgd5 { checkpoint, eps, restarts } => {
            commands::eval_pgd5(&ctx, checkpoint, eps, *restarts)
        }
        Command::Certify { checkpoint } => commands::certify(&ctx, checkpoint),
        Command::Storyboard { checkpoints, instance_seed, attack, eps } => {
            commands::storyboard(&ctx, checkpoints, *instance_seed, (*attack).into(), *eps)
        }
        Command::Report { inputs } => commands::report(&ctx, inputs),
        Command::Compare { report_a, report_b } => commands::compare(&ctx, report_a, report_b),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
