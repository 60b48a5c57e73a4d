use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resnet_elu::data::{Dataset, Limits, NormalizationMode};
use resnet_elu::gradcheck::certify_all;
use resnet_elu::model::{activation_moment_profile, build_network, gaussian_input, BlockVariant, Network, NetworkConfig};
use resnet_elu::optim::TrainSchedule;
use resnet_elu::train::{evaluate_checkpoint, run, summary_path, RunConfig, DEFAULT_EVAL_BATCH};
use resnet_elu::Rng;

const EXIT_FAILURE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const DATA_DIR_ENV: &str = "CIFAR_DATA_DIR";

#[derive(Parser)]
#[command(name = "resnet-elu", version, about = "Residual networks with exponential linear units on CIFAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test set.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Per-block second moments of a freshly initialized network.
    MomentProfile(ProfileArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "cifar10")]
    dataset: Dataset,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Blocks per stage; depth is 6n+2.
    #[arg(long, default_value_t = 3)]
    depth_n: usize,
    #[arg(long, default_value = "d")]
    variant: BlockVariant,
    #[arg(long, default_value_t = 164)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 0-indexed epochs at which the learning rate is divided by 10.
    #[arg(long, value_delimiter = ',', default_value = "81,122")]
    decay_epochs: Vec<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Metrics CSV; a `.summary` file is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Final checkpoint path; LR-boundary checkpoints get an `.epoch-K` suffix.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// ELU before global average pooling (default: on for ELU variants).
    #[arg(long)]
    head_elu: Option<bool>,
    #[arg(long, default_value = "mean-std")]
    normalization: NormalizationMode,
    /// Also apply weight decay to BN parameters and biases.
    #[arg(long)]
    decay_all_params: bool,
    #[arg(long, default_value_t = DEFAULT_EVAL_BATCH)]
    eval_batch_size: usize,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<Dataset>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Defaults to the test subset size recorded in the checkpoint.
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EVAL_BATCH)]
    batch_size: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, default_value = "a")]
    variant: BlockVariant,
    #[arg(long, default_value_t = 18)]
    depth_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

enum Failure {
    Diverged(String),
    Error(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

fn network_config(n: usize, classes: usize, variant: BlockVariant, alpha: f64, head_elu: Option<bool>) -> NetworkConfig {
    let mut cfg = NetworkConfig::new(n, classes, variant);
    cfg.alpha = alpha;
    if let Some(h) = head_elu {
        cfg.head_elu = h;
    }
    cfg
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let network = network_config(
        args.depth_n,
        args.dataset.classes(),
        args.variant,
        args.alpha,
        args.head_elu,
    );
    let mut cfg = RunConfig::new(args.dataset, &args.data_dir, network);
    cfg.schedule = TrainSchedule {
        base_lr: args.lr,
        decay_epochs: args.decay_epochs,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        total_epochs: args.epochs,
        seed: args.seed,
        decay_all_params: args.decay_all_params,
        ..TrainSchedule::default()
    };
    cfg.normalization = args.normalization;
    cfg.limits = Limits {
        train: args.train_limit,
        test: args.test_limit,
    };
    cfg.eval_batch_size = args.eval_batch_size;
    cfg.metrics_path = args.out;
    cfg.checkpoint_path = args.checkpoint;
    cfg.resume = args.resume;

    if !args.quiet {
        println!(
            "training variant {} depth {} on {} for {} epochs (seed {})",
            cfg.network.variant,
            cfg.network.depth(),
            cfg.dataset,
            cfg.schedule.total_epochs,
            cfg.schedule.seed
        );
    }
    let total = cfg.schedule.total_epochs;
    let quiet = args.quiet;
    let outcome = run(&cfg, &mut |m| {
        if !quiet {
            println!(
                "epoch {:>3}/{total}  lr {:<6}  train_loss {:.4}  train_error {:6.2}%  test_error {:6.2}%  {:.1}s{}",
                m.epoch,
                m.lr,
                m.train_loss,
                m.train_error,
                m.test_error,
                m.wall_seconds,
                if m.diverged { "  DIVERGED" } else { "" }
            );
        }
    })?;

    if let Some(f) = outcome.final_epoch() {
        println!("final-epoch test error: {:.2}% (epoch {})", f.test_error, f.epoch);
    }
    if let Some(b) = outcome.best_epoch() {
        println!("best-epoch test error:  {:.2}% (epoch {})", b.test_error, b.epoch);
    }
    if let Some(path) = &cfg.metrics_path {
        println!("metrics: {} (summary: {})", path.display(), summary_path(path).display());
    }
    match outcome.divergence {
        Some(reason) => Err(Failure::Diverged(reason)),
        None => Ok(()),
    }
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let report = evaluate_checkpoint(&args.checkpoint, args.dataset, &args.data_dir, args.test_limit, args.batch_size)?;
    println!("test error: {:.4}% on {} images", report.test_error, report.images);
    if let Some(recorded) = report.recorded_test_error {
        let epoch = report.epoch.map_or(String::new(), |e| format!(" at epoch {e}"));
        println!("recorded:   {recorded:.4}%{epoch}");
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<(), Failure> {
    let reports = certify_all(seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Error(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn moment_profile(args: ProfileArgs) -> Result<(), Failure> {
    let cfg = network_config(args.depth_n, 10, args.variant, args.alpha, None);
    let mut rng = Rng::new(args.seed);
    let net: Network<f32> = build_network(&cfg, &mut rng)?;
    let x = gaussian_input(args.batch, args.size, &mut rng)?;
    let profile = activation_moment_profile(&net, &x)?;
    println!("block,mean_square");
    for (i, m) in profile.moments.iter().enumerate() {
        println!("{},{m:e}", i + 1);
    }
    println!(
        "# variant {} depth {}: growth ratio {:e}, spread {:e}",
        cfg.variant,
        cfg.depth(),
        profile.growth_ratio(),
        profile.spread()
    );
    Ok(())
}

fn main() -> ExitCode {
    // clap's own usage errors would exit with 2, which is reserved for divergence
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_FAILURE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::MomentProfile(args) => moment_profile(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Diverged(reason)) => {
            eprintln!("diverged: {reason}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
