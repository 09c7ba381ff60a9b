use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use repsurgery::loss::LossKind;
use repsurgery::merge::CoefficientMode;
use repsurgery::pipeline::{MergeMethod, Suite};
use repsurgery::surgery::Regime;
use repsurgery_cli::config::{self, Overrides};
use repsurgery_cli::{commands, exit_code, TrendViolation, EXIT_OK, EXIT_USAGE};

/// Model merging with representation surgery on a synthetic multi-task benchmark.
#[derive(Parser)]
#[command(name = "repsurgery", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets, pretrain θ₀ and fine-tune one model per task.
    Prepare,
    /// Merge the fine-tuned models with --method.
    Merge,
    /// Train surgery adapters on the merged model of --method.
    Surgery,
    /// Summarize every method with and without surgery over the seed grid.
    Report,
    /// Run a reproduction suite (or `all`) and check its trend.
    Reproduce {
        /// bias-ordering, rank-sweep, loss-sweep, ratio-sweep, online-sweep or all
        suite: String,
    },
}

#[derive(Args)]
struct Flags {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for prepare, merge and surgery; restricts report to one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// avg, task-arith, ties or adamerging
    #[arg(long, global = true)]
    method: Option<MergeMethod>,
    /// Scaling of the summed task vectors (task-arith, ties).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Fraction of each task vector kept by ties.
    #[arg(long, global = true)]
    trim: Option<f64>,
    /// AdaMerging coefficient granularity: task or layer
    #[arg(long, global = true)]
    mode: Option<CoefficientMode>,
    /// Surgery adapter rank.
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// l1, mse, smoothl1 or negcos
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    /// Surgery learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Surgery iterations.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Surgery batch size per task.
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Fraction of unlabeled test inputs visible to surgery.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// offline or online
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method,
            lambda: self.lambda,
            trim: self.trim,
            mode: self.mode,
            rank: self.rank,
            loss: self.loss,
            lr: self.lr,
            iters: self.iters,
            batch: self.batch,
            ratio: self.ratio,
            regime: self.regime,
            out: self.out.clone(),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load(cli.flags.config.as_deref(), &cli.flags.overrides())
        .context("loading configuration")?;
    match cli.command {
        Command::Prepare => {
            let m = commands::prepare(&cfg)?;
            println!("prepared seed {} ({} files)", cfg.seed, m.files.len());
        }
        Command::Merge => {
            commands::merge(&cfg)?;
            println!("merged seed {} with {}", cfg.seed, cfg.merge.method);
        }
        Command::Surgery => {
            commands::surgery(&cfg)?;
            println!(
                "trained surgery for {} (seed {})",
                cfg.merge.method, cfg.seed
            );
        }
        Command::Report => {
            let seeds = match cli.flags.seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            print!("{}", commands::report(&cfg, &seeds)?.to_text());
        }
        Command::Reproduce { suite } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse()?]
            };
            let mut failed = 0;
            for s in suites {
                let result = commands::reproduce(&cfg, s)?;
                for line in commands::verdict_lines(&result) {
                    println!("{line}");
                }
                failed += result.verdicts.iter().filter(|v| !v.passed).count();
            }
            if failed > 0 {
                return Err(TrendViolation { failed }.into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
