use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedtp_cli::{
    cmd_eval, cmd_finetune_novel, cmd_partition, cmd_rollout, cmd_train, parse_config, train_config, trained_config,
    CliError, Overrides, Preset, RunDir,
};
use fedtp_core::StrategyName;

#[derive(Parser)]
#[command(name = "fedtp", version, about = "Federated transformer personalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the dataset and split it across clients.
    Partition {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run the federation over an existing partition.
    Train {
        #[command(flatten)]
        flags: Flags,
    },
    /// Evaluate every client from a checkpoint.
    Eval {
        #[command(flatten)]
        stage: Stage,
    },
    /// Write per-client attention rollout maps for one probe image.
    Rollout {
        #[command(flatten)]
        stage: Stage,
        /// Dataset index of the probe image.
        #[arg(long)]
        probe: Option<usize>,
    },
    /// Fit embeddings for the held-out clients.
    FinetuneNovel {
        #[command(flatten)]
        stage: Stage,
    },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<StrategyName>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    server_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long = "sample_rate", alias = "sample-rate")]
    sample_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// pathological, dirichlet, pachinko or noise_ladder.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta_fine: Option<f64>,
    #[arg(long)]
    classes_per_client: Option<usize>,
    #[arg(long)]
    sigma_max: Option<f64>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            strategy: self.strategy,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            lr: self.lr,
            server_lr: self.server_lr,
            batch_size: self.batch_size,
            clients: self.clients,
            sample_rate: self.sample_rate,
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
            scheme: self.scheme.clone(),
            alpha: self.alpha,
            beta_fine: self.beta_fine,
            classes_per_client: self.classes_per_client,
            sigma_max: self.sigma_max,
        }
    }
}

#[derive(Args)]
struct Stage {
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<StrategyName, String> {
    StrategyName::parse(s).map_err(|e| e.to_string())
}

fn missing_out() -> CliError {
    CliError::Config("out: train needs --out pointing at a partitioned run directory".into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Partition { preset, flags } => {
            let cfg = parse_config(preset, flags.config.as_deref(), &flags.overrides())?;
            let s = cmd_partition(&cfg)?;
            println!(
                "partitioned {} clients into {} (train sizes {:?})",
                s.num_clients,
                s.run_dir.display(),
                s.train_sizes
            );
        }
        Command::Train { flags } => {
            let run = RunDir::new(flags.out.clone().ok_or_else(missing_out)?);
            let cfg = train_config(&run, flags.config.as_deref(), &flags.overrides())?;
            let s = cmd_train(&run, &cfg, &mut |r| {
                if let Some(acc) = r.weighted_acc {
                    eprintln!("round {} loss {:.4} acc {:.4}", r.round, r.mean_train_loss(), acc);
                }
            })?;
            println!(
                "trained {} rounds, final accuracy {}",
                s.rounds,
                s.final_weighted_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Command::Eval { stage } => {
            let run = RunDir::new(&stage.out);
            let cfg = trained_config(&run, stage.checkpoint.as_deref(), stage.workers)?;
            let s = cmd_eval(&run, &cfg, stage.checkpoint.as_deref())?;
            println!("round {} weighted accuracy {:.4}", s.round, s.weighted_acc);
        }
        Command::Rollout { stage, probe } => {
            let run = RunDir::new(&stage.out);
            let cfg = trained_config(&run, stage.checkpoint.as_deref(), stage.workers)?;
            let s = cmd_rollout(&run, &cfg, probe, stage.checkpoint.as_deref())?;
            println!(
                "wrote {} maps for probe {}, mean pairwise divergence {:.6}",
                s.maps.len(),
                s.probe,
                s.divergence
            );
        }
        Command::FinetuneNovel { stage } => {
            let run = RunDir::new(&stage.out);
            let cfg = trained_config(&run, stage.checkpoint.as_deref(), stage.workers)?;
            for r in cmd_finetune_novel(&run, &cfg, stage.checkpoint.as_deref())? {
                println!("client {} before {:.4} after {:.4}", r.client, r.before, r.after);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
