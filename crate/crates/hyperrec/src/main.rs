use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperrec::config::{RunConfig, SEED_ENV};
use hyperrec::pipeline;

#[derive(Parser)]
#[command(name = "hyperrec", version, about = "Hypergraph-enhanced recommendation pipeline")]
struct Cli {
    /// `key=value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-block synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print user, item and interaction counts and sparsity.
    Stats {
        #[arg(long)]
        interactions: PathBuf,
    },
    /// Serialize the interaction matrix and hypergraph operators.
    BuildGraphs {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain embeddings and export the item table.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the prefix-injected decoder on a pretraining run.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute test metrics of a run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Pretrain once per value of one configuration key.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cli: &Cli, config: Option<PathBuf>, extra: Vec<String>) -> anyhow::Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    let mut sets = extra;
    sets.extend(cli.sets.iter().cloned());
    Ok(RunConfig::resolve(config.as_deref(), &sets, env.as_deref())?)
}

fn path_set(key: &str, p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{key}={}", p.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.config.clone();
    match &cli.command {
        Command::Synth { out, seed } => {
            let extra = seed.map(|s| format!("seed={s}")).into_iter().collect();
            let cfg = resolve(&cli, file, extra)?;
            let s = pipeline::synth(&cfg, out)?;
            println!("{}", pipeline::format_stats(&s));
        }
        Command::Stats { interactions } => {
            let s = pipeline::stats(interactions)?;
            println!("{}", pipeline::format_stats(&s));
        }
        Command::BuildGraphs { data, out } => {
            let cfg = resolve(&cli, file, path_set("data", data).into_iter().collect())?;
            for f in pipeline::build_graphs(&cfg, out)? {
                println!("{}", out.join(f).display());
            }
        }
        Command::Pretrain { data, out } => {
            let cfg = resolve(&cli, file, path_set("data", data).into_iter().collect())?;
            let r = pipeline::pretrain(&cfg, out)?;
            println!(
                "best_epoch={} epochs={} {}",
                r.best_epoch,
                r.epochs_run,
                hyperrec::report::metric_cells(&r.test)
            );
        }
        Command::Finetune { data, pretrained, out } => {
            let extra = [path_set("data", data), path_set("pretrained", pretrained)]
                .into_iter()
                .flatten()
                .collect();
            let cfg = resolve(&cli, file, extra)?;
            let r = pipeline::finetune(&cfg, out)?;
            println!(
                "trainable_fraction={:.6} {}",
                r.trainable_fraction,
                hyperrec::report::metric_cells(&r.test)
            );
        }
        Command::Evaluate { run, data } => {
            // The run's own resolved config comes first; an explicit --config replaces it.
            let base = file.unwrap_or_else(|| run.join(pipeline::CONFIG_FILE));
            let cfg = resolve(&cli, Some(base), path_set("data", data).into_iter().collect())?;
            let (model, m) = pipeline::evaluate(&cfg, run)?;
            println!("{model} {}", hyperrec::report::metric_cells(&m));
        }
        Command::Sweep { data, param, values, out } => {
            let cfg = resolve(&cli, file, path_set("data", data).into_iter().collect())?;
            let rows = pipeline::sweep(&cfg, param, values, out)?;
            for (v, m) in rows {
                println!("{param}={v} {}", hyperrec::report::metric_cells(&m));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
