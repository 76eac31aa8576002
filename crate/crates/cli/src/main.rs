use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedsim_core::bounds::{lemma1_oracle, random_gradients, BoundKind};
use fedsim_core::config::{parse_synthetic_spec, ExperimentConfig};
use fedsim_core::data::{generate_synthetic, save_shards};
use fedsim_core::experiment::{
    check_recorded_run, grid_plan, grid_search, read_records_jsonl, rounds_to_accuracy, run_experiment,
    threads_from_env,
};
use fedsim_core::ParamVector;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV and JSONL.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic federated dataset into a binary shard file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a loss-decrease bound along a run recorded with full_information = true.
    Bounds {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: BoundKind,
        #[arg(long, default_value_t = 200)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Combinatorial oracles.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
    /// Grid search over mu (and psi for folb_het), ranked by final test accuracy.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        mu: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        psi: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Both sides of the gradient-estimation identities for N devices and multisets of size K.
    Lemma1 {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        /// CSV with one gradient per row; random Gaussian gradients otherwise.
        #[arg(long)]
        grads: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_kind(s: &str) -> Result<BoundKind, String> {
    s.parse().map_err(|e: fedsim_core::FedError| e.to_string())
}

fn read_gradients(path: &PathBuf) -> Result<Vec<ParamVector>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut grads = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}: not a numeric row", path.display(), i + 1))?;
        grads.push(ParamVector::from_vec(row));
    }
    Ok(grads)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            let output = run_experiment(&cfg, threads_from_env())?;
            let acc: Vec<f64> = output.records.iter().map(|r| r.test_accuracy).collect();
            let last = output.records.last().expect("at least one round");
            println!(
                "{} seed {}: {} rounds, final train loss {:.6}, final test accuracy {:.4}, rounds to 70% {}",
                cfg.strategy,
                cfg.seed,
                output.records.len(),
                last.train_loss,
                last.test_accuracy,
                rounds_to_accuracy(&acc, 0.7).map_or("never".to_string(), |r| r.to_string())
            );
            println!("wrote {}", output.csv.display());
            println!("wrote {}", output.jsonl.display());
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = parse_synthetic_spec(&text)?;
            let generated = generate_synthetic(&spec)?;
            save_shards(&generated.data, &out)?;
            println!(
                "wrote {} devices ({} training samples, {} test samples) to {}",
                generated.data.shards.len(),
                generated.data.sizes().iter().sum::<usize>(),
                generated.data.test.len(),
                out.display()
            );
        }
        Command::Bounds { run, kind, mc, seed } => {
            let (cfg, records) = read_records_jsonl(&run)?;
            let report = check_recorded_run(&cfg, &records, kind, mc, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            let violated = report.rounds.iter().filter(|r| !r.holds).count();
            eprintln!(
                "{} rounds checked, {} skipped as stationary, {} violations",
                report.rounds.len(),
                report.skipped.len(),
                violated
            );
            if !report.holds {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Oracle {
            which: OracleCommand::Lemma1 { n, k, grads, dim, seed },
        } => {
            let grads = match grads {
                Some(path) => {
                    let g = read_gradients(&path)?;
                    if g.len() != n {
                        bail!("{} holds {} gradients but --n is {n}", path.display(), g.len());
                    }
                    g
                }
                None => random_gradients(n, dim, seed),
            };
            let report = lemma1_oracle(&grads, k, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Grid { config, mu, psi } => {
            let cfg = ExperimentConfig::load(&config)?;
            let plan = grid_plan(&cfg, &mu, &psi)?;
            eprintln!("running {} grid points", plan.len());
            let report = grid_search(&cfg, &mu, &psi, threads_from_env())?;
            for (rank, r) in report.ranking.iter().enumerate() {
                println!(
                    "{}\tmu={}\tpsi={}\tseed={}\tfinal_accuracy={:.4}",
                    rank + 1,
                    r.mu,
                    r.psi.map_or("-".to_string(), |p| p.to_string()),
                    r.seed,
                    r.final_accuracy
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
