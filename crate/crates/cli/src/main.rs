use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use maven_core::agents::{fit_uniform_visitation, Algo, UniformFitConfig};
use maven_core::analysis::{bounds_report, tensor_report};
use maven_core::game::PayoffTensor;
use maven_core::harness::{parse_config, run_sweep, worker_count};

#[derive(Parser)]
#[command(name = "maven", version, about = "Value-decomposition and latent-exploration experiments on matrix games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitAlgo {
    Vdn,
    Qmix,
}

#[derive(Subcommand)]
enum Command {
    /// Suboptimality bounds for the n-agent, k-action template game.
    Bounds {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        reward: f64,
        /// Final exploration rate; needs --horizon.
        #[arg(long, requires = "horizon")]
        eps: Option<f64>,
        #[arg(long, requires = "eps")]
        horizon: Option<f64>,
    },
    /// Nonmonotonicity and (optionally) monotone projections of a payoff tensor.
    Analyze {
        tensor: PathBuf,
        #[arg(long)]
        project: bool,
    },
    /// Fit VDN or QMIX to a payoff tensor with every joint action weighted equally.
    FitUniform {
        #[arg(long, value_enum)]
        algo: FitAlgo,
        tensor: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Run a seed sweep from a TOML experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seeds with 0..S.
        #[arg(long)]
        seeds: Option<u64>,
        /// Output directory; overrides the config's [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn read_tensor(path: &Path) -> Result<PayoffTensor> {
    PayoffTensor::read_json(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Bounds { n, k, reward, eps, horizon } => {
            let report = bounds_report(n, k, reward, eps.zip(horizon))?;
            print(&serde_json::to_value(report)?);
        }
        Command::Analyze { tensor, project } => {
            let report = tensor_report(&read_tensor(&tensor)?, project)?;
            print(&serde_json::to_value(report)?);
        }
        Command::FitUniform { algo, tensor, seed, max_iterations } => {
            let payoff = read_tensor(&tensor)?;
            let mut cfg = UniformFitConfig { seed, ..Default::default() };
            if let Some(m) = max_iterations {
                cfg.max_iterations = m;
            }
            let algo = match algo {
                FitAlgo::Vdn => Algo::Vdn,
                FitAlgo::Qmix => Algo::Qmix,
            };
            let fit = fit_uniform_visitation(algo, &payoff, &cfg);
            print(&json!({
                "algo": fit.algo,
                "table": fit.table,
                "greedy_joint_action": fit.greedy_joint_action().0,
                "decentralised_greedy": fit.decentralised_greedy().0,
                "per_agent_utilities": fit.per_agent_utilities,
                "final_loss": fit.final_loss(),
                "iterations": fit.iterations,
                "converged": fit.converged,
            }));
        }
        Command::Train { config, seeds, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seeds {
                if s == 0 {
                    bail!("--seeds must be at least 1");
                }
                cfg.seeds = (0..s).collect();
            }
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}", cfg.algo)));
            let workers = worker_count();
            eprintln!(
                "running {} seeds of {} on {workers} worker(s) into {}",
                cfg.seeds.len(),
                cfg.algo,
                dir.display()
            );
            let result = run_sweep(&cfg, Some(&dir), workers)?;
            for (seed, err) in &result.failures {
                eprintln!("seed {seed} failed: {err}");
            }
            print(&json!({
                "out_dir": dir,
                "completed_seeds": result.seeds.iter().map(|r| r.seed).collect::<Vec<_>>(),
                "failed_seeds": result.failures.iter().map(|f| f.0).collect::<Vec<_>>(),
                "final": result.final_row(),
            }));
            if !result.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
