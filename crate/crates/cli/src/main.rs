//! `scfl` command-line front end.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use scfl_core::harness::{self, SweepAxis, SweepSpec};
use scfl_core::incentive::{self, Gamma, SolverOptions};
use scfl_core::{data, privacy, DevicePartition, ExperimentConfig, Framework};

#[derive(Parser)]
#[command(name = "scfl", version, about = "Stochastic coded federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run SCFL from a TOML config and write its artifacts.
    Simulate {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat a config over values of one axis.
    Sweep {
        config: PathBuf,
        /// tau | straggler_ratio | coded_count_c | sigma2 | lambda | total_reward
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several frameworks on the same scenario.
    Compare {
        config: PathBuf,
        /// scfl, fedavg, codedfedl, dpcfl
        #[arg(long, value_delimiter = ',', default_value = "scfl,fedavg,codedfedl,dpcfl")]
        kinds: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-device privacy budgets for a dataset split evenly across devices.
    Privacy {
        data: PathBuf,
        /// One noise level for all devices, or one per device.
        #[arg(long, value_delimiter = ',', required = true)]
        sigma: Vec<f64>,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        o: usize,
        #[arg(long)]
        devices: usize,
        #[arg(long)]
        c: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the noise-level contract for a `device,mu,h2` table.
    Contract {
        econ: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma_min2: f64,
        /// Performance function: `neg_square` or `neg_linear:<weight>`.
        #[arg(long, default_value = "neg_square")]
        gamma: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Total reward and noise as functions of the payment weight.
    LambdaTable {
        econ: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma_min2: f64,
        #[arg(long, default_value = "neg_square")]
        gamma: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn parse_gamma(s: &str) -> Result<Gamma> {
    match s.split_once(':') {
        None if s == "neg_square" => Ok(Gamma::NegSquare),
        Some(("neg_linear", w)) => Ok(Gamma::NegLinear(w.parse().context("neg_linear weight")?)),
        _ => bail!("unknown performance function `{s}`; use neg_square or neg_linear:<weight>"),
    }
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg = load_config(&config, out)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let report = harness::run_experiment(&cfg)?;
            let s = &report.summary;
            println!(
                "wrote {} ({} rounds, final train loss {:.6e}, gap {:.6e})",
                report.dir.display(),
                s.rounds,
                s.final_train_loss,
                s.final_gap
            );
        }
        Command::Sweep { config, axis, values, repetitions, out } => {
            let cfg = load_config(&config, out)?;
            let axis = SweepAxis::parse(&axis).with_context(|| format!("unknown axis `{axis}`"))?;
            let report = harness::run_sweep(&cfg, &SweepSpec { axis, values, repetitions })?;
            println!(
                "wrote {} ({} runs, {} failed)",
                cfg.output_dir.join("sweep.csv").display(),
                report.points.len(),
                report.failures.len()
            );
            if !report.failures.is_empty() {
                bail!("{} sweep runs failed; see failures.csv", report.failures.len());
            }
        }
        Command::Compare { config, kinds, out } => {
            let cfg = load_config(&config, out)?;
            let kinds: Vec<Framework> = kinds
                .iter()
                .map(|k| Framework::parse(k).with_context(|| format!("unknown framework `{k}`")))
                .collect::<Result<_>>()?;
            for s in harness::compare_baselines(&cfg, &kinds)? {
                println!("{:<10} final train loss {:.6e}", s.framework.name(), s.final_train_loss);
            }
        }
        Command::Privacy { data: path, sigma, d, o, devices, c, out } => {
            let ds = data::load_csv(&path, d, o)?;
            let part = DevicePartition::even(ds.m(), devices)?;
            let sigma = match sigma.len() {
                1 => vec![sigma[0]; devices],
                n if n == devices => sigma,
                n => bail!("--sigma has {n} values for {devices} devices"),
            };
            let profiles = privacy::device_profiles(&ds, &part, c, &sigma)?;
            harness::write_privacy(sink(&out)?, &profiles)?;
        }
        Command::Contract { econ, lambda, c, sigma_min2, gamma, out } => {
            let econ = incentive::load_econ_csv(&econ, c)?;
            let designed = incentive::design_contract(&econ, lambda, &parse_gamma(&gamma)?, &SolverOptions { sigma_min2 })?;
            harness::write_contract(sink(&out)?, &econ, &designed)?;
        }
        Command::LambdaTable { econ, grid, c, sigma_min2, gamma, out } => {
            let econ = incentive::load_econ_csv(&econ, c)?;
            let rows = incentive::lambda_table(&econ, &grid, &parse_gamma(&gamma)?, &SolverOptions { sigma_min2 })?;
            harness::write_lambda_table(sink(&out)?, &rows)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
