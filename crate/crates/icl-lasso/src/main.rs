//! Command-line driver: emit banks and weights, solve episode Lasso
//! problems, run verified episodes, and sweep risk over parameter grids.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use icl_lasso::features;
use icl_lasso::harness::{
    self, ExperimentConfig, HarnessError, SweepGrid,
};
use icl_lasso::transformer::build_icl_transformer;

#[derive(Parser)]
#[command(name = "icl-lasso", about = "In-context Lasso via constructed transformer weights")]
struct Cli {
    /// Path to the experiment config JSON
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's bank and member seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the sampled feature bank as JSON
    Bank {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run proximal gradient on one episode's Lasso problem; emit a trajectory CSV
    Solve {
        /// Iteration count (default: the config's (L-1)/2)
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the constructed transformer weights as JSON
    Build {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one verified episode and print its report
    Episode {
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Certify the emulation bounds on every configured seed
    Verify,
    /// Risk estimates over a parameter grid, appended to a CSV
    Sweep {
        /// Axes like "N=32,128,512;L=5,21;tau=1e5,1e6"
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        cfg.bank_seed = seed;
        cfg.member_seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, HarnessError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Bank { out } => {
            let bank =
                features::make_feature_bank(&cfg.spec, cfg.n, cfg.tau_ff, cfg.bank_seed)?;
            emit(out.as_ref(), &serde_json::to_string_pretty(&bank).expect("bank json"))?;
        }
        Command::Solve {
            steps,
            data_seed,
            out,
        } => {
            let steps = steps.unwrap_or((cfg.depth - 1) / 2);
            let data_seed = data_seed.unwrap_or(cfg.seeds[0]);
            match out {
                Some(path) => {
                    let file = std::fs::File::create(path)?;
                    harness::solve_to_csv(&cfg, cfg.member_seed, data_seed, steps, file)?;
                }
                None => {
                    let mut buf = Vec::new();
                    harness::solve_to_csv(&cfg, cfg.member_seed, data_seed, steps, &mut buf)?;
                    print!("{}", String::from_utf8_lossy(&buf));
                }
            }
        }
        Command::Build { out } => {
            let bank =
                features::make_feature_bank(&cfg.spec, cfg.n, cfg.tau_ff, cfg.bank_seed)?;
            let weights = build_icl_transformer(
                &bank,
                cfg.depth,
                cfg.resolved_lambda(),
                cfg.tau,
                cfg.resolved_eta(),
                cfg.n_prompt,
            )?;
            emit(out.as_ref(), &weights.to_json())?;
        }
        Command::Episode { data_seed } => {
            let data_seed = data_seed.unwrap_or(cfg.seeds[0]);
            let report = harness::run_episode(&cfg, cfg.member_seed, data_seed)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report json"));
            if !report.emulation_ok {
                return Ok(false);
            }
        }
        Command::Verify => {
            let outcomes = harness::verify_config(&cfg)?;
            println!(
                "{:>10} {:>13} {:>13} {:>13} {:>13} {:>6}",
                "data_seed", "max_resid", "max_bound", "readout_gap", "readout_bnd", "ok"
            );
            let mut all_ok = true;
            for o in &outcomes {
                println!(
                    "{:>10} {:>13.4e} {:>13.4e} {:>13.4e} {:>13.4e} {:>6}",
                    o.data_seed,
                    o.max_residual,
                    o.max_bound,
                    o.readout_gap,
                    o.readout_bound,
                    if o.ok { "pass" } else { "FAIL" }
                );
                all_ok &= o.ok;
            }
            return Ok(all_ok);
        }
        Command::Sweep { grid, out } => {
            let grid = match grid {
                Some(text) => SweepGrid::parse(text)?,
                None => SweepGrid::default(),
            };
            let out = out
                .clone()
                .or_else(|| cfg.output.clone())
                .ok_or_else(|| {
                    HarnessError::Config("sweep needs --out or an output path in the config".into())
                })?;
            let rows = harness::sweep(&cfg, &grid, &out)?;
            eprintln!("wrote {} new rows to {}", rows.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ (HarnessError::Config(_) | HarnessError::Feature(_))) => {
            eprintln!("{{\"error\":\"validation\",\"message\":{:?}}}", e.to_string());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{{\"error\":\"runtime\",\"message\":{:?}}}", e.to_string());
            ExitCode::from(2)
        }
    }
}
