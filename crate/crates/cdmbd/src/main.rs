use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdmbd::error::CdmbdError;
use cdmbd::experiment::{
    emit_plot_data, load_results, run_experiment, ExperimentConfig, ExperimentKind,
};

#[derive(Parser)]
#[command(
    name = "cdmbd",
    about = "Constrained dynamic Markov-blanket detection experiment harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write results, traces, and plot data.
    Run {
        /// Path to a TOML experiment config.
        config: PathBuf,
        /// Added to every chain seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Override the number of chains (truncates or extends the seed list).
        #[arg(long)]
        chains: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run only the requirement-free gap diagnostic for a config.
    Gap {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit plot-data CSV files from a results directory.
    Plots {
        /// Directory containing results.json.
        results_dir: PathBuf,
    },
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed_offset: u64,
    chains: Option<usize>,
    out: Option<PathBuf>,
) {
    for seed in &mut cfg.chain.seeds {
        *seed = seed.wrapping_add(seed_offset);
    }
    if let Some(n) = chains {
        let mut seeds = cfg.chain.seeds.clone();
        while seeds.len() < n {
            let next = seeds.last().copied().unwrap_or(0).wrapping_add(1);
            seeds.push(next);
        }
        seeds.truncate(n.max(1));
        cfg.chain.seeds = seeds;
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
}

fn exit_code_for(err: &CdmbdError) -> u8 {
    match err {
        CdmbdError::InvalidConfig(_) | CdmbdError::ChannelOutOfRange(_) | CdmbdError::Io(_) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), (CdmbdError, u8)> {
    match cli.command {
        Command::Run {
            config,
            seed_offset,
            chains,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| (e, 2))?;
            apply_overrides(&mut cfg, seed_offset, chains, out);
            let artifacts = run_experiment(&cfg).map_err(|e| {
                let code = exit_code_for(&e);
                (e, code)
            })?;
            println!("results: {}", artifacts.results.display());
            println!("traces:  {}", artifacts.traces.display());
            for f in artifacts.plot_files {
                println!("plot:    {}", f.display());
            }
            Ok(())
        }
        Command::Gap {
            config,
            seed_offset,
            chains,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| (e, 2))?;
            apply_overrides(&mut cfg, seed_offset, chains, out);
            cfg.experiment = ExperimentKind::GapOnly;
            cfg.validate().map_err(|e| (e, 2))?;
            let artifacts = run_experiment(&cfg).map_err(|e| {
                let code = exit_code_for(&e);
                (e, code)
            })?;
            println!("results: {}", artifacts.results.display());
            Ok(())
        }
        Command::Plots { results_dir } => {
            let doc = load_results(&results_dir).map_err(|e| {
                let code = exit_code_for(&e);
                (e, code)
            })?;
            let files = emit_plot_data(&doc, &results_dir).map_err(|e| {
                let code = exit_code_for(&e);
                (e, code)
            })?;
            for f in files {
                println!("plot: {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, code)) => {
            eprintln!("{{\"error\": \"{}\", \"exit_code\": {}}}", err, code);
            ExitCode::from(code)
        }
    }
}
