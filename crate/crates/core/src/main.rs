use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use urcl::data::{load_dataset, write_dataset};
use urcl::harness::{aggregate, run_stream_experiment, synthetic_stream, ExperimentConfig, StreamData, Strategy, SynthSpec};
use urcl::Result;

#[derive(Parser)]
#[command(name = "urcl", version, about = "Continual spatio-temporal forecasting on streaming sensor data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one strategy over the base and incremental segments.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint record (`checkpoints/segment_<i>.json`) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a synthetic ring-graph concept-drift dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nodes: usize,
        /// Number of incremental segments after the base segment.
        #[arg(long)]
        segments: usize,
        #[arg(long)]
        slots: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Aggregate every summary.csv under a directory into one comparison table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: urcl::UrclError| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            data,
            config,
            strategy,
            out,
            seed,
            resume,
        } => {
            let mut cfg = ExperimentConfig::parse(&fs::read_to_string(&config)?)?;
            cfg.strategy = strategy;
            cfg.data = Some(data.clone());
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let (network, series) = load_dataset(&data)?;
            let stream = StreamData::prepare(network, &series, &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_config_string())?;
            let outcome = run_stream_experiment(&stream, &cfg, Some(&out), resume.as_deref())?;
            for r in &outcome.reports {
                println!("{} {}: MAE {:.4} RMSE {:.4}", r.strategy, r.role, r.test_mae, r.test_rmse);
            }
        }
        Command::Synth {
            out,
            nodes,
            segments,
            slots,
            seed,
        } => {
            let (network, series) = synthetic_stream(&SynthSpec::new(nodes, segments, slots, seed))?;
            write_dataset(&out, &network, &series)?;
            println!("wrote {slots} slots x {nodes} nodes to {}", out.display());
        }
        Command::Report { out } => {
            let table = aggregate(&out)?;
            fs::write(out.join("report.csv"), table.to_csv())?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
