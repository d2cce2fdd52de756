use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use crowd_al::harness::{
    emit_records, fit_full_pool, format_float, load_csv, run_on, ExperimentConfig, RecordFormat, Strategy,
};

#[derive(Parser)]
#[command(name = "crowd-al", version, about = "Active learning from a noisy crowd")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum StrategyArg {
    RobustUcb,
    Random,
    InstanceOnly,
    SingleSource,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::RobustUcb => Strategy::RobustUcb,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::InstanceOnly => Strategy::InstanceOnly,
            StrategyArg::SingleSource => Strategy::SingleSource,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run labeling experiments and write per-round records.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Fit on the full training pool labeled by every annotator and report test RMSE.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of random splits.
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            data,
            strategy,
            budget,
            seed,
            reps,
            out,
            format,
        } => {
            let mut cfg = load_config(Some(&config))?;
            if data.is_some() {
                cfg.dataset = data;
            }
            if let Some(s) = strategy {
                cfg.strategy = s.into();
            }
            if let Some(b) = budget {
                cfg.budget = b;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = reps {
                cfg.repetitions = r;
            }
            if out.is_some() {
                cfg.output = out;
            }
            if let Some(f) = format {
                cfg.format = match f {
                    FormatArg::Csv => RecordFormat::Csv,
                    FormatArg::Jsonl => RecordFormat::Jsonl,
                };
            }
            cfg.validate()?;
            let raw = crowd_al::harness::load_data(&cfg)?;
            let output = run_on(&cfg, &raw)?;
            if let Some(path) = &cfg.output {
                emit_records(&output.records, path, cfg.format)?;
            }
            for s in &output.summaries {
                println!(
                    "rep={} strategy={} rounds={} rmse={} regret={} discarded={} paid={}{}",
                    s.rep,
                    cfg.strategy,
                    s.rounds,
                    format_float(s.rmse),
                    format_float(s.regret),
                    s.discarded,
                    format_float(s.payment),
                    if s.truncated { " truncated" } else { "" },
                );
            }
        }
        Command::Fit {
            data,
            config,
            seed,
            reps,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.repetitions = reps;
            let raw = load_csv(&data)?;
            cfg.dataset = Some(data);
            let fits = fit_full_pool(&cfg, &raw)?;
            for f in &fits {
                let scale = f.scale.map(|s| format!(" s={}", format_float(s))).unwrap_or_default();
                println!(
                    "split={} rmse={} sweeps={}{}{}",
                    f.rep,
                    format_float(f.rmse),
                    f.sweeps,
                    if f.converged { "" } else { " unconverged" },
                    scale,
                );
            }
            let mean = fits.iter().map(|f| f.rmse).sum::<f64>() / fits.len() as f64;
            println!("mean rmse={} splits={}", format_float(mean), fits.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
