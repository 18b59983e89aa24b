use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use adroit_core::acquire::Strategy;
use adroit_core::data::encode_records;
use adroit_core::harness::{
    aggregate, emit_plot_data, load_source, parse_rounds, plot_data_csv, prepare_data, run_experiment, DataSource,
    ExperimentSpec, RoundState,
};
use adroit_core::Error;
use clap::{Args, Parser, Subcommand};
use log::{error, info};

#[derive(Parser)]
#[command(name = "adroit", version, about = "Pool-based active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured strategy and seed.
    Run(Common),
    /// Repeat one acquisition step from a saved round.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
    /// Holdout accuracy of a saved round's target model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the final round.
        #[arg(long)]
        round: Option<usize>,
    },
    /// Aggregate `rounds.csv` of a run directory into `plot_data.csv`.
    PlotData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic dataset as a records file.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured run seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, Error> {
        let mut spec = ExperimentSpec::load(&self.config)?;
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        if let Some(s) = self.strategy {
            spec.strategies = vec![s];
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Errors in the inputs rather than in the run itself.
struct Rejected(Error);

enum Failure {
    Config(Error),
    Run(Error),
}

impl From<Rejected> for Failure {
    fn from(r: Rejected) -> Self {
        Failure::Config(r.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            e => Failure::Run(e),
        }
    }
}

fn checked_spec(common: &Common) -> Result<ExperimentSpec, Rejected> {
    let spec = common.spec().map_err(Rejected)?;
    let splits = prepare_data(&spec).map_err(Rejected)?;
    spec.validate_for(splits.train.len()).map_err(Rejected)?;
    Ok(spec)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(common) => {
            let spec = checked_spec(&common)?;
            let summary = run_experiment(&spec, &common.out)?;
            print!("{}", plot_data_csv(&summary.aggregate));
        }
        Command::Select { common, round } => {
            let spec = checked_spec(&common)?;
            let (strategy, seed) = (spec.strategies[0], spec.seeds[0]);
            let state = RoundState::load(&spec, &common.out, strategy, seed, round)?;
            let picks = state.select(strategy, seed, round, spec.al.budget)?;
            let mut text = String::from("index,score,strategy,round\n");
            for s in picks {
                let score = s.score.map(|v| v.to_string()).unwrap_or_default();
                text.push_str(&format!("{},{score},{strategy},{round}\n", s.index));
            }
            print!("{text}");
        }
        Command::Eval { common, round } => {
            let spec = checked_spec(&common)?;
            let (strategy, seed) = (spec.strategies[0], spec.seeds[0]);
            let round = round.unwrap_or(spec.al.rounds);
            let acc = RoundState::load(&spec, &common.out, strategy, seed, round)?.accuracy()?;
            println!("{acc}");
        }
        Command::PlotData { out } => {
            let text = fs::read_to_string(out.join("rounds.csv")).map_err(Error::from)?;
            let rows = aggregate(&parse_rounds(&text)?)?;
            emit_plot_data(&rows, &out.join("plot_data.csv"))?;
            print!("{}", plot_data_csv(&rows));
        }
        Command::GenData(common) => {
            let spec = common.spec().map_err(Rejected)?;
            if spec.data.source != DataSource::Synthetic {
                return Err(Failure::Config(Error::Config("gen-data needs source = \"synthetic\"".into())));
            }
            let data = load_source(&spec)?;
            if let Some(parent) = common.out.parent() {
                fs::create_dir_all(parent).map_err(Error::from)?;
            }
            fs::write(&common.out, encode_records(&data)?).map_err(Error::from)?;
            info!("wrote {} examples to {}", data.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            error!("{e}");
            ExitCode::from(if matches!(e, Error::Divergence(_)) { 3 } else { 1 })
        }
    }
}
