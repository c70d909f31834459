use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hybrid_synapse::device::{ParamMode, WeightBits};
use hybrid_synapse::io_cli::{self, Overrides, RunConfig};
use hybrid_synapse::synapse::TransferMode;
use hybrid_synapse::trainer::MappingKind;
use hybrid_synapse::Error;

#[derive(Parser)]
#[command(
    name = "hybrid-synapse",
    version,
    about = "Multi-bit ferroelectric synapse simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pulse staircase up to the top state and back (ramp.csv).
    Ramp(Common),
    /// Batch time, decay quantum and the longest safe transfer interval.
    Timing(Common),
    /// Train one network (run_log.csv, endurance.csv, checkpoints).
    Train(Common),
    /// Train once per transfer interval (sweep.csv).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated intervals; defaults to trainer.sweep_intervals.
        #[arg(long, value_delimiter = ',')]
        intervals: Option<Vec<u32>>,
    },
    /// Apply an idle period to a checkpoint (snapshot.csv).
    Snapshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        idle_ns: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ideal,
    Calibrated,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Midrange,
    Ideal,
}

#[derive(Clone, Copy, ValueEnum)]
enum MappingArg {
    ZeroCentered,
    DifferentialPair,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(6..=8))]
    bits: Option<u8>,
    #[arg(long)]
    interval: Option<u32>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    mapping: Option<MappingArg>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Use float weights instead of synapses.
    #[arg(long)]
    baseline: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let bits = self
            .bits
            .map(WeightBits::try_from)
            .transpose()
            .map_err(Error::Config)?;
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode.map(|m| match m {
                ModeArg::Ideal => ParamMode::Ideal,
                ModeArg::Calibrated => ParamMode::Calibrated,
            }),
            bits,
            interval: self.interval,
            policy: self.policy.map(|p| match p {
                PolicyArg::Midrange => TransferMode::MidRangeReset,
                PolicyArg::Ideal => TransferMode::IdealResidual,
            }),
            threads: self.threads,
            mapping: self.mapping.map(|m| match m {
                MappingArg::ZeroCentered => MappingKind::ZeroCentered,
                MappingArg::DifferentialPair => MappingKind::DifferentialPair,
            }),
            baseline: self.baseline,
        }
        .apply(&mut config);
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Ramp(common) => {
            let path = io_cli::cmd_ramp(&common.resolve()?)?;
            println!("wrote {}", path.display());
        }
        Command::Timing(common) => print!("{}", io_cli::cmd_timing(&common.resolve()?)?),
        Command::Train(common) => {
            let out = io_cli::cmd_train(&common.resolve()?)?;
            for w in &out.metrics.warnings {
                eprintln!("warning: {w}");
            }
            let m = &out.metrics;
            println!(
                "final test accuracy {:.4}, msb writes {} (max per synapse {}), cumulative lsb loss {}",
                m.final_accuracy(),
                m.stats.msb_writes,
                m.msb_write_max,
                m.stats.abs_lsb_loss
            );
            println!("wrote {}", out.run_log.display());
        }
        Command::Sweep { common, intervals } => {
            let (rows, path) = io_cli::cmd_sweep(&common.resolve()?, intervals.as_deref())?;
            for r in &rows {
                println!(
                    "interval {:>5}: accuracy {:.4}",
                    r.interval, r.test_accuracy
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Snapshot {
            common,
            input,
            idle_ns,
        } => {
            print!(
                "{}",
                io_cli::cmd_snapshot(&common.resolve()?, &input, idle_ns)?
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } => 3,
        Error::Io { .. } => 4,
        Error::Domain(_) => 5,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
