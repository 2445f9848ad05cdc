use std::path::PathBuf;
use std::process::ExitCode;

use asced_cli::commands::{self, IngestOptions};
use asced_cli::{Overrides, RunConfig};
use asced_core::{ChannelReduce, CorrectionMethod, MeanBankMode, PerturbationMode, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asced", version, about = "Score-trap detection and correction on a toy diffusion sampler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// INI configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed. Falls back to ASCED_SEED, then the config file, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// none | ttc | state-replace | score-clip
    #[arg(long)]
    method: Option<CorrectionMethod>,
    #[arg(long)]
    tc_frac: Option<f64>,
    #[arg(long)]
    td_frac: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// literal | one-plus | additive
    #[arg(long)]
    perturbation: Option<PerturbationMode>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let env = std::env::var("ASCED_SEED").ok();
        cfg.resolve_seed(self.seed, env.as_deref())?;
        cfg.apply(&Overrides {
            seed: None,
            out: self.out.clone(),
            workers: self.workers,
            method: self.method,
            tc_frac: self.tc_frac,
            td_frac: self.td_frac,
            gamma: self.gamma,
            perturbation: self.perturbation,
        });
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample, detect, correct, and write traces, images, masks and a report.
    Generate(RunArgs),
    /// Sweep the correction step and report escape rate and fidelity per fraction.
    SweepTc {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated T_c/T fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        fractions: Vec<f64>,
    },
    /// Run the detector offline on a recorded trace.
    Ingest {
        trace: PathBuf,
        #[arg(long)]
        t_total: Option<u32>,
        #[arg(long, default_value_t = asced_core::detector::DEFAULT_TD_FRAC)]
        td_frac: f64,
        #[arg(long, default_value_t = asced_core::detector::DEFAULT_TC_FRAC)]
        tc_frac: f64,
        #[arg(long, default_value_t = 1.0)]
        mad_multiplier: f64,
        #[arg(long, default_value_t = 1)]
        dilation: usize,
        #[arg(long, default_value = "mean_abs_weighted")]
        mean_bank_mode: MeanBankMode,
        #[arg(long, default_value = "l2_over_channels")]
        channel_reduce: ChannelReduce,
        #[arg(long, default_value = "asced-ingest")]
        out: PathBuf,
    },
    /// Print a side-by-side summary of a generate run directory.
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let s = commands::generate(&args.load()?)?;
            println!("wrote {}", s.out.display());
        }
        Command::SweepTc { run, fractions } => {
            let cfg = run.load()?;
            let rows = commands::sweep_tc(&cfg, &fractions)?;
            let path = commands::write_sweep(&cfg, &rows)?;
            print!("{}", commands::sweep_csv(&rows));
            println!("wrote {}", path.display());
        }
        Command::Ingest {
            trace,
            t_total,
            td_frac,
            tc_frac,
            mad_multiplier,
            dilation,
            mean_bank_mode,
            channel_reduce,
            out,
        } => {
            let opts = IngestOptions {
                trace,
                t_total,
                td_frac,
                tc_frac,
                mad_multiplier,
                dilation,
                mean_bank_mode,
                channel_reduce,
                out,
            };
            let m = commands::ingest(&opts)?;
            println!("{} pixels flagged; wrote {}", m.mask.count(), opts.out.display());
        }
        Command::Report { dir } => print!("{}", commands::report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
