use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsm_core::abundance::VarianceMethod;
use dsm_core::commands::{
    cmd_coverage, cmd_diagnose, cmd_fit_detection, cmd_fit_dsm, cmd_predict, cmd_simulate, CommandOptions,
};

#[derive(Parser)]
#[command(name = "dsm", version, about = "Density surface models with detection-uncertainty propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config (scenario file for simulate/coverage)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the detection function
    FitDetection(Common),
    /// Fit the naive and variance-propagation density models and write a fit bundle
    FitDsm(Common),
    /// Predict abundance over the grid from a fit bundle
    Predict {
        #[command(flatten)]
        common: Common,
        /// Fit bundle directory; overrides predict.bundle
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Variance method (repeatable): delta, posterior-sim, independence, ht-averaged
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<VarianceMethod>,
        /// Posterior draws for posterior-sim
        #[arg(short = 'B')]
        draws: Option<usize>,
    },
    /// Residual and observed-vs-expected checks for a fit bundle
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Simulate a survey and write observations, segments and grid CSVs
    Simulate(Common),
    /// Run a coverage study
    Coverage {
        #[command(flatten)]
        common: Common,
        /// Number of replicates; overrides `replicates` in the scenario
        #[arg(short = 'n', long)]
        replicates: Option<usize>,
    },
}

fn parse_method(s: &str) -> Result<VarianceMethod, String> {
    VarianceMethod::parse(s).map_err(|e| e.to_string())
}

fn options(c: &Common) -> CommandOptions {
    CommandOptions {
        config: c.config.clone(),
        out: c.out.clone(),
        seed: c.seed,
        ..CommandOptions::default()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // per-replicate warnings would swamp a coverage run
    let level = if matches!(cli.command, Command::Coverage { .. }) { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (common, run): (&Common, fn(&CommandOptions) -> dsm_core::Result<Vec<PathBuf>>) = match &cli.command {
        Command::FitDetection(c) => (c, cmd_fit_detection),
        Command::FitDsm(c) => (c, cmd_fit_dsm),
        Command::Predict { common, .. } => (common, cmd_predict),
        Command::Diagnose { common, .. } => (common, cmd_diagnose),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Coverage { common, .. } => (common, cmd_coverage),
    };
    let mut opts = options(common);
    match &cli.command {
        Command::Predict {
            bundle, methods, draws, ..
        } => {
            opts.bundle = bundle.clone();
            opts.methods = methods.clone();
            opts.draws = *draws;
        }
        Command::Diagnose { bundle, .. } => opts.bundle = bundle.clone(),
        Command::Coverage { replicates, .. } => opts.replicates = *replicates,
        _ => {}
    }
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&opts) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            for line in e.trace_lines() {
                eprintln!("  {line}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
