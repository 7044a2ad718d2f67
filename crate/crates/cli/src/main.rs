use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use healthshock::config::KeyValues;
use healthshock::estimator::EstimatorSpec;
use healthshock::heterogeneity::MobOptions;
use healthshock::innovation::Measure;
use healthshock::matching::DEFAULT_CALIPER;
use healthshock::pipeline::{self, RunOptions};
use healthshock::registry::Outcome;
use healthshock::robustness::Variant;
use healthshock::Error;

/// Matched stacked difference-in-differences for health shocks.
#[derive(Debug, Parser)]
#[command(name = "healthshock", version)]
struct Cli {
    /// Master seed, echoed into every output header.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Input directory (default: the output directory).
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic register with planted effects.
    Simulate,
    /// Validate the register and write the innovation series.
    Ingest(SeriesArgs),
    /// Propensity caliper matching; writes pairs.csv and balance.csv.
    Match(MatchArgs),
    /// Expand pairs into the stacked panel; writes panel.csv.
    Stack(SeriesArgs),
    /// DD/DDD estimation; writes results.csv and results.json.
    Estimate(EstimateArgs),
    /// Pre-trend tests per disease group; writes pretrend.csv and eventstudy.csv.
    Diagnose(DiagnoseArgs),
    /// Year partitions and subsamples; writes partition.csv, trees.txt, subsamples.csv.
    Partition(PartitionArgs),
    /// Robustness battery; writes robust.csv.
    Robust(RobustArgs),
    /// simulate, match, stack, estimate, diagnose, partition and robust in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Clone, Default)]
struct SeriesArgs {
    /// Lag of the innovation series in years.
    #[arg(long)]
    lag: Option<u32>,
    /// Remove a linear trend per group before lagging.
    #[arg(long)]
    detrend: bool,
    /// Count only internationally originated innovations.
    #[arg(long)]
    international: bool,
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Caliper in SDs of the logit propensity score.
    #[arg(long, default_value_t = DEFAULT_CALIPER)]
    caliper: f64,
    /// Admit emergency-unit admissions as shocks.
    #[arg(long)]
    include_emergency: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpecArg {
    Dd,
    Ddd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MeasureArg {
    Nme,
    Patent,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Nme => Measure::Nme,
            MeasureArg::Patent => Measure::Patent,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClusterArg {
    Experimental,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    series: SeriesArgs,
    /// Single specification (default: the standard set).
    #[arg(long, value_enum)]
    spec: Option<SpecArg>,
    /// Outcome column (default: all).
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long, value_enum, default_value = "nme")]
    measure: MeasureArg,
    /// Separate treatment terms for event years 0 and 1.
    #[arg(long)]
    by_event_year: bool,
    #[arg(long, value_enum, default_value = "experimental")]
    cluster: ClusterArg,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    series: SeriesArgs,
    #[arg(long, default_value = "family_income")]
    outcome: String,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[command(flatten)]
    series: SeriesArgs,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    /// Minimum pairs per child node.
    #[arg(long, default_value_t = 30)]
    min_node: usize,
    #[arg(long, default_value_t = 6)]
    max_depth: usize,
    #[arg(long, value_enum, default_value = "nme")]
    measure: MeasureArg,
    #[arg(long, default_value = "family_income")]
    outcome: String,
}

#[derive(Debug, Args)]
struct RobustArgs {
    /// `all` or a comma-separated list of variants.
    #[arg(long, default_value = "all")]
    variants: String,
    #[arg(long)]
    lag: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_CALIPER)]
    caliper: f64,
    #[arg(long, value_enum, default_value = "nme")]
    measure: MeasureArg,
    #[arg(long, default_value = "family_income")]
    outcome: String,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = DEFAULT_CALIPER)]
    caliper: f64,
    #[arg(long, default_value = "all")]
    variants: String,
}

fn apply_series(o: &mut RunOptions, a: &SeriesArgs) {
    o.lag = a.lag.or(o.lag);
    o.detrend = a.detrend;
    o.international = a.international;
}

fn options(cli: &Cli) -> Result<RunOptions, Error> {
    let input = cli.input.clone().unwrap_or_else(|| cli.out.clone());
    let mut o = RunOptions::new(cli.seed, input, cli.out.clone());
    if let Some(path) = &cli.config {
        o.config = KeyValues::load(path)?;
    }
    match &cli.command {
        Command::Simulate => {}
        Command::Pipeline(a) => {
            o.caliper = a.caliper;
            o.variants = Variant::parse_list(&a.variants)?;
        }
        Command::Ingest(a) | Command::Stack(a) => apply_series(&mut o, a),
        Command::Match(a) => {
            o.caliper = a.caliper;
            o.include_emergency = a.include_emergency;
        }
        Command::Estimate(a) => {
            apply_series(&mut o, &a.series);
            let ClusterArg::Experimental = a.cluster;
            if let Some(s) = a.spec {
                let spec = match s {
                    SpecArg::Dd => EstimatorSpec::dd(),
                    SpecArg::Ddd => EstimatorSpec::ddd(a.measure.into()),
                };
                o.specs = vec![if a.by_event_year { spec.by_event_year() } else { spec }];
            }
            if let Some(name) = &a.outcome {
                o.outcomes = Some(vec![Outcome::parse(name)?]);
            }
            o.measure = a.measure.into();
        }
        Command::Diagnose(a) => {
            apply_series(&mut o, &a.series);
            o.outcomes = Some(vec![Outcome::parse(&a.outcome)?]);
        }
        Command::Partition(a) => {
            apply_series(&mut o, &a.series);
            o.mob = MobOptions {
                alpha: a.alpha,
                min_node: a.min_node,
                max_depth: a.max_depth,
            };
            o.measure = a.measure.into();
            o.outcomes = Some(vec![Outcome::parse(&a.outcome)?]);
        }
        Command::Robust(a) => {
            o.variants = Variant::parse_list(&a.variants)?;
            o.lag = a.lag;
            o.caliper = a.caliper;
            o.measure = a.measure.into();
            o.outcomes = Some(vec![Outcome::parse(&a.outcome)?]);
        }
    }
    Ok(o)
}

fn run(cli: &Cli) -> Result<Vec<String>, Error> {
    let o = options(cli)?;
    let one = |r: Result<String, Error>| r.map(|s| vec![s]);
    match &cli.command {
        Command::Simulate => one(pipeline::simulate(&o)),
        Command::Ingest(_) => one(pipeline::ingest(&o)),
        Command::Match(_) => one(pipeline::match_stage(&o)),
        Command::Stack(_) => one(pipeline::stack(&o)),
        Command::Estimate(_) => one(pipeline::estimate_stage(&o)),
        Command::Diagnose(_) => one(pipeline::diagnose(&o)),
        Command::Partition(_) => one(pipeline::partition(&o)),
        Command::Robust(_) => one(pipeline::robust(&o)),
        Command::Pipeline(_) => pipeline::pipeline(&o),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error[usage]: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon_pool(n) {
            eprintln!("error[usage]: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.is_numerical() => {
            eprintln!("error[numerical]: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error[data]: {e}");
            ExitCode::from(2)
        }
    }
}

fn rayon_pool(n: usize) -> Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
