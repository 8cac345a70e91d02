use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use schedsim::harness::{
    collect_dataset, compare_tuners, run_scenario, write_comparison_csv, DatasetSpec, Scenario,
    TunerKind,
};
use schedsim::metanet::{load_dataset, save_dataset, train_offline_sized};
use schedsim::oracle::{brute_force, engine_steady_time, OracleInstance};
use schedsim::simcore::{SchedulerConfig, SimOptions};
use schedsim::workload::{load_profile, Architecture};

#[derive(Parser)]
#[command(
    name = "sim",
    about = "Discrete-event simulator of communication-scheduled distributed training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario end to end and write its record and summary files.
    Run(RunArgs),
    /// Sweep configs x models x traces and write a JSONL training dataset.
    Collect(CollectArgs),
    /// Train the speed predictor offline on a collected dataset.
    TrainMeta(TrainArgs),
    /// Compare tuner cost and quality on one scenario.
    Compare(CompareArgs),
    /// Brute-force schedule oracle for tiny instances (<=3 layers, <=6 chunks).
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Input embedding width.
    #[arg(long, default_value_t = 16)]
    embed: usize,
    /// LSTM hidden width.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Dense head width.
    #[arg(long, default_value_t = 64)]
    dense: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated subset of grid,bo,meta.
    #[arg(long, value_delimiter = ',')]
    tuners: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    profile: PathBuf,
    /// Scheduler config as "PARTITION_BYTES,CREDIT", e.g. "1048576,2".
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = 10.0)]
    gbps: f64,
    /// Communication architecture: ps | ring.
    #[arg(long, default_value = "ps")]
    arch: String,
}

fn parse_config(s: &str) -> anyhow::Result<SchedulerConfig> {
    let (sp, sc) = s
        .split_once(',')
        .context("config must be \"PARTITION_BYTES,CREDIT\"")?;
    Ok(SchedulerConfig::new(
        sp.trim().parse().context("bad partition bytes")?,
        sc.trim().parse().context("bad credit multiplier")?,
    ))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let loaded = Scenario::load(&args.scenario)?;
            let outcome = run_scenario(&loaded, &args.out)?;
            println!(
                "scenario {}: tuner={} mean_speed={:.3} samples/s reconfigs={} cost={} iters",
                outcome.summary.name,
                outcome.summary.tuner,
                outcome.summary.mean_speed,
                outcome.summary.n_reconfigs,
                outcome.summary.tuner_cost_iterations
            );
        }
        Command::Collect(args) => {
            let (spec, base) = DatasetSpec::load(&args.spec)?;
            let samples = collect_dataset(&spec, &base)?;
            save_dataset(&args.out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), args.out.display());
        }
        Command::TrainMeta(args) => {
            let dataset = load_dataset(&args.data)?;
            let (params, report) = train_offline_sized(
                &dataset,
                args.epochs,
                args.lr,
                args.seed,
                args.embed,
                args.hidden,
                args.dense,
            )?;
            params.save(&args.out)?;
            for (e, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss {:.6}", e, loss);
            }
            println!(
                "trained on {} samples, checkpoint {}",
                dataset.len(),
                args.out.display()
            );
        }
        Command::Compare(args) => {
            let loaded = Scenario::load(&args.scenario)?;
            let tuners: Vec<TunerKind> = args
                .tuners
                .iter()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()?;
            if tuners.is_empty() {
                bail!("--tuners must list at least one of grid,bo,meta");
            }
            let rows = compare_tuners(&loaded, &tuners)?;
            let file = std::fs::File::create(&args.out)
                .with_context(|| format!("creating {}", args.out.display()))?;
            write_comparison_csv(&rows, std::io::BufWriter::new(file))?;
            for r in &rows {
                // Wall clock goes to stderr so the output stays deterministic.
                eprintln!("{}: {:.2}s wall clock", r.tuner, r.wall_clock_s);
            }
            println!("wrote {} rows to {}", rows.len(), args.out.display());
        }
        Command::Oracle(args) => {
            let architecture = match args.arch.as_str() {
                "ps" => Architecture::ParameterServer,
                "ring" => Architecture::RingAllReduce,
                other => bail!("unknown architecture '{other}' (expected ps or ring)"),
            };
            let inst = OracleInstance {
                profile: load_profile(&args.profile)?,
                n_workers: args.workers,
                architecture,
                gbps: args.gbps,
                config: parse_config(&args.config)?,
                opts: SimOptions::default(),
            };
            let outcome = brute_force(&inst)?;
            let engine = engine_steady_time(&inst)?;
            println!(
                "best_admissible_s={:.9} best_any_s={:.9} engine_s={:.9} rankings={}",
                outcome.best_admissible, outcome.best_any, engine, outcome.n_rankings
            );
            println!("best_ranking={:?}", outcome.best_ranking);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
