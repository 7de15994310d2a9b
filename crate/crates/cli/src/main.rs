use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use fedmpq::checkpoint::{inspect, read_checkpoint};
use fedmpq::config::{Algorithm, ExperimentConfig};
use fedmpq::data::read_idx_labels;
use fedmpq::metrics::read_metrics_summary;
use fedmpq::partition::{dirichlet_partition, label_skew, write_shards};
use fedmpq::sim::{load_data, write_outputs, Experiment, RunManifest, MANIFEST_FILE, METRICS_FILE};
use fedmpq::Execution;

/// Output root used when `run` is not given `--out`.
const OUTPUT_ROOT_ENV: &str = "FEDMPQ_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "fedmpq", version, about = "Federated mixed-precision quantization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment from a TOML config.
    Run(RunArgs),
    /// Write Dirichlet shard index files for reuse across runs.
    Partition(PartitionArgs),
    /// Print the layers of a checkpoint.
    Inspect {
        path: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Tabulate final results of several run directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated per-client budgets, e.g. 2,2,4,4.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<u8>>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    /// Participation fraction.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_parser = parse_execution)]
    execution: Option<Execution>,
    /// Output directory; defaults to `$FEDMPQ_OUTPUT_ROOT/<name>-<algorithm>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    /// Take the dataset, client count, alpha and seed from a run config.
    #[arg(long, conflicts_with = "labels")]
    config: Option<PathBuf>,
    /// IDX label file to partition instead of a config's dataset.
    #[arg(long, required_unless_present = "config")]
    labels: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_execution(s: &str) -> Result<Execution, String> {
    match s {
        "parallel" => Ok(Execution::Parallel),
        "sequential" => Ok(Execution::Sequential),
        _ => Err(format!("expected `parallel` or `sequential`, got `{s}`")),
    }
}

/// Failure kinds that map to distinct exit codes.
enum Failure {
    Config(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<fedmpq::Error>() {
            Some(fedmpq::Error::Config(msg)) => Failure::Config(msg.clone()),
            _ => Failure::Other(e),
        }
    }
}

impl From<fedmpq::Error> for Failure {
    fn from(e: fedmpq::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Inspect { path, json } => cmd_inspect(&path, json).map_err(Failure::from),
        Command::Compare { dirs } => cmd_compare(&dirs).map_err(Failure::from),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(budgets) = &args.budgets {
        cfg.budgets = budgets.clone();
        if args.clients.is_none() {
            cfg.clients = budgets.len();
        }
    }
    if let Some(algorithm) = args.algorithm {
        cfg.algorithm = algorithm;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    if let Some(clients) = args.clients {
        cfg.clients = clients;
    }
    if let Some(fraction) = args.fraction {
        cfg.participation = fraction;
    }
    if let Some(lambda) = args.lambda {
        cfg.train.lambda = lambda;
    }
    if let Some(epsilon) = args.epsilon {
        cfg.train.epsilon = epsilon;
    }
    if let Some(execution) = args.execution {
        cfg.execution = execution;
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    if let Some(out) = out {
        return out.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{}-{}-s{}", cfg.name, cfg.algorithm, cfg.seed))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    apply_overrides(&mut cfg, &args);
    cfg.validate()?;
    let dir = output_dir(&cfg, args.out.as_deref());
    info!("running {} ({}) into {}", cfg.name, cfg.algorithm, dir.display());
    let experiment = Experiment::new(cfg)?;
    let result = experiment.run()?;
    let manifest = write_outputs(&dir, &experiment, &result)
        .with_context(|| format!("writing outputs to {}", dir.display()))?;
    println!(
        "{}: final accuracy {:.4}, loss {:.4} after {} rounds -> {}",
        manifest.config.algorithm,
        manifest.final_accuracy,
        manifest.final_loss,
        result.records.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<(), Failure> {
    let (labels, mut clients, mut alpha, mut seed) = match (&args.config, &args.labels) {
        (Some(path), _) => {
            let cfg = ExperimentConfig::load(path)?;
            let (train, _) = load_data(&cfg.data, args.seed.unwrap_or(cfg.seed))?;
            (train.labels, Some(cfg.clients), Some(cfg.alpha), Some(cfg.seed))
        }
        (None, Some(path)) => (read_idx_labels(path)?, None, None, None),
        (None, None) => unreachable!("clap requires --config or --labels"),
    };
    clients = args.clients.or(clients);
    alpha = args.alpha.or(alpha);
    seed = args.seed.or(seed);
    let (Some(clients), Some(alpha)) = (clients, alpha) else {
        return Err(Failure::Config("--clients and --alpha are required with --labels".into()));
    };
    let seed = seed.unwrap_or(0);
    let shards = dirichlet_partition(&labels, clients, alpha, seed)?;
    write_shards(&args.out, &shards).with_context(|| format!("writing shards to {}", args.out.display()))?;
    println!(
        "{} samples over {clients} clients (alpha {alpha}, seed {seed}); label skew {:.4} -> {}",
        labels.len(),
        label_skew(&labels, &shards),
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path, json: bool) -> anyhow::Result<()> {
    let layers = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let report = inspect(&layers);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

fn cmd_compare(dirs: &[PathBuf]) -> anyhow::Result<()> {
    println!(
        "{:<28} {:<8} {:>6} {:>10} {:>10} {:>10}",
        "run", "algo", "rounds", "accuracy", "loss", "mean bits"
    );
    for dir in dirs {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .with_context(|| format!("{} is not a run directory", dir.display()))?;
        let manifest = RunManifest::from_toml_str(&text)?;
        let summary = read_metrics_summary(&dir.join(METRICS_FILE))?;
        let bits = summary.last().map_or(f64::NAN, |s| s.3);
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        println!(
            "{:<28} {:<8} {:>6} {:>10.4} {:>10.4} {:>10.3}",
            name,
            manifest.config.algorithm.to_string(),
            summary.len(),
            manifest.final_accuracy,
            manifest.final_loss,
            bits
        );
    }
    Ok(())
}
