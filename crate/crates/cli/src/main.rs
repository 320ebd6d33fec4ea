use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use alkit_core::detector::TrainHyper;
use alkit_core::gp::{run_discovery_sweep, write_discovery_csv, DiscoveryConfig, DiscoveryMethod};
use alkit_core::metrics::MetricKind;
use alkit_core::protocol::{
    read_curves_csv, run_sweep, summarize, write_curves_csv, write_summary_csv, ExperimentConfig, ExplorationTask,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alkit", version, about = "Active learning for grid detectors and GP-based EMOC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Batch-wise exploration on the synthetic 5-known/2-new task.
    Explore(ExploreArgs),
    /// mAP and AUC at fixed checkpoints from an exploration CSV.
    Report(ReportArgs),
    /// Class discovery with GP-based selection on clustered features.
    Discover(DiscoverArgs),
    /// Annotation service over HTTP.
    Serve(ServeArgs),
}

#[derive(clap::Args)]
struct ExploreArgs {
    /// Metric names, comma separated, or `all`.
    #[arg(long, default_value = "sum,random")]
    metric: String,
    /// Runs seeds 0..N.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    update_iters: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Scenes generated before the known/new split.
    #[arg(long, default_value_t = 500)]
    pool_scenes: usize,
    #[arg(long, default_value_t = 200)]
    max_unlabeled: usize,
    #[arg(long, default_value_t = 300)]
    test_scenes: usize,
    /// SGD iterations for the initial model.
    #[arg(long, default_value_t = 5000)]
    initial_iters: usize,
    #[arg(long, default_value = "curves.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Labeled-sample checkpoints, comma separated.
    #[arg(long, default_value = "50,100,150")]
    checkpoints: String,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DiscoverArgs {
    /// Method names, comma separated, or `all`.
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    #[arg(long, default_value_t = 10)]
    inits: usize,
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "discovery.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ServeArgs {
    /// Directory holding one subdirectory per project.
    #[arg(long)]
    project: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

fn split_list<T>(raw: &str, all: &[T], parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>>
where
    T: Copy,
{
    if raw.trim() == "all" {
        return Ok(all.to_vec());
    }
    let items = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        bail!("empty list `{raw}`");
    }
    Ok(items)
}

fn explore(a: ExploreArgs) -> Result<()> {
    let metrics = split_list(&a.metric, &MetricKind::ALL, |s| Ok(s.parse::<MetricKind>()?))?;
    let task = ExplorationTask {
        pool_scenes: a.pool_scenes,
        max_unlabeled: a.max_unlabeled,
        test_scenes: a.test_scenes,
        initial: TrainHyper { iterations: a.initial_iters, ..TrainHyper::default() },
        ..ExplorationTask::default()
    };
    let config = ExperimentConfig {
        batch_size: a.batch_size,
        lambda: a.lambda,
        update_iterations: a.update_iters,
        eval_every: a.eval_every,
        ..ExperimentConfig::default()
    };
    config.validate()?;
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let runs = run_sweep(&task, &config, &metrics, &seeds)?;
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_curves_csv(BufWriter::new(out), &task.scenes.class_names(), &runs)?;
    log::info!("wrote {} runs to {}", runs.len(), a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let (_, runs) = read_curves_csv(BufReader::new(file))?;
    let checkpoints = a
        .checkpoints
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad checkpoint `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&runs, &checkpoints, a.eval_every)?;
    match a.out {
        Some(path) => write_summary_csv(BufWriter::new(File::create(&path)?), &rows)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_summary_csv(&mut lock, &rows)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn discover(a: DiscoverArgs) -> Result<()> {
    let methods = split_list(&a.method, &DiscoveryMethod::ALL, |s| Ok(s.parse::<DiscoveryMethod>()?))?;
    let config = DiscoveryConfig { budget: a.budget, ..DiscoveryConfig::default() };
    let rows = run_discovery_sweep(&config, &methods, a.tasks, a.inits, a.seed)?;
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_discovery_csv(BufWriter::new(out), &rows)?;
    log::info!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    let addr = SocketAddr::new(a.host, a.port);
    runtime.block_on(alkit_service::serve(&a.project, addr))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Explore(a) => explore(a),
        Command::Report(a) => report(a),
        Command::Discover(a) => discover(a),
        Command::Serve(a) => serve(a),
    }
}
