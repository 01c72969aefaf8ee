//! `dendrite` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use dendrite::config::{load_configs, Overrides};
use dendrite::data::{default_data_dir, fetch_mnist, load_mnist};
use dendrite::models::stream_rng;
use dendrite::results::{audit, audit_reference_rows, render_audit, render_table, run_experiment, write_outputs};
use dendrite::sparse::{benchmark, BenchRow};
use dendrite::{Backend, Error, Family, Result, Task, TreePlan};

#[derive(Parser)]
#[command(name = "dendrite", version, about = "Dendritic tree neuron experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model of a config file and write the result files.
    Run(RunArgs),
    /// Print the parameter audit for one model or for every reference row.
    Params(ParamsArgs),
    /// Time both backends on dendritic layers and write bench.csv.
    Bench(BenchArgs),
    /// Download the four MNIST files.
    FetchData {
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Model family, e.g. mln_binary or conv_mlp.
    #[arg(long, required_unless_present = "all")]
    family: Option<Family>,
    /// Branching factor b or hidden width h.
    #[arg(long, required_unless_present = "all")]
    width: Option<usize>,
    /// Checked against the family when given.
    #[arg(long)]
    task: Option<String>,
    /// Audit every row of the reference tables.
    #[arg(long, conflicts_with_all = ["family", "width"])]
    all: bool,
    #[arg(long, default_value = "sparse")]
    backend: Backend,
}

#[derive(Args)]
struct BenchArgs {
    /// Branching factors, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,4,32")]
    b: Vec<usize>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Leaf inputs per neuron.
    #[arg(long, default_value_t = 1024)]
    inputs: usize,
    /// Number of neurons.
    #[arg(long, default_value_t = 1)]
    outputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results")]
    output_dir: PathBuf,
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let overrides = Overrides {
        epochs: args.epochs,
        trials: args.trials,
        seed: args.seed,
        backend: args.backend,
        data_dir: args.data_dir.clone(),
        output_dir: args.output_dir.clone(),
    };
    let mut configs = load_configs(&args.config)?;
    for c in &mut configs {
        c.apply(&overrides);
        c.validate()?;
    }
    let mut loaded: Option<(PathBuf, dendrite::data::TaskData)> = None;
    for c in &configs {
        if loaded.as_ref().is_none_or(|(dir, _)| dir != &c.data_dir) {
            loaded = Some((c.data_dir.clone(), load_mnist(&c.data_dir, c.download)?));
        }
        let mnist = &loaded.as_ref().expect("loaded above").1;
        let outcome = run_experiment(c, mnist)?;
        let dir = c.output_dir.join(&c.name);
        write_outputs(&outcome, &dir)?;
        print!("{}", render_table(&outcome));
        info!("wrote results to {}", dir.display());
    }
    Ok(())
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "binary49" => Ok(Task::Binary49),
        "mnist10" => Ok(Task::Mnist10),
        "conv_mnist10" => Ok(Task::ConvMnist10),
        other => Err(Error::config("task", format!("unknown task {other:?}"))),
    }
}

fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let rows = if args.all {
        audit_reference_rows(args.backend)?
    } else {
        let family = args.family.expect("required by clap");
        if let Some(task) = &args.task {
            let task = parse_task(task)?;
            if task != family.task() {
                return Err(Error::config("family", format!("{family} does not run on task {task}")));
            }
        }
        vec![audit(family, args.width.expect("required by clap"), args.backend)?]
    };
    print!("{}", render_audit(&rows));
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut csv = format!("{}\n", BenchRow::CSV_HEADER);
    let mut rng = stream_rng(args.seed, 0);
    for &b in &args.b {
        let plan = TreePlan::new(args.inputs * args.outputs, args.outputs, b)?;
        let mut last: Option<(u128, u128)> = None;
        for &batch in &args.batch {
            let report = benchmark(&plan, batch, args.reps, &mut rng)?;
            for row in report.rows() {
                csv.push_str(&row.csv());
                csv.push('\n');
            }
            println!(
                "b={b} batch={batch}: reference {} ns, sparse {} ns, speedup {:.1}x",
                report.reference.median_ns, report.sparse.median_ns, report.speedup
            );
            let now = (report.reference.median_ns, report.sparse.median_ns);
            if let Some(prev) = last {
                if now.0 < prev.0 || now.1 < prev.1 {
                    warn!("b={b}: median_ns decreased when batch grew to {batch}");
                }
            }
            last = Some(now);
        }
    }
    std::fs::create_dir_all(&args.output_dir).map_err(|e| Error::io(&args.output_dir, e))?;
    let path = args.output_dir.join("bench.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_fetch(dir: &Path) -> Result<()> {
    fetch_mnist(dir)?;
    println!("MNIST files present in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Params(a) => cmd_params(a),
        Command::Bench(a) => cmd_bench(a),
        Command::FetchData { data_dir } => cmd_fetch(&data_dir.clone().unwrap_or_else(default_data_dir)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
