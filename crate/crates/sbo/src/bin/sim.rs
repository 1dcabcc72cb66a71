use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sbo::harness::{median, write_outputs, Experiment};
use sbo_core::engine::BaselineKind;
use sbo_core::sim::{make_task, TaskSpec};

/// Runs seeded simulations and writes per-seed traces plus a summary.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// toy1, random_gmm(n,d,seed) or graph_preset(wishy-washy|altruist)
    #[arg(long, default_value = "toy1")]
    task: TaskSpec,
    #[arg(long, default_value_t = BaselineKind::Sbo)]
    baseline: BaselineKind,
    /// Aggregation exponent; the task's own value when unset.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Summary CSV; per-seed traces go next to it as `<stem>_seed<k>.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let mut task = make_task(&args.task)?;
    if let Some(rho) = args.rho {
        task = task.with_rho(rho)?;
    }
    let exp = Experiment {
        task,
        baseline: args.baseline,
        q: args.q,
        iters: args.iters,
        seeds: args.seeds,
        jobs: args.jobs,
    };
    let runs = exp.run()?;
    let written = write_outputs(&args.out, &runs)?;
    let last = |f: fn(&sbo_core::engine::TraceRow) -> f64| -> f64 {
        median(&runs.iter().filter_map(|r| r.last().map(f)).collect::<Vec<_>>())
    };
    println!(
        "{} {} T={} seeds={}: median simple regret {:.4}, median private queries {}",
        args.task,
        args.baseline,
        args.iters,
        args.seeds,
        last(|r| r.simple_regret.unwrap_or(f64::NAN)),
        last(|r| r.qu_count as f64)
    );
    println!("wrote {} files", written.len());
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
