//! `lsgd` command line: `train`, `verify`, `simulate` and `calibrate`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on invalid input. Every
//! failure prints exactly one line to stderr, starting with `error:`.

pub mod config;
pub mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::executors::{self, run_label, Algorithm, TrainResult};
use crate::simulator::{self, CalibrationTarget, CollectiveAlgo, CostModel, LocalFanin};
use crate::transport::TcpEndpoint;
use crate::{Error, Result};

pub use config::RunConfigFile;
pub use metrics::{write_metrics, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(
    name = "lsgd",
    version,
    about = "Sequential, CSGD and LSGD training with a scaling cost model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train with the configured algorithm and write per-iteration metrics.
    Train(TrainArgs),
    /// Check that several algorithms produce the same iterates.
    Verify { config: PathBuf },
    /// Sweep the cost model over worker counts.
    Simulate(SimulateArgs),
    /// Fit a cost model to measured timings.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// With the tcp backend, run only this rank and join the rendezvous.
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Cost model JSON.
    pub model: PathBuf,
    /// Comma-separated counts; `a,b,...,c` continues the ratio `b/a` up to `c`.
    #[arg(long, default_value = "4,8,...,256")]
    pub workers: String,
    /// Workers per LSGD group.
    #[arg(long, default_value_t = 4)]
    pub group_size: usize,
    #[arg(long, default_value_t = 64)]
    pub local_batch: usize,
    /// Sweep CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Measurements, a sweep CSV, or a training metrics CSV.
    pub input: PathBuf,
    /// ring, tree or linear.
    #[arg(long, default_value = "ring", value_parser = parse_algo)]
    pub algo: CollectiveAlgo,
    #[arg(long, default_value_t = simulator::RESNET50_PARAMS)]
    pub n_params: u64,
    #[arg(long, default_value_t = 4)]
    pub bytes_per_param: u32,
    #[arg(long, default_value_t = 64)]
    pub local_batch: usize,
    /// Intra-group latency to store in the model (not fitted).
    #[arg(long, default_value_t = 5e-5)]
    pub alpha_local: f64,
    /// Intra-group inverse bandwidth to store in the model (not fitted).
    #[arg(long, default_value_t = 1e-10)]
    pub beta_local: f64,
    /// Fitted model JSON path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_algo(s: &str) -> std::result::Result<CollectiveAlgo, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown allreduce algorithm {s:?} (ring, tree or linear)"))
}

/// Parses and runs the command line, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Verify { config } => cmd_verify(&config),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Calibrate(a) => cmd_calibrate(&a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let file = RunConfigFile::load(&args.config)?;
    let use_tcp = file.transport.backend == config::Backend::Tcp && file.algorithm != Algorithm::Sequential;
    if args.rank.is_some() && !use_tcp {
        return Err(Error::config("transport.backend", "--rank needs the tcp backend"));
    }
    let result = if use_tcp {
        match args.rank {
            Some(rank) => match train_tcp_rank(&file, rank)? {
                Some(result) => result,
                None => return Ok(0),
            },
            None => train_tcp_spawn(&file, &args.config)?,
        }
    } else {
        let (cfg, dataset) = file.build()?;
        executors::run_with_dataset(&cfg, &dataset)?
    };
    report_training(&file, &result, args.out.as_deref())?;
    Ok(0)
}

fn report_training(file: &RunConfigFile, result: &TrainResult, out: Option<&Path>) -> Result<()> {
    let run_id = file.run_id();
    if let Some(path) = out {
        let mut w = create(path)?;
        write_metrics(&mut w, &run_id, result)?;
    }
    println!("run_id {run_id}");
    println!(
        "{} N={} G={}: {} iterations, global batch {}",
        result.algorithm,
        result.topology.n_workers(),
        result.topology.n_groups(),
        result.records.len(),
        result.global_batch
    );
    println!("initial loss {:.6}", result.initial_loss);
    println!("final loss {:.6}", result.final_loss);
    println!("mean throughput {:.1} samples/s", result.throughput);
    if !result.replicas_consistent {
        return Err(Error::Rank {
            rank: 0,
            phase: "consistency check",
            source: Box::new(Error::InvalidArgument("worker replicas diverged".into())),
        });
    }
    Ok(())
}

fn tcp_world(file: &RunConfigFile) -> Result<Vec<std::net::SocketAddr>> {
    let addrs = file.endpoints()?;
    let world = executors::Topology::new(file.n_workers, file.n_groups)?.world_size(file.algorithm);
    if addrs.len() != world {
        return Err(Error::config(
            "transport.endpoints",
            format!("{} needs {world} endpoints, got {}", file.algorithm, addrs.len()),
        ));
    }
    Ok(addrs)
}

/// Runs one rank; only rank 0 returns the run summary.
fn train_tcp_rank(file: &RunConfigFile, rank: usize) -> Result<Option<TrainResult>> {
    let addrs = tcp_world(file)?;
    if rank >= addrs.len() {
        return Err(Error::config(
            "--rank",
            format!("must be below the world size {}", addrs.len()),
        ));
    }
    let (cfg, dataset) = file.build()?;
    let ep = TcpEndpoint::connect(rank, &addrs, cfg.timeout).map_err(|e| Error::Rank {
        rank,
        phase: "rendezvous",
        source: Box::new(e.into()),
    })?;
    let outcome = executors::run_rank(&cfg, &dataset, &ep, Instant::now())?;
    drop(ep);
    if rank != 0 {
        return Ok(None);
    }
    executors::finish(&cfg, &dataset, outcome, true).map(Some)
}

/// Spawns ranks `1..world` as child processes and runs rank 0 here.
fn train_tcp_spawn(file: &RunConfigFile, config_path: &Path) -> Result<TrainResult> {
    let world = tcp_world(file)?.len();
    let exe = std::env::current_exe()?;
    let mut children: Vec<(usize, Child)> = Vec::with_capacity(world - 1);
    for rank in 1..world {
        let child = Command::new(&exe)
            .arg("train")
            .arg(config_path)
            .arg("--rank")
            .arg(rank.to_string())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()?;
        children.push((rank, child));
    }
    let lead = train_tcp_rank(file, 0);
    let mut failed = None;
    for (rank, mut child) in children {
        let status = child.wait()?;
        if !status.success() && failed.is_none() {
            failed = Some(Error::Rank {
                rank,
                phase: "child process",
                source: Box::new(Error::InvalidArgument(format!("exited with {status}"))),
            });
        }
    }
    match (lead, failed) {
        (Ok(Some(result)), None) => Ok(result),
        (Ok(_), Some(e)) => Err(e),
        (Err(e), Some(child)) if matches!(&e, Error::Rank { source, .. } if matches!(**source, Error::Transport(_))) => {
            Err(child)
        }
        (Err(e), _) => Err(e),
        (Ok(None), None) => unreachable!("rank 0 always returns a result"),
    }
}

fn cmd_verify(path: &Path) -> Result<i32> {
    let file = RunConfigFile::load(path)?;
    let (configs, tolerance) = file.verify_configs()?;
    let report = executors::verify_equivalence(&configs, tolerance)?;
    let width = configs.iter().map(|c| run_label(c).len()).max().unwrap_or(0).max(3);
    println!("{:<width$}  max deviation from {}", "run", report.runs[0].label);
    for run in &report.runs {
        println!("{:<width$}  {:e}", run.label, run.max);
    }
    for (i, j, dev) in &report.pairwise {
        println!("{} vs {}: {:e}", report.runs[*i].label, report.runs[*j].label, dev);
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!("tolerance {:e}: {verdict}", report.tolerance);
    if report.passed {
        Ok(0)
    } else {
        eprintln!(
            "error: max deviation {:e} exceeds tolerance {:e}",
            report.worst(),
            report.tolerance
        );
        Ok(1)
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let model = CostModel::load(&args.model)?;
    let counts = parse_worker_list(&args.workers)?;
    let sweep = simulator::sweep(&model, &counts, args.group_size, args.local_batch)?;
    println!(
        "{:<6} {:>8} {:>8} {:>12} {:>14} {:>10}",
        "algo", "workers", "groups", "iter_time_s", "samples/s", "eff_%"
    );
    for r in &sweep.rows {
        println!(
            "{:<6} {:>8} {:>8} {:>12.4} {:>14.1} {:>10.2}",
            r.algorithm.name(),
            r.n_workers,
            r.n_groups,
            r.iter_time,
            r.throughput,
            r.efficiency_percent
        );
    }
    if let Some(out) = &args.out {
        sweep.write_csv(out)?;
    }
    Ok(0)
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<i32> {
    let rows = simulator::read_measurements(&args.input)?;
    let target = CalibrationTarget {
        algo: args.algo,
        n_params: args.n_params,
        bytes_per_param: args.bytes_per_param,
        local_batch: args.local_batch,
        local_fanin: LocalFanin {
            alpha_local: args.alpha_local,
            beta_local: args.beta_local,
        },
    };
    let fit = simulator::calibrate(&rows, &target)?;
    fit.model.validate()?;
    let json = serde_json::to_string_pretty(&fit.model)?;
    for (row, residual) in rows.iter().zip(&fit.residuals) {
        eprintln!("n_workers {:>6}  allreduce residual {:+.3e} s", row.n_workers, residual);
    }
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}")?;
            w.flush()?;
            println!("alpha {:e} s, beta {:e} s/byte", fit.model.alpha, fit.model.beta);
        }
        None => println!("{json}"),
    }
    Ok(0)
}

/// `"4,8,16"` as written; `"4,8,...,256"` extends the ratio of the first two
/// entries until it passes the last one.
pub fn parse_worker_list(s: &str) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::config("--workers", msg);
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| {
        p.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("{p:?} is not a positive integer")))
    };
    match parts.iter().position(|p| *p == "...") {
        None => parts.into_iter().map(num).collect(),
        Some(i) => {
            if i != 2 || parts.len() != 4 {
                return Err(bad("expected the form a,b,...,c".into()));
            }
            let (a, b, c) = (num(parts[0])?, num(parts[1])?, num(parts[3])?);
            if b <= a || b % a != 0 {
                return Err(bad(format!("{b} is not a whole multiple of {a}")));
            }
            let ratio = b / a;
            let mut out = vec![a];
            let mut n = b;
            while n <= c {
                out.push(n);
                n = n
                    .checked_mul(ratio)
                    .ok_or_else(|| bad("worker count overflows".into()))?;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_lists() {
        assert_eq!(
            parse_worker_list("4,8,...,256").unwrap(),
            vec![4, 8, 16, 32, 64, 128, 256]
        );
        assert_eq!(parse_worker_list("3, 9, ..., 100").unwrap(), vec![3, 9, 27, 81]);
        assert_eq!(parse_worker_list("4,6,7").unwrap(), vec![4, 6, 7]);
        assert!(parse_worker_list("4,6,...,64").is_err());
        assert!(parse_worker_list("4,...,64").is_err());
        assert!(parse_worker_list("0,4").is_err());
        assert!(parse_worker_list("a").is_err());
    }

    #[test]
    fn algo_names() {
        assert_eq!(parse_algo("tree").unwrap(), CollectiveAlgo::Tree);
        assert!(parse_algo("butterfly").is_err());
    }

    #[test]
    fn bad_flags_exit_2() {
        assert_eq!(main_with_args(["lsgd", "simulate"]), 2);
        assert_eq!(main_with_args(["lsgd", "frobnicate"]), 2);
        assert_eq!(main_with_args(["lsgd", "--help"]), 0);
    }
}
