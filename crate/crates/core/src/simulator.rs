//! Closed-form cost model for CSGD and LSGD iteration time, throughput and
//! scaling efficiency at worker counts beyond what can be run locally, plus a
//! least-squares fit of the model from measured timings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::executors::Algorithm;
use crate::par::{self, ExecMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveAlgo {
    Ring,
    Tree,
    Linear,
}

/// Intra-group link parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFanin {
    pub alpha_local: f64,
    pub beta_local: f64,
}

/// All times in seconds; `beta` in seconds per byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Forward and backward time per training sample.
    pub t_sample: f64,
    /// Data loading time per iteration.
    pub t_io: f64,
    /// Per-hop latency of inter-group links.
    pub alpha: f64,
    /// Inverse bandwidth of inter-group links.
    pub beta: f64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u32,
    pub n_params: u64,
    pub allreduce_algo: CollectiveAlgo,
    pub local_fanin: LocalFanin,
}

fn default_bytes_per_param() -> u32 {
    4
}

/// ResNet-50 parameter count.
pub const RESNET50_PARAMS: u64 = 25_557_032;

impl CostModel {
    /// Constants for a K80-class cluster training ResNet-50 at batch 64 per
    /// worker over an EDR-class fabric, chosen so the sweep over 4..=256
    /// workers gives about 99% CSGD efficiency at 8 workers and 93% LSGD
    /// efficiency at 256:
    ///
    /// - 20 ms per sample (about 50 images/s per GPU), 150 ms to load a batch;
    /// - ring allreduce with 1.6 ms per step and 4 GB/s effective bandwidth
    ///   across nodes (staging through host memory);
    /// - 50 us and 10 GB/s (PCIe) inside a node.
    pub fn reference_cluster() -> Self {
        CostModel {
            t_sample: 0.02,
            t_io: 0.15,
            alpha: 1.6e-3,
            beta: 2.5e-10,
            bytes_per_param: 4,
            n_params: RESNET50_PARAMS,
            allreduce_algo: CollectiveAlgo::Ring,
            local_fanin: LocalFanin {
                alpha_local: 5e-5,
                beta_local: 1e-10,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_sample", self.t_sample),
            ("t_io", self.t_io),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("local_fanin.alpha_local", self.local_fanin.alpha_local),
            ("local_fanin.beta_local", self.local_fanin.beta_local),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        if self.n_params == 0 {
            return Err(Error::config("n_params", "must be at least 1"));
        }
        if self.bytes_per_param == 0 {
            return Err(Error::config("bytes_per_param", "must be at least 1"));
        }
        Ok(())
    }

    pub fn gradient_bytes(&self) -> f64 {
        self.n_params as f64 * self.bytes_per_param as f64
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let model: CostModel = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { String::new() } else { key }, e.into_inner().to_string())
        })?;
        model.validate()?;
        Ok(model)
    }
}

/// Time of one collective over `p` members moving `n_bytes` each.
///
/// ring: `2(p-1) alpha + 2 (p-1)/p n beta`; tree: `2 ceil(log2 p) (alpha + n beta)`;
/// linear: `(p-1)(alpha + n beta)`. Zero for `p <= 1`.
pub fn collective_cost(alpha: f64, beta: f64, p: usize, n_bytes: f64, algo: CollectiveAlgo) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let (a, b) = coefficients(p, algo);
    a * alpha + b * n_bytes * beta
}

/// Multipliers of `alpha` and `n_bytes * beta` in [`collective_cost`].
fn coefficients(p: usize, algo: CollectiveAlgo) -> (f64, f64) {
    if p <= 1 {
        return (0.0, 0.0);
    }
    let pf = p as f64;
    match algo {
        CollectiveAlgo::Ring => (2.0 * (pf - 1.0), 2.0 * (pf - 1.0) / pf),
        CollectiveAlgo::Tree => {
            let steps = 2.0 * (usize::BITS - (p - 1).leading_zeros()) as f64;
            (steps, steps)
        }
        CollectiveAlgo::Linear => (pf - 1.0, pf - 1.0),
    }
}

/// [`collective_cost`] over the inter-group links of `cost`.
pub fn collective_time(cost: &CostModel, p: usize, n_bytes: f64, algo: CollectiveAlgo) -> f64 {
    collective_cost(cost.alpha, cost.beta, p, n_bytes, algo)
}

/// Phases of one modeled iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterBreakdown {
    pub io: f64,
    pub compute: f64,
    /// Reduce plus broadcast inside a group (LSGD only).
    pub local: f64,
    /// The allreduce spanning groups.
    pub allreduce: f64,
    pub total: f64,
}

pub fn csgd_breakdown(cost: &CostModel, n_workers: usize, local_batch: usize) -> IterBreakdown {
    let io = cost.t_io;
    let compute = local_batch as f64 * cost.t_sample;
    let allreduce = collective_time(cost, n_workers, cost.gradient_bytes(), cost.allreduce_algo);
    IterBreakdown {
        io,
        compute,
        local: 0.0,
        allreduce,
        total: io + compute + allreduce,
    }
}

pub fn lsgd_breakdown(
    cost: &CostModel,
    n_workers: usize,
    n_groups: usize,
    local_batch: usize,
) -> Result<IterBreakdown> {
    if n_workers == 0 || n_groups == 0 || !n_workers.is_multiple_of(n_groups) {
        return Err(Error::InvalidArgument(format!(
            "{n_groups} groups do not evenly divide {n_workers} workers"
        )));
    }
    let members = n_workers / n_groups + 1;
    let rooted = collective_cost(
        cost.local_fanin.alpha_local,
        cost.local_fanin.beta_local,
        members,
        cost.gradient_bytes(),
        CollectiveAlgo::Linear,
    );
    let local = 2.0 * rooted;
    let allreduce = collective_time(cost, n_groups, cost.gradient_bytes(), cost.allreduce_algo);
    let io = cost.t_io;
    let compute = local_batch as f64 * cost.t_sample;
    Ok(IterBreakdown {
        io,
        compute,
        local,
        allreduce,
        total: io.max(allreduce) + compute + local,
    })
}

/// Serial phases: load, compute, allreduce over all workers.
pub fn iter_time_csgd(cost: &CostModel, n_workers: usize, local_batch: usize) -> f64 {
    csgd_breakdown(cost, n_workers, local_batch).total
}

/// `max(t_io, global allreduce) + compute + local reduce and broadcast`.
pub fn iter_time_lsgd(cost: &CostModel, n_workers: usize, n_groups: usize, local_batch: usize) -> Result<f64> {
    lsgd_breakdown(cost, n_workers, n_groups, local_batch).map(|b| b.total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub n_workers: usize,
    pub n_groups: usize,
    pub iter_time: f64,
    pub throughput: f64,
    pub efficiency_percent: f64,
    pub allreduce_time: f64,
    pub io_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn efficiency(&self, algorithm: Algorithm, n_workers: usize) -> Option<f64> {
        self.row(algorithm, n_workers).map(|r| r.efficiency_percent)
    }

    pub fn row(&self, algorithm: Algorithm, n_workers: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.n_workers == n_workers)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{SWEEP_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.algorithm,
                r.n_workers,
                r.n_groups,
                r.iter_time,
                r.throughput,
                r.efficiency_percent,
                r.allreduce_time,
                r.io_time
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const SWEEP_HEADER: &str =
    "algorithm,n_workers,n_groups,iter_time_s,throughput_sps,efficiency_percent,allreduce_time_s,io_time_s";

/// CSGD and LSGD rows for every worker count, LSGD with groups of
/// `group_size`. Efficiency is per-worker throughput relative to the smallest
/// count in the sweep.
pub fn sweep(cost: &CostModel, worker_counts: &[usize], group_size: usize, local_batch: usize) -> Result<SweepResult> {
    sweep_with(ExecMode::default(), cost, worker_counts, group_size, local_batch)
}

pub fn sweep_with(
    mode: ExecMode,
    cost: &CostModel,
    worker_counts: &[usize],
    group_size: usize,
    local_batch: usize,
) -> Result<SweepResult> {
    cost.validate()?;
    if local_batch == 0 {
        return Err(Error::InvalidArgument("local batch must be at least 1".into()));
    }
    let mut counts = worker_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let Some(&base) = counts.first() else {
        return Err(Error::InvalidArgument("no worker counts to sweep".into()));
    };
    if base == 0 {
        return Err(Error::InvalidArgument("worker counts must be positive".into()));
    }
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be positive".into()));
    }
    if let Some(bad) = counts.iter().find(|&&n| n % group_size != 0) {
        return Err(Error::InvalidArgument(format!(
            "{bad} workers cannot be split into groups of {group_size}"
        )));
    }
    let samples = |n: usize| (n * local_batch) as f64;
    let breakdowns = par::map_slice(mode, &counts, |&n| {
        let c = csgd_breakdown(cost, n, local_batch);
        lsgd_breakdown(cost, n, n / group_size, local_batch).map(|l| (n, c, l))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let (_, base_c, base_l) = breakdowns[0];
    let per_worker = |b: &IterBreakdown, n: usize| samples(n) / b.total / n as f64;
    let base_csgd = per_worker(&base_c, base);
    let base_lsgd = per_worker(&base_l, base);

    let mut rows = Vec::with_capacity(2 * counts.len());
    for (algorithm, base_rate) in [(Algorithm::Csgd, base_csgd), (Algorithm::Lsgd, base_lsgd)] {
        for (n, c, l) in &breakdowns {
            let (b, groups) = if algorithm == Algorithm::Csgd {
                (c, 1)
            } else {
                (l, n / group_size)
            };
            rows.push(SweepRow {
                algorithm,
                n_workers: *n,
                n_groups: groups,
                iter_time: b.total,
                throughput: samples(*n) / b.total,
                efficiency_percent: 100.0 * per_worker(b, *n) / base_rate,
                allreduce_time: b.allreduce,
                io_time: b.io,
            });
        }
    }
    Ok(SweepResult { rows })
}

/// Averaged timings of one configuration, as plotted per worker count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub n_workers: usize,
    /// Wall time of one iteration.
    pub train_time: f64,
    /// Allreduce time within that iteration.
    pub allreduce_time: f64,
    pub io_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: CostModel,
    /// Measured minus predicted allreduce time, per input row.
    pub residuals: Vec<f64>,
}

/// Shape of the gradient being communicated and the batch behind the timings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTarget {
    pub algo: CollectiveAlgo,
    pub n_params: u64,
    pub bytes_per_param: u32,
    pub local_batch: usize,
    pub local_fanin: LocalFanin,
}

/// Least-squares fit of `alpha` and `beta` to the allreduce times; `t_io` is
/// the mean measured load time (0 if not measured) and `t_sample` comes from
/// the mean remaining compute time.
///
/// Tree and linear allreduce scale latency and bandwidth terms identically
/// in `p`, so a single message size cannot separate them; those fits are
/// rejected as rank deficient.
pub fn calibrate(rows: &[Measurement], target: &CalibrationTarget) -> Result<Calibration> {
    let distinct: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.n_workers).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(
            "calibration needs rows for at least two distinct worker counts".into(),
        ));
    }
    if target.local_batch == 0 || target.n_params == 0 || target.bytes_per_param == 0 {
        return Err(Error::InvalidArgument(
            "local batch, n_params and bytes_per_param must be positive".into(),
        ));
    }
    let n_bytes = target.n_params as f64 * target.bytes_per_param as f64;

    // Normal equations in (alpha, n_bytes * beta).
    let (mut saa, mut sab, mut sbb, mut say, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let (a, b) = coefficients(r.n_workers, target.algo);
        let y = r.allreduce_time;
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        say += a * y;
        sby += b * y;
    }
    let det = saa * sbb - sab * sab;
    if !(det.abs() > 1e-9 * saa * sbb) {
        return Err(Error::InvalidArgument(format!(
            "allreduce times cannot separate latency from bandwidth under {:?}",
            target.algo
        )));
    }
    let alpha = ((sbb * say - sab * sby) / det).max(0.0);
    let beta_bytes = ((saa * sby - sab * say) / det).max(0.0);
    let beta = beta_bytes / n_bytes;

    let residuals = rows
        .iter()
        .map(|r| {
            let (a, b) = coefficients(r.n_workers, target.algo);
            r.allreduce_time - (a * alpha + b * beta_bytes)
        })
        .collect();

    let t_io = if rows.iter().all(|r| r.io_time.is_some()) {
        rows.iter().map(|r| r.io_time.unwrap()).sum::<f64>() / rows.len() as f64
    } else {
        0.0
    };
    let compute = rows.iter().map(|r| r.train_time - r.allreduce_time).sum::<f64>() / rows.len() as f64 - t_io;
    let model = CostModel {
        t_sample: (compute / target.local_batch as f64).max(0.0),
        t_io: t_io.max(0.0),
        alpha,
        beta,
        bytes_per_param: target.bytes_per_param,
        n_params: target.n_params,
        allreduce_algo: target.algo,
        local_fanin: target.local_fanin,
    };
    Ok(Calibration { model, residuals })
}

/// Reads calibration input from any of three CSV layouts, selected by header:
///
/// - measurements: `n_workers,train_time_s,allreduce_time_s[,io_time_s]`;
/// - a sweep written by [`SweepResult::write_csv`] (CSGD rows are used);
/// - training metrics (CSGD rows, averaged per worker count).
pub fn read_measurements(path: impl AsRef<Path>) -> Result<Vec<Measurement>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let (train_col, comm_col, io_col) = if let (Some(t), Some(a)) = (col("train_time_s"), col("allreduce_time_s")) {
        (t, a, col("io_time_s"))
    } else if let (Some(t), Some(a)) = (col("iter_time_s"), col("allreduce_time_s")) {
        (t, a, col("io_time_s"))
    } else if let (Some(t), Some(a)) = (col("iter_time_s"), col("t_global_allreduce_s")) {
        (t, a, col("t_io_s"))
    } else {
        return Err(parse_err(1, "unrecognized header for calibration input".into()));
    };
    let workers_col = col("n_workers").ok_or_else(|| parse_err(1, "missing n_workers column".into()))?;
    let algo_col = col("algorithm");

    // Averaged per worker count, in first-seen order.
    let mut groups: BTreeMap<usize, (usize, f64, f64, Option<f64>)> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if let Some(c) = algo_col {
            if &record[c] != "csgd" {
                continue;
            }
        }
        let num = |c: usize| -> Result<f64> {
            record[c]
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("invalid number {:?}", &record[c])))
        };
        let n: usize = record[workers_col]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid worker count {:?}", &record[workers_col])))?;
        let (train, comm) = (num(train_col)?, num(comm_col)?);
        let io = io_col.map(num).transpose()?;
        let e = groups.entry(n).or_insert((0, 0.0, 0.0, io.map(|_| 0.0)));
        e.0 += 1;
        e.1 += train;
        e.2 += comm;
        e.3 = match (e.3, io) {
            (Some(acc), Some(v)) => Some(acc + v),
            _ => None,
        };
    }
    if groups.is_empty() {
        return Err(parse_err(1, "no usable rows".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(n, (count, train, comm, io))| {
            let k = count as f64;
            Measurement {
                n_workers: n,
                train_time: train / k,
                allreduce_time: comm / k,
                io_time: io.map(|v| v / k),
            }
        })
        .collect())
}
