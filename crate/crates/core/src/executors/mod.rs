//! Training loops: sequential SGD, conventional distributed SGD (CSGD) and
//! Layered SGD (LSGD), plus the iterate-equivalence verifier.
//!
//! Every rank replays the same seeded minibatch stream, so all workers see the
//! same global minibatch `M` and take the contiguous shard `M^i` of it.
//! Gradients travel with one trailing slot holding the shard's mean loss; the
//! reductions that average gradients therefore also average minibatch loss.

mod rank;
mod verify;

use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{self, Batch, Dataset};
use crate::numerics::{self, MlpModel, ParamVector, Rng};
use crate::optimizer::{learning_rate, HyperParams};
use crate::transport::{self, RankId, Role, TransportError, DEFAULT_TIMEOUT};
use crate::{Error, Result};

pub use rank::{run_rank, RankOutcome};
pub use verify::{run_label, verify_equivalence, EquivalenceReport, RunDeviation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sequential,
    Csgd,
    Lsgd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sequential => "sequential",
            Algorithm::Csgd => "csgd",
            Algorithm::Lsgd => "lsgd",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `N` workers in `G` equal groups. Workers are ranks `0..N`; under LSGD the
/// communicator of group `j` is rank `N + j`, for a world of `N + G` ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    n_workers: usize,
    n_groups: usize,
}

impl Topology {
    pub fn new(n_workers: usize, n_groups: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::config("n_workers", "must be at least 1"));
        }
        if n_groups == 0 || !n_workers.is_multiple_of(n_groups) {
            return Err(Error::config(
                "n_groups",
                format!("must divide n_workers ({n_workers}), got {n_groups}"),
            ));
        }
        Ok(Topology { n_workers, n_groups })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn workers_per_group(&self) -> usize {
        self.n_workers / self.n_groups
    }

    pub fn world_size(&self, algorithm: Algorithm) -> usize {
        match algorithm {
            Algorithm::Lsgd => self.n_workers + self.n_groups,
            _ => self.n_workers,
        }
    }

    pub fn group_of(&self, worker: RankId) -> usize {
        worker / self.workers_per_group()
    }

    pub fn communicator(&self, group: usize) -> RankId {
        self.n_workers + group
    }

    pub fn group_workers(&self, group: usize) -> std::ops::Range<RankId> {
        let k = self.workers_per_group();
        group * k..(group + 1) * k
    }

    pub fn role(&self, rank: RankId) -> Role {
        if rank < self.n_workers {
            Role::Worker
        } else {
            Role::Communicator
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        spread: f64,
    },
    Csv(PathBuf),
}

/// How per-worker shards are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// One global minibatch per iteration, split into contiguous equal shards.
    #[default]
    Partition,
    /// Each worker draws its own shard from a per-worker stream.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub topology: Topology,
    pub model: MlpModel,
    pub init_scale: f64,
    pub data: DataSource,
    pub sampling: Sampling,
    pub replacement: bool,
    pub hyper: HyperParams,
    /// Per-worker batch; the global batch is `local_batch * n_workers`.
    pub local_batch: usize,
    /// Number of iterations `T`.
    pub iterations: usize,
    pub seed: u64,
    /// Injected data-loading time per iteration.
    pub io_delay: Duration,
    /// Injected latency of every collective that spans groups.
    pub global_link_delay: Duration,
    pub timeout: Duration,
    /// Keep `w_0..=w_T` in the result.
    pub record_history: bool,
}

impl TrainConfig {
    /// Defaults: one worker, plain SGD, batch 64, 100 iterations, no delays.
    pub fn new(algorithm: Algorithm, topology: Topology, model: MlpModel, data: DataSource) -> Self {
        TrainConfig {
            algorithm,
            topology,
            model,
            init_scale: 0.1,
            data,
            sampling: Sampling::Partition,
            replacement: false,
            hyper: HyperParams::default(),
            local_batch: 64,
            iterations: 100,
            seed: 0,
            io_delay: Duration::ZERO,
            global_link_delay: Duration::ZERO,
            timeout: DEFAULT_TIMEOUT,
            record_history: false,
        }
    }

    pub fn global_batch(&self) -> usize {
        self.local_batch * self.topology.n_workers()
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::new(self.seed)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic {
                n_samples,
                n_features,
                n_classes,
                spread,
            } => data::generate_synthetic(self.seeds().data, *n_samples, *n_features, *n_classes, *spread),
            DataSource::Csv(path) => data::load_csv(path),
        }
    }

    /// Fractional epoch reached at the start of iteration `t`.
    pub fn epoch_at(&self, t: usize, n_samples: usize) -> f64 {
        t as f64 * self.global_batch() as f64 / n_samples as f64
    }

    pub fn lr_at(&self, t: usize, n_samples: usize) -> f64 {
        learning_rate(
            &self.hyper,
            self.topology.n_workers(),
            self.local_batch,
            self.epoch_at(t, n_samples),
        )
    }

    pub fn initial_params(&self) -> ParamVector {
        self.model
            .init_params(&mut Rng::new(self.seeds().init), self.init_scale)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        Topology::new(self.topology.n_workers, self.topology.n_groups)?;
        if self.algorithm == Algorithm::Sequential && self.topology.n_workers != 1 {
            return Err(Error::config("n_workers", "sequential SGD runs on exactly one worker"));
        }
        if self.local_batch == 0 {
            return Err(Error::config("local_batch", "must be at least 1"));
        }
        if self.global_batch() > dataset.len() {
            return Err(Error::config(
                "local_batch",
                format!(
                    "global batch {} exceeds the {} available samples",
                    self.global_batch(),
                    dataset.len()
                ),
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("model.init_scale", "must be nonnegative"));
        }
        if dataset.n_features() != self.model.input_dim() {
            return Err(Error::config(
                "model.layer_sizes",
                format!(
                    "input size {} does not match the data's {} features",
                    self.model.input_dim(),
                    dataset.n_features()
                ),
            ));
        }
        if dataset.n_classes() > self.model.n_classes() {
            return Err(Error::config(
                "model.layer_sizes",
                format!(
                    "output size {} is smaller than the data's {} classes",
                    self.model.n_classes(),
                    dataset.n_classes()
                ),
            ));
        }
        self.hyper.validate()
    }
}

/// Independent generator seeds derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub sampler: u64,
    worker_base: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        let mut master = Rng::new(seed);
        Seeds {
            data: master.next_u64(),
            init: master.next_u64(),
            sampler: master.next_u64(),
            worker_base: master.next_u64(),
        }
    }

    pub fn worker(&self, worker: usize) -> u64 {
        Rng::new(self.worker_base.wrapping_add(worker as u64)).next_u64()
    }
}

/// Wall-clock seconds spent in each phase of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub io: f64,
    pub compute: f64,
    pub local_reduce: f64,
    pub global_allreduce: f64,
    pub broadcast: f64,
    pub update: f64,
}

/// One iteration as seen by worker 0. Intervals are seconds since the run's
/// start instant.
///
/// Under LSGD the update recorded at iteration `t` applies the gradient of
/// iteration `t - 1` (the last iteration also carries the final drain), and
/// `global_interval` is the communicators' allreduce of gradient `t`, which
/// runs while the workers load data for iteration `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub epoch: f64,
    pub lr: f64,
    /// Mean loss over the global minibatch at `w_t`.
    pub loss: f64,
    pub timings: PhaseTimings,
    pub iter_time: f64,
    pub io_interval: (f64, f64),
    pub global_interval: Option<(f64, f64)>,
    /// Number of updates applied to the parameters the gradient was taken at.
    pub param_version: u64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub algorithm: Algorithm,
    pub topology: Topology,
    pub global_batch: usize,
    pub final_params: ParamVector,
    /// `w_0..=w_T` when `record_history` was set, otherwise empty.
    pub history: Vec<ParamVector>,
    pub records: Vec<IterRecord>,
    /// Full-dataset loss at `w_0` and `w_T`.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_time: f64,
    /// Samples per second over the whole run.
    pub throughput: f64,
    /// All worker replicas held bitwise-identical parameters.
    pub replicas_consistent: bool,
}

impl TrainResult {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn mean_iter_time(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.iter_time).sum::<f64>() / self.records.len() as f64
    }
}

/// Plain minibatch SGD on a single worker.
pub fn run_sequential(cfg: &TrainConfig) -> Result<TrainResult> {
    expect_algorithm(cfg, Algorithm::Sequential)?;
    run(cfg)
}

/// Flat allreduce of shard gradients over all `N` workers.
pub fn run_csgd(cfg: &TrainConfig) -> Result<TrainResult> {
    expect_algorithm(cfg, Algorithm::Csgd)?;
    run(cfg)
}

/// Local reduce to group communicators, global allreduce among
/// communicators overlapped with the workers' next data load, broadcast, then
/// the postponed update.
pub fn run_lsgd(cfg: &TrainConfig) -> Result<TrainResult> {
    expect_algorithm(cfg, Algorithm::Lsgd)?;
    run(cfg)
}

fn expect_algorithm(cfg: &TrainConfig, want: Algorithm) -> Result<()> {
    if cfg.algorithm != want {
        return Err(Error::config(
            "algorithm",
            format!("expected {want}, config says {}", cfg.algorithm),
        ));
    }
    Ok(())
}

/// Runs any configured algorithm in this process, one thread per rank.
pub fn run(cfg: &TrainConfig) -> Result<TrainResult> {
    let dataset = cfg.load_dataset()?;
    run_with_dataset(cfg, &dataset)
}

pub fn run_with_dataset(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainResult> {
    cfg.validate(dataset)?;
    let clock = Instant::now();
    if cfg.algorithm == Algorithm::Sequential {
        let outcome = rank::run_sequential_rank(cfg, dataset, clock)?;
        return finish(cfg, dataset, outcome, true);
    }
    let world = cfg.topology.world_size(cfg.algorithm);
    let endpoints = transport::inprocess_world(world, cfg.timeout);
    let results: Vec<Result<RankOutcome>> = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| s.spawn(move || run_rank(cfg, dataset, &ep, clock)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let outcomes = pick_error(results)?;
    let worker_histories_agree = outcomes.iter().filter(|o| o.role == Role::Worker).all(|o| {
        o.history.len() == outcomes[0].history.len()
            && o.history.iter().zip(&outcomes[0].history).all(|(a, b)| a.bitwise_eq(b))
    });
    let lead = outcomes.into_iter().next().expect("world has rank 0");
    finish(cfg, dataset, lead, worker_histories_agree)
}

/// Prefers the root-cause failure over the disconnects it triggers on peers.
fn pick_error(results: Vec<Result<RankOutcome>>) -> Result<Vec<RankOutcome>> {
    if results.iter().all(Result::is_ok) {
        return Ok(results.into_iter().map(Result::unwrap).collect());
    }
    let is_secondary = |e: &Error| {
        matches!(
            e,
            Error::Rank { source, .. }
                if matches!(**source, Error::Transport(TransportError::Closed { .. }))
        )
    };
    let mut errors: Vec<Error> = results.into_iter().filter_map(Result::err).collect();
    let idx = errors.iter().position(|e| !is_secondary(e)).unwrap_or(0);
    Err(errors.swap_remove(idx))
}

/// Builds the run summary from worker 0's outcome.
pub fn finish(cfg: &TrainConfig, dataset: &Dataset, lead: RankOutcome, extra_consistency: bool) -> Result<TrainResult> {
    let all = dataset.all_indices();
    let batch = Batch::new(dataset, &all);
    let initial_loss = numerics::loss(&cfg.model, &cfg.initial_params(), &batch)?;
    let final_loss = numerics::loss(&cfg.model, &lead.final_params, &batch)?;
    let samples = (cfg.iterations * cfg.global_batch()) as f64;
    Ok(TrainResult {
        algorithm: cfg.algorithm,
        topology: cfg.topology,
        global_batch: cfg.global_batch(),
        final_params: lead.final_params,
        history: lead.history,
        records: lead.records,
        initial_loss,
        final_loss,
        wall_time: lead.wall_time,
        throughput: if lead.wall_time > 0.0 {
            samples / lead.wall_time
        } else {
            0.0
        },
        replicas_consistent: lead.replicas_consistent && extra_consistency,
    })
}
