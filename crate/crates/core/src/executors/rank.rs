use std::thread;
use std::time::{Duration, Instant};

use super::{Algorithm, IterRecord, PhaseTimings, Sampling, TrainConfig};
use crate::data::{partition_minibatch, Batch, Dataset, EpochSampler};
use crate::numerics::{self, ParamVector, Rng};
use crate::optimizer::{sgd_update, OptimizerState};
use crate::transport::{allreduce, broadcast, reduce_to_root, CommGroup, Endpoint, RankId, Role};
use crate::{Error, Result};

// Group tags. Local group `j` uses TAG_LOCAL + j.
const TAG_WORKERS: u32 = 0;
const TAG_COMMUNICATORS: u32 = 1;
const TAG_LOCAL: u32 = 2;
// Point-to-point tags for the end-of-run gather at worker 0.
const TAG_GATHER_FINAL: u32 = u32::MAX - 1;
const TAG_GATHER_GLOBAL: u32 = u32::MAX - 2;

/// What one rank produced. Worker 0's outcome also carries the
/// communicators' global-allreduce timings and the replica check.
#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub rank: RankId,
    pub role: Role,
    pub records: Vec<IterRecord>,
    pub history: Vec<ParamVector>,
    pub final_params: ParamVector,
    pub wall_time: f64,
    pub replicas_consistent: bool,
}

fn failed(rank: RankId, phase: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Rank {
        rank,
        phase,
        source: Box::new(e),
    }
}

fn failed_t(rank: RankId, phase: &'static str) -> impl FnOnce(crate::transport::TransportError) -> Error {
    move |e| failed(rank, phase)(e.into())
}

fn pause(d: Duration) {
    if !d.is_zero() {
        thread::sleep(d);
    }
}

/// Yields this worker's shard for each iteration.
enum ShardSource {
    Shared {
        sampler: EpochSampler,
        global: usize,
        n_workers: usize,
        worker: usize,
    },
    Own {
        sampler: EpochSampler,
        local: usize,
    },
}

impl ShardSource {
    fn new(cfg: &TrainConfig, dataset: &Dataset, worker: usize) -> Self {
        let seeds = cfg.seeds();
        let independent = cfg.sampling == Sampling::Independent && cfg.algorithm != Algorithm::Sequential;
        let seed = if independent {
            seeds.worker(worker)
        } else {
            seeds.sampler
        };
        let sampler = EpochSampler::new(Rng::new(seed), dataset.len()).with_replacement(cfg.replacement);
        if independent {
            ShardSource::Own {
                sampler,
                local: cfg.local_batch,
            }
        } else {
            ShardSource::Shared {
                sampler,
                global: cfg.global_batch(),
                n_workers: cfg.topology.n_workers(),
                worker,
            }
        }
    }

    fn next(&mut self) -> Result<Vec<usize>> {
        match self {
            ShardSource::Shared {
                sampler,
                global,
                n_workers,
                worker,
            } => {
                let m = sampler.draw(*global)?;
                Ok(partition_minibatch(&m, *n_workers)?.swap_remove(*worker).indices)
            }
            ShardSource::Own { sampler, local } => Ok(sampler.draw(*local)?.indices),
        }
    }
}

/// Runs rank `ep.rank()` of a CSGD or LSGD world to completion.
pub fn run_rank(cfg: &TrainConfig, dataset: &Dataset, ep: &dyn Endpoint, clock: Instant) -> Result<RankOutcome> {
    let rank = ep.rank();
    let expected = cfg.topology.world_size(cfg.algorithm);
    if ep.world_size() != expected {
        return Err(Error::config(
            "transport",
            format!(
                "{} needs a world of {expected} ranks, endpoint has {}",
                cfg.algorithm,
                ep.world_size()
            ),
        ));
    }
    match (cfg.algorithm, cfg.topology.role(rank)) {
        (Algorithm::Sequential, _) => run_sequential_rank(cfg, dataset, clock),
        (Algorithm::Csgd, _) => flat_worker(cfg, dataset, Some(ep), rank, clock),
        (Algorithm::Lsgd, Role::Worker) => layered_worker(cfg, dataset, ep, rank, clock),
        (Algorithm::Lsgd, Role::Communicator) => communicator(cfg, ep, rank, clock),
    }
}

pub(super) fn run_sequential_rank(cfg: &TrainConfig, dataset: &Dataset, clock: Instant) -> Result<RankOutcome> {
    flat_worker(cfg, dataset, None, 0, clock)
}

fn secs(clock: Instant) -> f64 {
    clock.elapsed().as_secs_f64()
}

/// Shard gradient with the shard's mean loss appended.
fn gradient_payload(cfg: &TrainConfig, dataset: &Dataset, w: &[f64], shard: &[usize]) -> Result<Vec<f64>> {
    let (loss, g) = numerics::loss_and_gradient(&cfg.model, w, &Batch::new(dataset, shard))?;
    let mut payload = g.into_inner();
    payload.push(loss);
    Ok(payload)
}

/// Sequential SGD (no endpoint) or a CSGD worker.
fn flat_worker(
    cfg: &TrainConfig,
    dataset: &Dataset,
    ep: Option<&dyn Endpoint>,
    me: RankId,
    clock: Instant,
) -> Result<RankOutcome> {
    let n = cfg.model.n_params();
    let n_workers = cfg.topology.n_workers() as f64;
    let workers = match ep {
        Some(_) => Some(
            CommGroup::lowest_rooted((0..cfg.topology.n_workers()).collect(), TAG_WORKERS)
                .map_err(failed_t(me, "setup"))?,
        ),
        None => None,
    };
    let mut w = cfg.initial_params();
    let mut opt = OptimizerState::new(n);
    let mut source = ShardSource::new(cfg, dataset, me);
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut history = Vec::new();
    let start = secs(clock);

    for t in 0..cfg.iterations {
        if cfg.record_history {
            history.push(w.clone());
        }
        let t0 = secs(clock);
        let shard = source.next().map_err(failed(me, "data loading"))?;
        pause(cfg.io_delay);
        let t1 = secs(clock);
        let version = opt.iteration;
        let payload = gradient_payload(cfg, dataset, &w, &shard).map_err(failed(me, "gradient"))?;
        let t2 = secs(clock);
        let mut delta = match (ep, &workers) {
            (Some(ep), Some(group)) => {
                pause(cfg.global_link_delay);
                allreduce(ep, group, &payload).map_err(failed_t(me, "allreduce"))?
            }
            _ => ParamVector::from(payload),
        };
        let t3 = secs(clock);
        delta.div_scalar(n_workers);
        let lr = cfg.lr_at(t, dataset.len());
        sgd_update(&mut w, &delta[..n], &mut opt, &cfg.hyper, lr).map_err(failed(me, "update"))?;
        let t4 = secs(clock);
        records.push(IterRecord {
            iteration: t,
            epoch: cfg.epoch_at(t, dataset.len()),
            lr,
            loss: delta[n],
            timings: PhaseTimings {
                io: t1 - t0,
                compute: t2 - t1,
                global_allreduce: t3 - t2,
                update: t4 - t3,
                ..PhaseTimings::default()
            },
            iter_time: t4 - t0,
            io_interval: (t0, t1),
            global_interval: ep.map(|_| (t2, t3)),
            param_version: version,
        });
    }
    if cfg.record_history {
        history.push(w.clone());
    }
    let wall_time = secs(clock) - start;
    let mut outcome = RankOutcome {
        rank: me,
        role: Role::Worker,
        records,
        history,
        final_params: w,
        wall_time,
        replicas_consistent: true,
    };
    if let Some(ep) = ep {
        gather_at_worker0(cfg, ep, &mut outcome, None)?;
    }
    Ok(outcome)
}

fn local_group(cfg: &TrainConfig, group: usize) -> std::result::Result<CommGroup, crate::transport::TransportError> {
    let topo = &cfg.topology;
    let mut members: Vec<RankId> = topo.group_workers(group).collect();
    members.push(topo.communicator(group));
    CommGroup::new(members, topo.communicator(group), TAG_LOCAL + group as u32)
}

/// LSGD worker. Iteration `t` loads data, receives the averaged gradient of
/// iteration `t - 1` from its communicator, applies it, then computes and
/// reduces the gradient at the updated parameters.
fn layered_worker(
    cfg: &TrainConfig,
    dataset: &Dataset,
    ep: &dyn Endpoint,
    me: RankId,
    clock: Instant,
) -> Result<RankOutcome> {
    let n = cfg.model.n_params();
    let local = local_group(cfg, cfg.topology.group_of(me)).map_err(failed_t(me, "setup"))?;
    let mut w = cfg.initial_params();
    let mut opt = OptimizerState::new(n);
    let mut source = ShardSource::new(cfg, dataset, me);
    let mut records: Vec<IterRecord> = Vec::with_capacity(cfg.iterations);
    let mut history = Vec::new();
    let start = secs(clock);

    // Receives the pending averaged gradient and applies it. Returns (broadcast, update) seconds.
    let apply_pending = |w: &mut ParamVector,
                         opt: &mut OptimizerState,
                         records: &mut Vec<IterRecord>,
                         prev: usize|
     -> Result<(f64, f64)> {
        let a = secs(clock);
        let delta = broadcast(ep, &local, None).map_err(failed_t(me, "broadcast"))?;
        let b = secs(clock);
        if delta.len() != n + 1 {
            return Err(failed(me, "broadcast")(Error::DimensionMismatch {
                expected: n + 1,
                got: delta.len(),
            }));
        }
        sgd_update(w, &delta[..n], opt, &cfg.hyper, records[prev].lr).map_err(failed(me, "update"))?;
        records[prev].loss = delta[n];
        Ok((b - a, secs(clock) - b))
    };

    for t in 0..cfg.iterations {
        let t0 = secs(clock);
        let shard = source.next().map_err(failed(me, "data loading"))?;
        pause(cfg.io_delay);
        let t1 = secs(clock);
        let (bcast, update) = if t > 0 {
            apply_pending(&mut w, &mut opt, &mut records, t - 1)?
        } else {
            (0.0, 0.0)
        };
        if cfg.record_history {
            history.push(w.clone());
        }
        let version = opt.iteration;
        let t2 = secs(clock);
        let payload = gradient_payload(cfg, dataset, &w, &shard).map_err(failed(me, "gradient"))?;
        let t3 = secs(clock);
        reduce_to_root(ep, &local, &payload).map_err(failed_t(me, "local reduce"))?;
        let t4 = secs(clock);
        records.push(IterRecord {
            iteration: t,
            epoch: cfg.epoch_at(t, dataset.len()),
            lr: cfg.lr_at(t, dataset.len()),
            loss: f64::NAN,
            timings: PhaseTimings {
                io: t1 - t0,
                compute: t3 - t2,
                local_reduce: t4 - t3,
                broadcast: bcast,
                update,
                ..PhaseTimings::default()
            },
            iter_time: t4 - t0,
            io_interval: (t0, t1),
            global_interval: None,
            param_version: version,
        });
    }
    if let Some(last) = cfg.iterations.checked_sub(1) {
        let (bcast, update) = apply_pending(&mut w, &mut opt, &mut records, last)?;
        let r = &mut records[last];
        r.timings.broadcast += bcast;
        r.timings.update += update;
        r.iter_time += bcast + update;
    }
    if cfg.record_history {
        history.push(w.clone());
    }
    let wall_time = secs(clock) - start;
    let mut outcome = RankOutcome {
        rank: me,
        role: Role::Worker,
        records,
        history,
        final_params: w,
        wall_time,
        replicas_consistent: true,
    };
    gather_at_worker0(cfg, ep, &mut outcome, Some(cfg.topology.communicator(0)))?;
    Ok(outcome)
}

/// LSGD communicator: contributes a zero vector to its group's reduction,
/// divides by `N`, allreduces among communicators and broadcasts the result.
fn communicator(cfg: &TrainConfig, ep: &dyn Endpoint, me: RankId, clock: Instant) -> Result<RankOutcome> {
    let topo = &cfg.topology;
    let n = cfg.model.n_params();
    let group = me - topo.n_workers();
    let local = local_group(cfg, group).map_err(failed_t(me, "setup"))?;
    let comms = CommGroup::lowest_rooted(
        (0..topo.n_groups()).map(|j| topo.communicator(j)).collect(),
        TAG_COMMUNICATORS,
    )
    .map_err(failed_t(me, "setup"))?;
    let zero = vec![0.0; n + 1];
    let mut records = Vec::with_capacity(cfg.iterations);
    let start = secs(clock);

    for t in 0..cfg.iterations {
        let t0 = secs(clock);
        let mut sum = reduce_to_root(ep, &local, &zero)
            .map_err(failed_t(me, "local reduce"))?
            .expect("communicator is the local root");
        sum.div_scalar(topo.n_workers() as f64);
        let t1 = secs(clock);
        pause(cfg.global_link_delay);
        let avg = allreduce(ep, &comms, &sum).map_err(failed_t(me, "global allreduce"))?;
        let t2 = secs(clock);
        broadcast(ep, &local, Some(&avg)).map_err(failed_t(me, "broadcast"))?;
        let t3 = secs(clock);
        records.push(IterRecord {
            iteration: t,
            epoch: 0.0,
            lr: 0.0,
            loss: avg[n],
            timings: PhaseTimings {
                local_reduce: t1 - t0,
                global_allreduce: t2 - t1,
                broadcast: t3 - t2,
                ..PhaseTimings::default()
            },
            iter_time: t3 - t0,
            io_interval: (t0, t0),
            global_interval: Some((t1, t2)),
            param_version: t as u64,
        });
    }
    if group == 0 {
        let flat: Vec<f64> = records
            .iter()
            .flat_map(|r| {
                let (a, b) = r.global_interval.unwrap();
                [r.timings.global_allreduce, a, b]
            })
            .collect();
        ep.send(0, TAG_GATHER_GLOBAL, &flat).map_err(failed_t(me, "gather"))?;
    }
    Ok(RankOutcome {
        rank: me,
        role: Role::Communicator,
        records,
        history: Vec::new(),
        final_params: ParamVector::default(),
        wall_time: secs(clock) - start,
        replicas_consistent: true,
    })
}

/// Workers other than 0 send their final parameters to worker 0, which checks
/// them bitwise. Under LSGD, worker 0 also collects communicator 0's
/// global-allreduce timings.
fn gather_at_worker0(
    cfg: &TrainConfig,
    ep: &dyn Endpoint,
    outcome: &mut RankOutcome,
    global_source: Option<RankId>,
) -> Result<()> {
    let me = outcome.rank;
    if me != 0 {
        return ep
            .send(0, TAG_GATHER_FINAL, &outcome.final_params)
            .map_err(failed_t(me, "gather"));
    }
    for peer in 1..cfg.topology.n_workers() {
        let theirs = ep.recv(peer, TAG_GATHER_FINAL).map_err(failed_t(me, "gather"))?;
        outcome.replicas_consistent &= ParamVector::from(theirs.payload).bitwise_eq(&outcome.final_params);
    }
    if let Some(src) = global_source {
        let flat = ep.recv(src, TAG_GATHER_GLOBAL).map_err(failed_t(me, "gather"))?.payload;
        for (r, chunk) in outcome.records.iter_mut().zip(flat.chunks_exact(3)) {
            r.timings.global_allreduce = chunk[0];
            r.global_interval = Some((chunk[1], chunk[2]));
        }
    }
    Ok(())
}
