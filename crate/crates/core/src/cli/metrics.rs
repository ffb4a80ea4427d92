//! Per-iteration metrics CSV.

use std::io::Write;

use crate::executors::TrainResult;
use crate::Result;

pub const METRICS_HEADER: &str = "run_id,algorithm,n_workers,n_groups,iteration,epoch,lr,loss,t_io_s,t_compute_s,\
t_local_reduce_s,t_global_allreduce_s,t_broadcast_s,t_update_s,iter_time_s,throughput_sps";

/// Writes the header and one row per iteration.
pub fn write_metrics(out: &mut impl Write, run_id: &str, result: &TrainResult) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in &result.records {
        let t = &r.timings;
        let throughput = if r.iter_time > 0.0 {
            result.global_batch as f64 / r.iter_time
        } else {
            0.0
        };
        writeln!(
            out,
            "{run_id},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            result.algorithm,
            result.topology.n_workers(),
            result.topology.n_groups(),
            r.iteration,
            r.epoch,
            r.lr,
            r.loss,
            t.io,
            t.compute,
            t.local_reduce,
            t.global_allreduce,
            t.broadcast,
            t.update,
            r.iter_time,
            throughput,
        )?;
    }
    out.flush()?;
    Ok(())
}
