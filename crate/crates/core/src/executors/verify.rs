use super::{run_with_dataset, Algorithm, Sampling, TrainConfig};
use crate::numerics::max_relative_deviation;
use crate::optimizer::UpdateMode;
use crate::{Error, Result};

/// Deviation of one run from the reference run (the first config).
#[derive(Debug, Clone)]
pub struct RunDeviation {
    pub label: String,
    /// Max relative deviation at each `t` in `0..=T`.
    pub per_iteration: Vec<f64>,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub runs: Vec<RunDeviation>,
    /// `(i, j, max deviation of run j from run i)` for every pair `i < j`.
    pub pairwise: Vec<(usize, usize, f64)>,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn worst(&self) -> f64 {
        self.pairwise.iter().map(|p| p.2).fold(0.0, f64::max)
    }
}

pub fn run_label(cfg: &TrainConfig) -> String {
    match cfg.algorithm {
        Algorithm::Sequential => "sequential".to_string(),
        Algorithm::Csgd => format!("csgd N={}", cfg.topology.n_workers()),
        Algorithm::Lsgd => format!("lsgd N={} G={}", cfg.topology.n_workers(), cfg.topology.n_groups()),
    }
}

fn check_aligned(cfgs: &[TrainConfig]) -> Result<()> {
    let Some(first) = cfgs.first() else {
        return Err(Error::ConfigMismatch("no runs to compare".into()));
    };
    for cfg in cfgs {
        let label = run_label(cfg);
        let differs = |what: &str| {
            Err(Error::ConfigMismatch(format!(
                "{label} differs from {} in {what}",
                run_label(first)
            )))
        };
        if cfg.hyper.mode != UpdateMode::Plain {
            return Err(Error::ConfigMismatch(format!("{label} must use plain updates")));
        }
        if cfg.sampling != Sampling::Partition {
            return Err(Error::ConfigMismatch(format!("{label} must use partition sampling")));
        }
        if cfg.seed != first.seed {
            return differs("seed");
        }
        if cfg.model != first.model || cfg.init_scale != first.init_scale {
            return differs("model");
        }
        if cfg.data != first.data || cfg.replacement != first.replacement {
            return differs("data");
        }
        if cfg.hyper != first.hyper {
            return differs("hyperparameters");
        }
        if cfg.global_batch() != first.global_batch() {
            return differs("global batch");
        }
        if cfg.iterations != first.iterations {
            return differs("iteration count");
        }
    }
    Ok(())
}

/// Runs every config on the same data and compares iterate histories
/// `w_0..=w_T`. Deviation is `max_k |a_k - b_k| / max(|a_k|, 1e-8)`.
pub fn verify_equivalence(cfgs: &[TrainConfig], tolerance: f64) -> Result<EquivalenceReport> {
    check_aligned(cfgs)?;
    let dataset = cfgs[0].load_dataset()?;
    let histories = cfgs
        .iter()
        .map(|cfg| {
            let cfg = TrainConfig {
                record_history: true,
                ..cfg.clone()
            };
            let r = run_with_dataset(&cfg, &dataset)?;
            if !r.replicas_consistent {
                return Err(Error::ConfigMismatch(format!("{} replicas diverged", run_label(&cfg))));
            }
            Ok(r.history)
        })
        .collect::<Result<Vec<_>>>()?;

    let deviation = |a: usize, b: usize| -> Vec<f64> {
        histories[a]
            .iter()
            .zip(&histories[b])
            .map(|(x, y)| max_relative_deviation(x, y))
            .collect()
    };
    let runs: Vec<RunDeviation> = cfgs
        .iter()
        .enumerate()
        .map(|(j, cfg)| {
            let per_iteration = deviation(0, j);
            let max = per_iteration.iter().cloned().fold(0.0, f64::max);
            RunDeviation {
                label: run_label(cfg),
                per_iteration,
                max,
            }
        })
        .collect();
    let mut pairwise = Vec::new();
    for i in 0..cfgs.len() {
        for j in i + 1..cfgs.len() {
            let max = deviation(i, j).into_iter().fold(0.0, f64::max);
            pairwise.push((i, j, max));
        }
    }
    let passed = pairwise.iter().all(|p| p.2 <= tolerance) && runs.iter().all(|r| r.max <= tolerance);
    Ok(EquivalenceReport {
        tolerance,
        runs,
        pairwise,
        passed,
    })
}
