//! JSON run configuration.
//!
//! Required keys are `algorithm`, `n_workers` and `model.layer_sizes`; every
//! other key has a default (listed on the fields below). Unknown keys are
//! rejected, and every error names the dotted key path it concerns.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::executors::{Algorithm, DataSource, Sampling, Topology, TrainConfig};
use crate::numerics::{Activation, MlpModel};
use crate::optimizer::HyperParams;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub algorithm: Algorithm,
    pub n_workers: usize,
    /// Default 1.
    #[serde(default = "one")]
    pub n_groups: usize,
    /// Per-worker batch, default 64.
    #[serde(default = "default_local_batch")]
    pub local_batch: usize,
    /// Used only when `iterations` is absent: `epochs * floor(n_samples / global batch)`.
    #[serde(default)]
    pub epochs: Option<u32>,
    /// Default 100 when neither this nor `epochs` is given.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub optim: HyperParams,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub delays: DelaySection,
    /// Only read by `verify`.
    #[serde(default)]
    pub verify: Option<VerifySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layer_sizes: Vec<usize>,
    /// Default `relu`.
    #[serde(default)]
    pub activation: Activation,
    /// Standard deviation of the initial weights, default 0.1.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Default `synthetic`.
    pub source: SourceKind,
    /// Synthetic only; default 5000.
    pub n_samples: usize,
    /// Synthetic only; defaults to the model's input size.
    pub n_features: Option<usize>,
    /// Synthetic only; defaults to the model's output size.
    pub n_classes: Option<usize>,
    /// Distance of class centers from the origin, default 3.
    pub spread: f64,
    /// Required for `csv`.
    pub path: Option<PathBuf>,
    /// `partition` (default) or `independent`.
    pub sampling: Sampling,
    /// Default false.
    pub replacement: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: SourceKind::Synthetic,
            n_samples: 5000,
            n_features: None,
            n_classes: None,
            spread: 3.0,
            path: None,
            sampling: Sampling::Partition,
            replacement: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Inprocess,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    /// `inprocess` (default) or `tcp`.
    pub backend: Backend,
    /// One `host:port` per rank, workers first then communicators; tcp only.
    pub endpoints: Vec<String>,
    /// Default 30.
    pub timeout_s: f64,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            backend: Backend::Inprocess,
            endpoints: Vec::new(),
            timeout_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelaySection {
    pub io_delay_ms: f64,
    pub global_link_delay_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Defaults to sequential, CSGD with `n_workers`, and LSGD with
    /// `n_workers` and `n_groups`.
    #[serde(default)]
    pub runs: Vec<VerifyRun>,
    /// Default 1e-8.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRun {
    pub algorithm: Algorithm,
    pub n_workers: usize,
    #[serde(default = "one")]
    pub n_groups: usize,
}

fn one() -> usize {
    1
}

fn default_local_batch() -> usize {
    64
}

fn default_init_scale() -> f64 {
    0.1
}

fn default_tolerance() -> f64 {
    1e-8
}

pub const DEFAULT_ITERATIONS: usize = 100;

impl RunConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let parent = e.path().to_string();
            let msg = e.into_inner().to_string();
            Error::config(key_path(&parent, &msg), msg)
        })
    }

    /// `hex(sha256(canonical config))`, truncated, then the seed. Identical
    /// configs give identical ids regardless of key order or whitespace.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("{hex}-{}", self.seed)
    }

    pub fn timeout(&self) -> Result<Duration> {
        let t = self.transport.timeout_s;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::config("transport.timeout_s", "must be positive"));
        }
        Ok(Duration::from_secs_f64(t))
    }

    pub fn endpoints(&self) -> Result<Vec<SocketAddr>> {
        self.transport
            .endpoints
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse().map_err(|_| {
                    Error::config(
                        format!("transport.endpoints[{i}]"),
                        format!("not a socket address: {s:?}"),
                    )
                })
            })
            .collect()
    }

    /// Resolves defaults, loads the dataset and returns the executor config.
    pub fn build(&self) -> Result<(TrainConfig, Dataset)> {
        let topology = Topology::new(self.n_workers, self.n_groups)?;
        let model = MlpModel::new(self.model.layer_sizes.clone())
            .map_err(|e| Error::config("model.layer_sizes", strip_prefix(&e)))?;
        let data = match self.data.source {
            SourceKind::Synthetic => {
                if self.data.path.is_some() {
                    return Err(Error::config("data.path", "only used with source \"csv\""));
                }
                DataSource::Synthetic {
                    n_samples: self.data.n_samples,
                    n_features: self.data.n_features.unwrap_or(model.input_dim()),
                    n_classes: self.data.n_classes.unwrap_or(model.n_classes()),
                    spread: self.data.spread,
                }
            }
            SourceKind::Csv => match &self.data.path {
                Some(p) => DataSource::Csv(p.clone()),
                None => return Err(Error::config("data.path", "required when source is \"csv\"")),
            },
        };
        let delay = |key: &str, ms: f64| {
            if ms >= 0.0 && ms.is_finite() {
                Ok(Duration::from_secs_f64(ms / 1000.0))
            } else {
                Err(Error::config(format!("delays.{key}"), "must be nonnegative"))
            }
        };

        let mut cfg = TrainConfig::new(self.algorithm, topology, model, data);
        cfg.init_scale = self.model.init_scale;
        cfg.sampling = self.data.sampling;
        cfg.replacement = self.data.replacement;
        cfg.hyper = self.optim.clone();
        cfg.local_batch = self.local_batch;
        cfg.seed = self.seed;
        cfg.io_delay = delay("io_delay_ms", self.delays.io_delay_ms)?;
        cfg.global_link_delay = delay("global_link_delay_ms", self.delays.global_link_delay_ms)?;
        cfg.timeout = self.timeout()?;

        let dataset = cfg.load_dataset().map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::config("data", msg),
            other => other,
        })?;
        cfg.iterations = match (self.iterations, self.epochs) {
            (Some(t), _) => t,
            (None, Some(e)) => e as usize * (dataset.len() / cfg.global_batch().max(1)),
            (None, None) => DEFAULT_ITERATIONS,
        };
        cfg.validate(&dataset)?;
        Ok((cfg, dataset))
    }

    /// One executor config per verification run. Each run keeps the global
    /// batch of the top-level config, so `local_batch * n_workers` must be
    /// divisible by every run's worker count.
    pub fn verify_configs(&self) -> Result<(Vec<TrainConfig>, f64)> {
        let section = self.verify.clone().unwrap_or(VerifySection {
            runs: Vec::new(),
            tolerance: default_tolerance(),
        });
        if !(section.tolerance >= 0.0) {
            return Err(Error::config("verify.tolerance", "must be nonnegative"));
        }
        let runs = if section.runs.is_empty() {
            vec![
                VerifyRun {
                    algorithm: Algorithm::Sequential,
                    n_workers: 1,
                    n_groups: 1,
                },
                VerifyRun {
                    algorithm: Algorithm::Csgd,
                    n_workers: self.n_workers,
                    n_groups: 1,
                },
                VerifyRun {
                    algorithm: Algorithm::Lsgd,
                    n_workers: self.n_workers,
                    n_groups: self.n_groups,
                },
            ]
        } else {
            section.runs
        };
        let global = self.local_batch * self.n_workers;
        let mut configs = Vec::with_capacity(runs.len());
        for (i, run) in runs.iter().enumerate() {
            if run.n_workers == 0 || !global.is_multiple_of(run.n_workers) {
                return Err(Error::config(
                    format!("verify.runs[{i}].n_workers"),
                    format!("must divide the global batch {global}"),
                ));
            }
            let mut file = self.clone();
            file.algorithm = run.algorithm;
            file.n_workers = run.n_workers;
            file.n_groups = run.n_groups;
            file.local_batch = global / run.n_workers;
            let (cfg, _) = file.build().map_err(|e| match e {
                Error::Config { path, msg } => Error::config(format!("verify.runs[{i}] {path}"), msg),
                other => other,
            })?;
            configs.push(cfg);
        }
        Ok((configs, section.tolerance))
    }
}

/// Serde reports a missing field at its parent; append the field name.
fn key_path(parent: &str, msg: &str) -> String {
    let parent = if parent == "." { "" } else { parent };
    let missing = msg
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match missing {
        Some(field) if parent.is_empty() => field.to_string(),
        Some(field) => format!("{parent}.{field}"),
        None if parent.is_empty() => "<root>".to_string(),
        None => parent.to_string(),
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::InvalidArgument(msg) => msg.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"algorithm": "csgd", "n_workers": 2, "model": {"layer_sizes": [4, 8, 3]}}"#;

    fn config_path(text: &str) -> String {
        match RunConfigFile::parse(text).unwrap_err() {
            Error::Config { path, .. } => path,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn defaults_resolve() {
        let f = RunConfigFile::parse(MINIMAL).unwrap();
        assert_eq!(f.n_groups, 1);
        assert_eq!(f.local_batch, 64);
        let (cfg, data) = f.build().unwrap();
        assert_eq!(cfg.iterations, DEFAULT_ITERATIONS);
        assert_eq!(data.len(), 5000);
        assert_eq!(data.n_features(), 4);
        assert_eq!(data.n_classes(), 3);
        assert_eq!(cfg.hyper, HyperParams::default());
    }

    #[test]
    fn epochs_give_whole_passes() {
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.epochs = Some(3);
        assert_eq!(f.build().unwrap().0.iterations, 3 * (5000 / 128));
        f.iterations = Some(7);
        assert_eq!(f.build().unwrap().0.iterations, 7);
    }

    #[test]
    fn key_paths_in_errors() {
        assert_eq!(
            config_path(r#"{"algorithm": "csgd", "n_workers": 2, "model": {}}"#),
            "model.layer_sizes"
        );
        assert_eq!(
            config_path(r#"{"n_workers": 2, "model": {"layer_sizes": [1, 2]}}"#),
            "algorithm"
        );
        assert_eq!(
            config_path(
                r#"{"algorithm": "csgd", "n_workers": 2, "model": {"layer_sizes": [1, 2]}, "optim": {"lr": 1}}"#
            ),
            "optim.lr"
        );
        assert_eq!(
            config_path(
                r#"{"algorithm": "csgd", "n_workers": 2, "model": {"layer_sizes": [1, 2]}, "delays": {"io_delay_ms": "x"}}"#
            ),
            "delays.io_delay_ms"
        );
        assert_eq!(
            config_path(r#"{"algorithm": "csgd", "n_workers": 2, "model": {"layer_sizes": [1, 2]}, "extra": 1}"#),
            "extra"
        );
        assert_eq!(config_path("17"), "<root>");
    }

    #[test]
    fn semantic_errors_name_keys() {
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.n_groups = 3;
        assert!(f.build().unwrap_err().to_string().starts_with("n_groups"));
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.data.source = SourceKind::Csv;
        assert!(f.build().unwrap_err().to_string().starts_with("data.path"));
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.delays.io_delay_ms = -1.0;
        assert!(f.build().unwrap_err().to_string().starts_with("delays.io_delay_ms"));
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.transport.endpoints = vec!["nope".into()];
        assert!(f
            .endpoints()
            .unwrap_err()
            .to_string()
            .starts_with("transport.endpoints[0]"));
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.model.layer_sizes = vec![4];
        assert!(f.build().unwrap_err().to_string().starts_with("model.layer_sizes"));
    }

    #[test]
    fn run_id_ignores_formatting_but_not_content() {
        let a = RunConfigFile::parse(MINIMAL).unwrap();
        let b = RunConfigFile::parse(&format!("\n  {}  \n", MINIMAL.replace(", ", ",\n"))).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.run_id(), c.run_id());
        assert!(c.run_id().ends_with("-1"));
    }

    #[test]
    fn verify_defaults_keep_global_batch() {
        let mut f = RunConfigFile::parse(MINIMAL).unwrap();
        f.n_workers = 4;
        f.n_groups = 2;
        f.local_batch = 16;
        let (cfgs, tol) = f.verify_configs().unwrap();
        assert_eq!(tol, 1e-8);
        let shapes: Vec<_> = cfgs
            .iter()
            .map(|c| {
                (
                    c.algorithm,
                    c.topology.n_workers(),
                    c.topology.n_groups(),
                    c.global_batch(),
                )
            })
            .collect();
        assert_eq!(
            shapes,
            vec![
                (Algorithm::Sequential, 1, 1, 64),
                (Algorithm::Csgd, 4, 1, 64),
                (Algorithm::Lsgd, 4, 2, 64)
            ]
        );
        f.verify = Some(VerifySection {
            runs: vec![VerifyRun {
                algorithm: Algorithm::Csgd,
                n_workers: 3,
                n_groups: 1,
            }],
            tolerance: 0.0,
        });
        assert!(f
            .verify_configs()
            .unwrap_err()
            .to_string()
            .starts_with("verify.runs[0].n_workers"));
    }
}
