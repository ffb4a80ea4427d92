//! Datasets, deterministic minibatch sampling and equal-cardinality sharding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::numerics::Rng;
use crate::{Error, Result};

/// Row-major `|X| x d` feature matrix with integer labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, n_features: usize, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * n_features,
                got: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// A borrowed view of some samples of a dataset, in a fixed order.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    dataset: &'a Dataset,
    indices: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(dataset: &'a Dataset, indices: &'a [usize]) -> Self {
        Batch { dataset, indices }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn indices(&self) -> &'a [usize] {
        self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gaussian blobs: class centers on the unit sphere scaled by `spread`,
/// points are center plus unit-variance noise. Sample `i` has label `i % C`.
pub fn generate_synthetic(
    seed: u64,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if n_classes < 2 || n_samples < n_classes {
        return Err(Error::InvalidArgument(format!(
            "need n_samples >= n_classes >= 2, got {n_samples} samples and {n_classes} classes"
        )));
    }
    if n_features == 0 {
        return Err(Error::InvalidArgument("n_features must be at least 1".into()));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(format!("spread must be positive, got {spread}")));
    }
    let mut rng = Rng::new(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..n_features).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| spread * x / norm).collect();
            }
        })
        .collect();
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = i % n_classes;
        features.extend(centers[c].iter().map(|m| m + rng.normal()));
        labels.push(c);
    }
    Dataset::new(features, labels, n_features, n_classes)
}

/// An ordered set of sample indices (`M`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
}

/// Worker `owner`'s slice of a minibatch (`M^i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

/// Epoch-wise sampler over a seeded Fisher-Yates permutation.
///
/// Without replacement (the default), each epoch is a fresh permutation drawn
/// from the sampler's generator and minibatches are consecutive slices of it.
/// If fewer than `size` samples remain, the tail is dropped and a new epoch
/// begins. With replacement, every index is drawn independently.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    rng: Rng,
    n_samples: usize,
    replacement: bool,
    perm: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl EpochSampler {
    pub fn new(rng: Rng, n_samples: usize) -> Self {
        EpochSampler {
            rng,
            n_samples,
            replacement: false,
            perm: Vec::new(),
            cursor: 0,
            epoch: 0,
        }
    }

    pub fn with_replacement(mut self, replacement: bool) -> Self {
        self.replacement = replacement;
        self
    }

    /// Number of epochs started so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn draw(&mut self, size: usize) -> Result<Minibatch> {
        if size == 0 || size > self.n_samples {
            return Err(Error::InvalidArgument(format!(
                "minibatch size {size} must be in 1..={}",
                self.n_samples
            )));
        }
        if self.replacement {
            let n = self.n_samples as u64;
            let indices = (0..size).map(|_| self.rng.below(n) as usize).collect();
            return Ok(Minibatch { indices });
        }
        if self.perm.is_empty() || self.cursor + size > self.n_samples {
            self.perm = (0..self.n_samples).collect();
            self.rng.shuffle(&mut self.perm);
            self.cursor = 0;
            self.epoch += 1;
        }
        let indices = self.perm[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        Ok(Minibatch { indices })
    }
}

/// Contiguous equal slices: shard `i` holds positions `[i|M|/N, (i+1)|M|/N)`.
pub fn partition_minibatch(m: &Minibatch, n_workers: usize) -> Result<Vec<Shard>> {
    if n_workers == 0 || !m.indices.len().is_multiple_of(n_workers) {
        return Err(Error::InvalidArgument(format!(
            "minibatch of {} cannot be split evenly across {n_workers} workers",
            m.indices.len()
        )));
    }
    let per = m.indices.len() / n_workers;
    Ok(m.indices
        .chunks(per.max(1))
        .take(n_workers)
        .enumerate()
        .map(|(owner, c)| Shard {
            owner,
            indices: c.to_vec(),
        })
        .collect())
}

/// Reads rows `f_1,...,f_d,label`. The class count is `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(labels.len() as u64 + 1, |p| p.line());
        if record.len() < 2 {
            return Err(parse_err(line, "expected at least one feature and a label".into()));
        }
        let d = record.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(parse_err(
                line,
                format!("expected {} features, found {d}", width.unwrap()),
            ));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {field:?}")));
            }
            features.push(v);
        }
        let label = &record[d];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("invalid label {label:?}")))?,
        );
    }
    let Some(d) = width else {
        return Err(parse_err(0, "file contains no samples".into()));
    };
    let n_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(features, labels, d, n_classes)
}

/// Writes the `load_csv` format. Floats use shortest round-trip formatting.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..dataset.len() {
        for v in dataset.features(i) {
            write!(out, "{v:?},")?;
        }
        writeln!(out, "{}", dataset.label(i))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = generate_synthetic(3, 100, 4, 2, 2.0).unwrap();
        let zeros = a.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(zeros, 50);
        let b = generate_synthetic(3, 100, 4, 2, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic(3, 1, 4, 2, 2.0).is_err());
        assert!(generate_synthetic(3, 10, 0, 2, 2.0).is_err());
        assert!(generate_synthetic(3, 10, 2, 2, 0.0).is_err());
    }

    #[test]
    fn full_size_draw_is_permutation() {
        let mut s = EpochSampler::new(Rng::new(1), 10);
        let mut m = s.draw(10).unwrap().indices;
        m.sort();
        assert_eq!(m, (0..10).collect::<Vec<_>>());
        assert!(s.draw(11).is_err());
    }

    #[test]
    fn draws_within_epoch_are_disjoint() {
        let mut s = EpochSampler::new(Rng::new(9), 12);
        let a: HashSet<_> = s.draw(4).unwrap().indices.into_iter().collect();
        let b: HashSet<_> = s.draw(4).unwrap().indices.into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn first_minibatch_matches_fisher_yates_oracle() {
        let mut s = EpochSampler::new(Rng::new(42), 8);
        assert_eq!(s.draw(4).unwrap().indices, vec![4, 3, 2, 0]);
        assert_eq!(s.draw(4).unwrap().indices, vec![7, 6, 1, 5]);
    }

    #[test]
    fn tail_is_dropped_and_new_epoch_starts() {
        let mut s = EpochSampler::new(Rng::new(5), 10);
        s.draw(4).unwrap();
        s.draw(4).unwrap();
        s.draw(4).unwrap();
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn with_replacement_stays_in_bounds() {
        let mut s = EpochSampler::new(Rng::new(5), 3).with_replacement(true);
        let m = s.draw(3).unwrap();
        assert!(m.indices.iter().all(|&i| i < 3));
    }

    #[test]
    fn partition_examples() {
        let m = Minibatch {
            indices: (0..8).collect(),
        };
        let shards = partition_minibatch(&m, 4).unwrap();
        let got: Vec<Vec<usize>> = shards.iter().map(|s| s.indices.clone()).collect();
        assert_eq!(got, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        assert_eq!(shards[3].owner, 3);
        assert_eq!(partition_minibatch(&m, 1).unwrap()[0].indices, m.indices);
        let six = Minibatch {
            indices: (0..6).collect(),
        };
        assert!(partition_minibatch(&six, 4).is_err());
        assert!(partition_minibatch(&six, 0).is_err());
    }

    #[test]
    fn csv_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!((ds.len(), ds.n_features(), ds.n_classes()), (2, 2, 2));
        assert_eq!(ds.features(1), &[3.0, 4.0]);

        std::fs::write(&p, "1.0,abc,0\n").unwrap();
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        std::fs::write(&p, "1.0,2.0,0\n1.0,1\n").unwrap();
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        std::fs::write(&p, "").unwrap();
        assert!(load_csv(&p).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.csv");
        let ds = generate_synthetic(17, 60, 3, 3, 4.0).unwrap();
        save_csv(&ds, &p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), ds);
    }
}
