use serde::{Deserialize, Serialize};

use super::{ParamVector, Rng};
use crate::data::Batch;
use crate::par::{self, ExecMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Fully connected network with ReLU hidden layers and a softmax
/// cross-entropy head.
///
/// Parameter layout, layer by layer: the `out x in` weight matrix in row-major
/// order (row = output unit), followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

// Samples per parallel window; per-sample gradients of one window are
// materialized, then folded in order.
const WINDOW: usize = 256;

impl MlpModel {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_sizes needs at least an input and an output size".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        Ok(MlpModel {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|p| {
                let l = Layer {
                    fan_in: p[0],
                    fan_out: p[1],
                    weights: offset,
                    biases: offset + p[0] * p[1],
                };
                offset += p[0] * p[1] + p[1];
                l
            })
            .collect()
    }

    /// Weights uniform in `[-scale, scale]`, drawn in layout order; biases zero.
    pub fn init_params(&self, rng: &mut Rng, scale: f64) -> ParamVector {
        let mut w = ParamVector::zeros(self.n_params());
        for l in self.layers() {
            for v in &mut w[l.weights..l.biases] {
                *v = scale * (2.0 * rng.next_f64() - 1.0);
            }
        }
        w
    }

    fn check(&self, w: &[f64], batch: &Batch<'_>) -> Result<()> {
        if w.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: w.len(),
            });
        }
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let ds = batch.dataset();
        if ds.n_features() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: ds.n_features(),
            });
        }
        for &i in batch.indices() {
            if i >= ds.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    ds.len()
                )));
            }
            if ds.label(i) >= self.n_classes() {
                return Err(Error::InvalidArgument(format!(
                    "label {} of sample {i} exceeds class count {}",
                    ds.label(i),
                    self.n_classes()
                )));
            }
        }
        Ok(())
    }

    /// Returns the activations of every layer; the last entry holds logits.
    fn forward(&self, layers: &[Layer], w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (k, l) in layers.iter().enumerate() {
            let input = &acts[k];
            let mut z: Vec<f64> = (0..l.fan_out)
                .map(|j| {
                    let row = &w[l.weights + j * l.fan_in..l.weights + (j + 1) * l.fan_in];
                    let dot: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
                    dot + w[l.biases + j]
                })
                .collect();
            if k + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    fn sample_loss(&self, layers: &[Layer], w: &[f64], x: &[f64], label: usize) -> f64 {
        let acts = self.forward(layers, w, x);
        let logits = acts.last().unwrap();
        log_sum_exp(logits) - logits[label]
    }

    /// Per-sample loss and full gradient via backpropagation.
    fn sample_gradient(&self, layers: &[Layer], w: &[f64], x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let acts = self.forward(layers, w, x);
        let logits = acts.last().unwrap();
        let lse = log_sum_exp(logits);
        let loss = lse - logits[label];

        let mut grad = vec![0.0; w.len()];
        // d loss / d logits = softmax - onehot
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
        delta[label] -= 1.0;

        for (k, l) in layers.iter().enumerate().rev() {
            let input = &acts[k];
            for j in 0..l.fan_out {
                let row = &mut grad[l.weights + j * l.fan_in..l.weights + (j + 1) * l.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g = delta[j] * a;
                }
                grad[l.biases + j] = delta[j];
            }
            if k > 0 {
                delta = (0..l.fan_in)
                    .map(|i| {
                        if input[i] > 0.0 {
                            (0..l.fan_out).map(|j| w[l.weights + j * l.fan_in + i] * delta[j]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        (loss, grad)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(model: &MlpModel, w: &[f64], batch: &Batch<'_>) -> Result<f64> {
    loss_with(ExecMode::default(), model, w, batch)
}

pub fn loss_with(mode: ExecMode, model: &MlpModel, w: &[f64], batch: &Batch<'_>) -> Result<f64> {
    model.check(w, batch)?;
    let layers = model.layers();
    let ds = batch.dataset();
    let per_sample = par::map_slice(mode, batch.indices(), |&i| {
        model.sample_loss(&layers, w, ds.features(i), ds.label(i))
    });
    let total = per_sample.iter().fold(0.0, |acc, l| acc + l);
    Ok(total / batch.len() as f64)
}

/// `(1/|batch|) * sum_x d l(w, x) / dw`.
pub fn gradient(model: &MlpModel, w: &[f64], batch: &Batch<'_>) -> Result<ParamVector> {
    gradient_with(ExecMode::default(), model, w, batch).map(|(_, g)| g)
}

/// Mean loss and mean gradient from a single pass.
pub fn loss_and_gradient(model: &MlpModel, w: &[f64], batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    gradient_with(ExecMode::default(), model, w, batch)
}

/// Per-sample terms are accumulated strictly in batch order, so the result is
/// bitwise identical for every [`ExecMode`].
pub fn gradient_with(mode: ExecMode, model: &MlpModel, w: &[f64], batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    model.check(w, batch)?;
    let layers = model.layers();
    let ds = batch.dataset();
    let mut loss_sum: Option<f64> = None;
    let mut grad_sum: Option<ParamVector> = None;
    for window in batch.indices().chunks(WINDOW) {
        let terms = par::map_slice(mode, window, |&i| {
            model.sample_gradient(&layers, w, ds.features(i), ds.label(i))
        });
        for (l, g) in terms {
            loss_sum = Some(loss_sum.map_or(l, |acc| acc + l));
            match grad_sum.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grad_sum = Some(ParamVector::from(g)),
            }
        }
    }
    let n = batch.len() as f64;
    let mut grad = grad_sum.expect("batch checked nonempty");
    grad.div_scalar(n);
    Ok((loss_sum.unwrap() / n, grad))
}

/// Central differences `(l(w + h e_k) - l(w - h e_k)) / 2h` per coordinate.
pub fn finite_diff_gradient(model: &MlpModel, w: &[f64], batch: &Batch<'_>, h: f64) -> Result<ParamVector> {
    finite_diff_gradient_with(ExecMode::default(), model, w, batch, h)
}

pub fn finite_diff_gradient_with(
    mode: ExecMode,
    model: &MlpModel,
    w: &[f64],
    batch: &Batch<'_>,
    h: f64,
) -> Result<ParamVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    model.check(w, batch)?;
    let coords = par::map_indexed(mode, w.len(), |k| {
        let mut probe = w.to_vec();
        probe[k] = w[k] + h;
        let up = loss_with(ExecMode::Sequential, model, &probe, batch);
        probe[k] = w[k] - h;
        let down = loss_with(ExecMode::Sequential, model, &probe, batch);
        Ok::<_, Error>((up? - down?) / (2.0 * h))
    });
    coords.into_iter().collect::<Result<Vec<_>>>().map(ParamVector::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn tiny_data() -> Dataset {
        Dataset::new(vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0], vec![0, 1, 1], 2, 2).unwrap()
    }

    #[test]
    fn n_params_follows_layout_formula() {
        assert_eq!(MlpModel::new(vec![4, 3, 2]).unwrap().n_params(), 23);
        assert_eq!(
            MlpModel::new(vec![32, 16, 10]).unwrap().n_params(),
            32 * 16 + 16 + 16 * 10 + 10
        );
        assert!(MlpModel::new(vec![4]).is_err());
        assert!(MlpModel::new(vec![4, 0, 2]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_respects_scale() {
        let m = MlpModel::new(vec![4, 3, 2]).unwrap();
        let zero = m.init_params(&mut Rng::new(1), 0.0);
        assert!(zero.iter().all(|v| *v == 0.0));
        let a = m.init_params(&mut Rng::new(5), 0.3);
        let b = m.init_params(&mut Rng::new(5), 0.3);
        assert!(a.bitwise_eq(&b));
        assert!(a.iter().all(|v| v.abs() <= 0.3));
        // biases of the first layer sit right after its 4x3 weights
        assert!(a[12..15].iter().all(|v| *v == 0.0));
        assert!(a[21..23].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_give_uniform_softmax_loss() {
        let ds = tiny_data();
        let idx = [0, 1, 2];
        let m = MlpModel::new(vec![2, 2]).unwrap();
        let l = loss(&m, &vec![0.0; m.n_params()], &Batch::new(&ds, &idx)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let ds10 = Dataset::new(vec![0.5, -1.0], vec![7], 2, 10).unwrap();
        let m10 = MlpModel::new(vec![2, 5, 10]).unwrap();
        let l = loss(&m10, &vec![0.0; m10.n_params()], &Batch::new(&ds10, &[0])).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_gradient_for_linear_head_at_zero() {
        let ds = Dataset::new(vec![1.0, 2.0], vec![0], 2, 2).unwrap();
        let m = MlpModel::new(vec![2, 2]).unwrap();
        let g = gradient(&m, &[0.0; 6], &Batch::new(&ds, &[0])).unwrap();
        let expected = [-0.5, -1.0, 0.5, 1.0, -0.5, 0.5];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn duplicated_sample_has_same_gradient() {
        let ds = tiny_data();
        let m = MlpModel::new(vec![2, 3, 2]).unwrap();
        let w = m.init_params(&mut Rng::new(11), 0.5);
        let one = gradient(&m, &w, &Batch::new(&ds, &[1])).unwrap();
        let two = gradient(&m, &w, &Batch::new(&ds, &[1, 1])).unwrap();
        for (a, b) in one.iter().zip(two.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let ds = tiny_data();
        let m = MlpModel::new(vec![3, 2]).unwrap();
        let w = vec![0.0; m.n_params()];
        assert!(matches!(
            loss(&m, &w, &Batch::new(&ds, &[0])),
            Err(Error::DimensionMismatch { .. })
        ));
        let m = MlpModel::new(vec![2, 2]).unwrap();
        let w = vec![0.0; m.n_params()];
        assert!(matches!(loss(&m, &w, &Batch::new(&ds, &[])), Err(Error::EmptyBatch)));
        assert!(gradient(&m, &w[..3], &Batch::new(&ds, &[0])).is_err());
        assert!(finite_diff_gradient(&m, &w, &Batch::new(&ds, &[0]), 0.0).is_err());
    }

    #[test]
    fn exec_modes_are_bitwise_identical() {
        let ds = tiny_data();
        let m = MlpModel::new(vec![2, 4, 2]).unwrap();
        let w = m.init_params(&mut Rng::new(2), 0.7);
        let idx: Vec<usize> = (0..600).map(|i| i % 3).collect();
        let b = Batch::new(&ds, &idx);
        let (ls, gs) = gradient_with(ExecMode::Sequential, &m, &w, &b).unwrap();
        let (lp, gp) = gradient_with(ExecMode::Parallel, &m, &w, &b).unwrap();
        assert_eq!(ls.to_bits(), lp.to_bits());
        assert!(gs.bitwise_eq(&gp));
        let l2 = loss_with(ExecMode::Sequential, &m, &w, &b).unwrap();
        assert_eq!(l2.to_bits(), ls.to_bits());
    }

    #[test]
    fn constant_loss_has_zero_finite_difference() {
        // zero inputs and zero weights: only biases matter, and at zero
        // biases the loss is flat to first order only along differences of
        // bias pairs; use a batch with both labels so the bias gradient cancels.
        let ds = Dataset::new(vec![0.0, 0.0, 0.0, 0.0], vec![0, 1], 2, 2).unwrap();
        let m = MlpModel::new(vec![2, 2]).unwrap();
        let fd = finite_diff_gradient(&m, &[0.0; 6], &Batch::new(&ds, &[0, 1]), 1e-6).unwrap();
        assert!(fd.iter().all(|v| v.abs() < 1e-9));
    }
}
