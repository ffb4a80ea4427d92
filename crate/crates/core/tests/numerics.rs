use lsgd_core::data::{partition_minibatch, Batch, Dataset, Minibatch};
use lsgd_core::numerics::{finite_diff_gradient, gradient, loss, MlpModel, Rng};
use proptest::prelude::*;

/// Random parameters with fan-in scaled weights and small nonzero biases, so
/// no ReLU sits exactly on its kink.
fn random_params(sizes: &[usize], rng: &mut Rng) -> Vec<f64> {
    let mut w = Vec::new();
    for p in sizes.windows(2) {
        let sd = (2.0 / p[0] as f64).sqrt();
        w.extend((0..p[0] * p[1]).map(|_| sd * rng.normal()));
        w.extend((0..p[1]).map(|_| 0.1 * rng.normal()));
    }
    w
}

fn random_data(n: usize, features: usize, classes: usize, rng: &mut Rng) -> Dataset {
    let x = (0..n * features).map(|_| rng.normal()).collect();
    let y = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
    Dataset::new(x, y, features, classes).unwrap()
}

#[test]
fn loss_matches_scalar_forward_pass() {
    // [2, 3, 2]: W1 (3x2), b1 (3), W2 (2x3), b2 (2), row-major.
    let w: [f64; 17] = [
        0.5, -0.25, 1.0, 0.75, -1.5, 0.2, //
        0.1, -0.2, 0.3, //
        0.4, -0.6, 0.9, -0.3, 0.8, 0.05, //
        0.01, -0.02,
    ];
    let x = [[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]];
    let y = [0usize, 1, 1];
    let mut total = 0.0;
    for (xi, &yi) in x.iter().zip(&y) {
        let mut h = [0.0; 3];
        for j in 0..3 {
            let z = w[2 * j] * xi[0] + w[2 * j + 1] * xi[1] + w[6 + j];
            h[j] = if z > 0.0 { z } else { 0.0 };
        }
        let mut logits = [0.0f64; 2];
        for c in 0..2 {
            logits[c] = w[9 + 3 * c] * h[0] + w[9 + 3 * c + 1] * h[1] + w[9 + 3 * c + 2] * h[2] + w[15 + c];
        }
        let lse = (logits[0].exp() + logits[1].exp()).ln();
        total += lse - logits[yi];
    }
    let expected = total / 3.0;

    let model = MlpModel::new(vec![2, 3, 2]).unwrap();
    let data = Dataset::new(x.concat(), y.to_vec(), 2, 2).unwrap();
    let idx = data.all_indices();
    let got = loss(&model, &w, &Batch::new(&data, &idx)).unwrap();
    assert!((got - expected).abs() <= 1e-14, "{got} vs {expected}");
}

#[test]
fn small_model_agrees_with_finite_differences() {
    let mut rng = Rng::new(1);
    let model = MlpModel::new(vec![4, 2, 2]).unwrap();
    let w = random_params(model.layer_sizes(), &mut rng);
    let data = random_data(3, 4, 2, &mut rng);
    let idx = data.all_indices();
    let b = Batch::new(&data, &idx);
    let g = gradient(&model, &w, &b).unwrap();
    let f = finite_diff_gradient(&model, &w, &b, 1e-6).unwrap();
    for (a, d) in g.iter().zip(f.iter()) {
        assert!((a - d).abs() / a.abs().max(d.abs()).max(1e-8) <= 1e-5, "{a:e} vs {d:e}");
    }
}

#[test]
fn central_difference_error_is_second_order() {
    let mut rng = Rng::new(5);
    let model = MlpModel::new(vec![3, 4, 3]).unwrap();
    let w = random_params(model.layer_sizes(), &mut rng);
    let data = random_data(4, 3, 3, &mut rng);
    let idx = data.all_indices();
    let b = Batch::new(&data, &idx);
    let g = gradient(&model, &w, &b).unwrap();
    let err = |h: f64| {
        let f = finite_diff_gradient(&model, &w, &b, h).unwrap();
        g.iter().zip(f.iter()).map(|(a, d)| (a - d).abs()).fold(0.0, f64::max)
    };
    let (coarse, fine) = (err(2e-2), err(1e-2));
    assert!(fine < coarse);
    assert!(fine < 0.35 * coarse, "{coarse:e} -> {fine:e}");
}

#[test]
fn batch_gradient_is_mean_of_equal_shard_gradients() {
    let mut rng = Rng::new(8);
    let model = MlpModel::new(vec![5, 6, 3]).unwrap();
    let w = random_params(model.layer_sizes(), &mut rng);
    let data = random_data(24, 5, 3, &mut rng);
    let m = Minibatch {
        indices: data.all_indices(),
    };
    let whole = gradient(&model, &w, &Batch::new(&data, &m.indices)).unwrap();
    for n in [2, 3, 4, 6] {
        let shards = partition_minibatch(&m, n).unwrap();
        let mut mean = vec![0.0; whole.len()];
        for s in &shards {
            let g = gradient(&model, &w, &Batch::new(&data, &s.indices)).unwrap();
            for (acc, v) in mean.iter_mut().zip(g.iter()) {
                *acc += v / n as f64;
            }
        }
        let worst = mean
            .iter()
            .zip(whole.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{n} shards: {worst:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Backprop against central differences, allowing for the f64 rounding
    /// floor of the difference quotient (about eps * loss / h).
    #[test]
    fn backprop_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let hidden = 1 + rng.below(2) as usize;
        let mut sizes: Vec<usize> = (0..=hidden).map(|_| 2 + rng.below(5) as usize).collect();
        let classes = 2 + rng.below(3) as usize;
        sizes.push(classes);
        let model = MlpModel::new(sizes.clone()).unwrap();
        let w = random_params(&sizes, &mut rng);
        let data = random_data(1 + rng.below(5) as usize, sizes[0], classes, &mut rng);
        let idx = data.all_indices();
        let b = Batch::new(&data, &idx);
        let h = 1e-6;
        let l = loss(&model, &w, &b).unwrap();
        let floor = 64.0 * f64::EPSILON * l.max(1.0) / h;
        let g = gradient(&model, &w, &b).unwrap();
        let f = finite_diff_gradient(&model, &w, &b, h).unwrap();
        for (a, d) in g.iter().zip(f.iter()) {
            prop_assert!((a - d).abs() <= 1e-5 * a.abs().max(d.abs()) + floor, "{:e} vs {:e}", a, d);
        }
    }
}
