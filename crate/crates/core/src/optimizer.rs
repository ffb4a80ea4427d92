//! Parameter update rules and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::numerics::ParamVector;
use crate::{Error, Result};

/// Global batch size at which `base_lr` applies (one node of four workers at 64 each).
pub const BASE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// `w <- w - lr * delta`
    #[default]
    Plain,
    /// Heavy-ball momentum with weight decay folded into the gradient.
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub mode: UpdateMode,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// 0 disables step decay.
    pub decay_every_epochs: u32,
    pub decay_factor: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            mode: UpdateMode::Plain,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 5.0,
            decay_every_epochs: 30,
            decay_factor: 0.1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("optim.{key}"), msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("must be nonnegative, got {}", self.weight_decay),
            );
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return bad(
                "warmup_epochs",
                format!("must be nonnegative, got {}", self.warmup_epochs),
            );
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor", format!("must be in (0, 1], got {}", self.decay_factor));
        }
        Ok(())
    }
}

/// Learning rate at fractional epoch `epoch`.
///
/// The target rate scales linearly with the global batch,
/// `base_lr * (n_workers * local_batch) / 256`. During warmup it is
/// interpolated linearly from `base_lr` to the target; afterwards the target
/// is multiplied by `decay_factor` once per completed `decay_every_epochs`.
pub fn learning_rate(hp: &HyperParams, n_workers: usize, local_batch: usize, epoch: f64) -> f64 {
    let global = (n_workers * local_batch) as f64;
    let target = hp.base_lr * (global / BASE_BATCH as f64);
    if hp.warmup_epochs > 0.0 && epoch < hp.warmup_epochs {
        return hp.base_lr + (target - hp.base_lr) * (epoch / hp.warmup_epochs);
    }
    if hp.decay_every_epochs == 0 {
        return target;
    }
    let steps = (epoch / hp.decay_every_epochs as f64).floor();
    target * hp.decay_factor.powi(steps as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamVector,
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            velocity: ParamVector::zeros(n_params),
            iteration: 0,
        }
    }
}

/// Applies one update to `w` in place and advances `state.iteration`.
pub fn sgd_update(w: &mut [f64], delta: &[f64], state: &mut OptimizerState, hp: &HyperParams, lr: f64) -> Result<()> {
    if w.len() != delta.len() || w.len() != state.velocity.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: if w.len() != delta.len() {
                delta.len()
            } else {
                state.velocity.len()
            },
        });
    }
    match hp.mode {
        UpdateMode::Plain => {
            for (wk, dk) in w.iter_mut().zip(delta) {
                *wk -= lr * dk;
            }
        }
        UpdateMode::Momentum => {
            for ((wk, dk), vk) in w.iter_mut().zip(delta).zip(state.velocity.iter_mut()) {
                let g = dk + hp.weight_decay * *wk;
                *vk = hp.momentum * *vk + g;
                *wk -= lr * *vk;
            }
        }
    }
    state.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn linear_scaling_targets() {
        let hp = HyperParams::default();
        assert!(close(learning_rate(&hp, 4, 64, 10.0), 0.1));
        assert!(close(learning_rate(&hp, 256, 64, 10.0), 6.4));
    }

    #[test]
    fn warmup_midpoint_and_decay() {
        let hp = HyperParams::default();
        assert!(close(learning_rate(&hp, 256, 64, 2.5), 3.25));
        assert!(close(learning_rate(&hp, 256, 64, 0.0), 0.1));
        assert!(close(learning_rate(&hp, 4, 64, 30.0), 0.01));
        assert!(close(learning_rate(&hp, 4, 64, 60.0), 0.001));
        assert!(close(learning_rate(&hp, 4, 64, 29.999), 0.1));
    }

    #[test]
    fn warmup_takes_precedence_over_decay() {
        let hp = HyperParams {
            warmup_epochs: 10.0,
            decay_every_epochs: 4,
            ..HyperParams::default()
        };
        assert!(close(learning_rate(&hp, 8, 64, 5.0), 0.1 + 0.1 * 0.5));
    }

    #[test]
    fn plain_and_momentum_updates() {
        let hp = HyperParams::default();
        let mut w = vec![1.0];
        let mut st = OptimizerState::new(1);
        sgd_update(&mut w, &[0.5], &mut st, &hp, 0.1).unwrap();
        assert!(close(w[0], 0.95));
        assert_eq!(st.iteration, 1);

        let hp = HyperParams {
            mode: UpdateMode::Momentum,
            ..HyperParams::default()
        };
        let mut w = vec![1.0];
        let mut st = OptimizerState::new(1);
        sgd_update(&mut w, &[0.5], &mut st, &hp, 0.1).unwrap();
        assert!(close(st.velocity[0], 0.5001));
        assert!(close(w[0], 0.94999));
    }

    #[test]
    fn zero_delta_is_fixed_point_and_lengths_checked() {
        let hp = HyperParams::default();
        let mut w = vec![1.5, -2.0];
        let mut st = OptimizerState::new(2);
        sgd_update(&mut w, &[0.0, 0.0], &mut st, &hp, 0.3).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
        assert!(sgd_update(&mut w, &[0.0], &mut st, &hp, 0.3).is_err());
    }

    #[test]
    fn validation_names_key() {
        let hp = HyperParams {
            momentum: 1.0,
            ..HyperParams::default()
        };
        assert!(hp.validate().unwrap_err().to_string().contains("optim.momentum"));
        assert!(HyperParams::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn continuous_at_warmup_end(workers in 1usize..512, batch in 1usize..128) {
            let hp = HyperParams::default();
            let below = learning_rate(&hp, workers, batch, hp.warmup_epochs - 1e-12);
            let at = learning_rate(&hp, workers, batch, hp.warmup_epochs);
            prop_assert!((below - at).abs() <= 1e-9 * at.max(1.0));
        }

        #[test]
        fn decays_monotonically(e1 in 5.0f64..200.0, de in 0.0f64..100.0, workers in 1usize..64) {
            let hp = HyperParams::default();
            prop_assert!(learning_rate(&hp, workers, 64, e1 + de) <= learning_rate(&hp, workers, 64, e1));
        }
    }
}
