//! RMSprop and the plateau learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Module;

pub const RMSPROP_GAMMA: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

/// One RMSprop update of a flat parameter slice:
/// `v = γ·v + (1−γ)·g²; θ -= lr·g / √(v + ε)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], v: &mut [f64], lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("rmsprop", "gradient length", params.len(), grads.len()));
    }
    if v.len() != params.len() {
        return Err(Error::shape("rmsprop", "state length", params.len(), v.len()));
    }
    for ((p, g), s) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
        *s = RMSPROP_GAMMA * *s + (1.0 - RMSPROP_GAMMA) * g * g;
        *p -= lr * g / (*s + RMSPROP_EPS).sqrt();
    }
    Ok(())
}

/// Second-moment state keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmsProp {
    pub state: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every parameter of `model` that has an entry in `grads`.
    /// Parameters absent from `grads` (unused this step) are left alone.
    pub fn step<'g>(
        &mut self,
        model: &mut impl Module,
        grads: impl IntoIterator<Item = (&'g str, &'g [f64])>,
        lr: f64,
    ) -> Result<()> {
        let grads: BTreeMap<&str, &[f64]> = grads.into_iter().collect();
        let mut result = Ok(());
        model.visit_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            if let Some(g) = grads.get(p.name.as_str()) {
                let v = self
                    .state
                    .entry(p.name.clone())
                    .or_insert_with(|| vec![0.0; p.value.len()]);
                result = rmsprop_step(p.value.data_mut(), g, v, lr);
            }
        });
        result
    }
}

/// Divides the learning rate by 10 whenever the best loss has not improved
/// by `min_delta` for `patience` consecutive epochs, at most
/// `max_reductions` times. The waiting count restarts after each reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub max_reductions: usize,
    pub best: f64,
    pub wait: usize,
    pub reductions: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, min_delta: f64, max_reductions: usize) -> Self {
        PlateauSchedule {
            lr,
            patience,
            min_delta,
            max_reductions,
            best: f64::INFINITY,
            wait: 0,
            reductions: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience.max(1) && self.reductions < self.max_reductions {
                self.lr /= 10.0;
                self.reductions += 1;
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Replays `history` through a fresh schedule starting at `initial_lr` and
/// returns the learning rate after the last epoch. Pure in its arguments.
pub fn lr_schedule_step(history: &[f64], initial_lr: f64, patience: usize, min_delta: f64, max_reductions: usize) -> f64 {
    let mut s = PlateauSchedule::new(initial_lr, patience, min_delta, max_reductions);
    for &loss in history {
        s.observe(loss);
    }
    s.lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut v, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude() {
        let (lr, g) = (1e-3, 0.5);
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        rmsprop_step(&mut p, &[g], &mut v, lr).unwrap();
        let expected = lr * g / ((1.0 - 0.9) * g * g + 1e-8_f64).sqrt();
        assert!((p[0] + expected).abs() < 1e-15);
        assert!((expected - lr / 0.1_f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn proportional_gradients_get_equal_normalized_steps() {
        let mut p = vec![0.0, 0.0];
        let mut v = vec![0.0, 0.0];
        for _ in 0..5 {
            rmsprop_step(&mut p, &[0.2, 20.0], &mut v, 1e-2).unwrap();
        }
        assert!((p[0] - p[1]).abs() / p[1].abs() < 1e-5, "{p:?}");
    }

    #[test]
    fn mismatched_shapes() {
        let mut p = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(rmsprop_step(&mut p, &[1.0], &mut v, 0.1).is_err());
        assert!(rmsprop_step(&mut p, &[1.0, 1.0], &mut [0.0], 0.1).is_err());
    }

    #[test]
    fn decreasing_history_keeps_lr() {
        assert_eq!(lr_schedule_step(&[5.0, 4.0, 3.0, 2.0], 1e-3, 1, 1e-4, 2), 1e-3);
    }

    #[test]
    fn flat_history_divides_by_ten() {
        assert_eq!(lr_schedule_step(&[1.0, 1.0], 1e-3, 1, 1e-4, 2), 1e-3 / 10.0);
    }

    #[test]
    fn two_plateaus_then_frozen() {
        // simulate the rule by hand: improve, plateau, improve, plateau, long plateau
        let history = [3.0, 3.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let lrs: Vec<f64> = (1..=history.len())
            .map(|k| lr_schedule_step(&history[..k], 1e-3, 1, 1e-4, 2))
            .collect();
        let expected = [1e-3, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5, 1e-5];
        for (a, b) in lrs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-18, "{lrs:?}");
        }
    }

    #[test]
    fn improvement_below_min_delta_counts_as_plateau() {
        assert_eq!(lr_schedule_step(&[1.0, 0.99995], 1e-3, 1, 1e-4, 2), 1e-3 / 10.0);
        assert_eq!(lr_schedule_step(&[1.0, 0.99995], 1e-3, 2, 1e-4, 2), 1e-3);
    }
}
