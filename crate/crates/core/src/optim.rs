//! SGD with momentum and weight decay, and piecewise-constant learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Optimizer hyperparameters plus per-parameter velocity buffers.
///
/// Velocity buffers exist only when `momentum > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {learning_rate} must be nonnegative")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be nonnegative")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    pub fn velocity(&self) -> Option<&[Vec<f64>]> {
        self.velocity.as_deref()
    }

    /// Restores buffers saved from a previous run.
    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        if self.momentum > 0.0 {
            self.velocity = Some(velocity);
        }
    }

    /// `v <- momentum * v + g + wd * p; p <- p - lr * v`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if params.get(id).len() != g.len() {
                return Err(Error::shape(format!(
                    "gradient of length {} for parameter {} with shape {:?}",
                    g.len(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        if self.momentum > 0.0 && self.velocity.is_none() {
            self.velocity = Some(params.ids().map(|id| vec![0.0; params.get(id).len()]).collect());
        }
        for (i, id) in params.ids().enumerate() {
            let p: &mut Tensor = params.get_mut(id);
            let g = &grads[i];
            match self.velocity.as_mut() {
                Some(vel) => {
                    let v = &mut vel[i];
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                        *pv -= self.learning_rate * *vv;
                    }
                }
                None => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                        *pv -= self.learning_rate * (gv + self.weight_decay * *pv);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning rate `base` multiplied by every `factor` whose `at` iteration has been reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub decays: Vec<LrDecay>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub at: u64,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, decays: Vec::new() }
    }

    pub fn at(&self, iteration: u64) -> f64 {
        self.decays
            .iter()
            .filter(|d| iteration >= d.at)
            .fold(self.base, |lr, d| lr * d.factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn plain_step() {
        let mut s = single(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut s, &[vec![0.5]]).unwrap();
        assert!((s.get(s.ids().next().unwrap()).item() - 0.95).abs() < 1e-15);
        assert!(opt.velocity().is_none());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = single(1.25);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut s, &[vec![0.0]]).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).item(), 1.25);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, g) = (0.1, 0.5);
        let mut s = single(0.0);
        let mut opt = Sgd::new(lr, 0.9, 0.0).unwrap();
        opt.step(&mut s, &[vec![g]]).unwrap();
        let p1 = s.get(s.ids().next().unwrap()).item();
        assert!((p1 + lr * g).abs() < 1e-15);
        opt.step(&mut s, &[vec![g]]).unwrap();
        let p2 = s.get(s.ids().next().unwrap()).item();
        assert!((p1 - p2 - lr * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut s = single(2.0);
        let mut opt = Sgd::new(0.5, 0.0, 0.1).unwrap();
        opt.step(&mut s, &[vec![0.0]]).unwrap();
        assert!((s.get(s.ids().next().unwrap()).item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(-1.0, 0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.5, -0.1).is_err());
    }

    #[test]
    fn schedule_steps_down() {
        let s = LrSchedule {
            base: 5e-2,
            decays: vec![LrDecay { at: 800, factor: 0.1 }, LrDecay { at: 950, factor: 0.1 }],
        };
        assert_eq!(s.at(0), 5e-2);
        assert!((s.at(800) - 5e-3).abs() < 1e-15);
        assert!((s.at(1000) - 5e-4).abs() < 1e-15);
    }
}
