//! Adaptive-moment optimizer with an optional layer-wise trust ratio (Lamb).

use serde::{Deserialize, Serialize};

use super::{ParamBank, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub layerwise_trust_ratio: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.999,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            layerwise_trust_ratio: true,
        }
    }
}

impl OptimizerSpec {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.decay > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer spec {self:?}")))
        }
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// Applies one update to every entry of `bank`. `step` is 1-based and drives
/// bias correction; `epoch` drives the learning-rate schedule.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves the bank untouched.
pub fn optimizer_step<T: Real>(bank: &mut ParamBank<T>, spec: &OptimizerSpec, step: u64, epoch: u32) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("optimizer_step", "step index is 1-based"));
    }
    for e in bank.entries() {
        if let Some(pos) = e.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                detail: format!("{}[{pos}]", e.name),
            });
        }
    }
    let lr = spec.lr_at(epoch);
    let (b1, b2) = (spec.beta1, spec.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for e in bank.entries_mut() {
        let n = e.value.len();
        let mut update = vec![0.0f64; n];
        {
            let g = e.grad.data();
            let m = e.m.data_mut();
            for i in 0..n {
                m[i] = T::of(b1 * m[i].f64() + (1.0 - b1) * g[i].f64());
            }
            let v = e.v.data_mut();
            for i in 0..n {
                let gi = g[i].f64();
                v[i] = T::of(b2 * v[i].f64() + (1.0 - b2) * gi * gi);
            }
            let (m, v) = (e.m.data(), e.v.data());
            for i in 0..n {
                let mhat = m[i].f64() / bc1;
                let vhat = v[i].f64() / bc2;
                update[i] = mhat / (vhat.sqrt() + spec.epsilon);
            }
        }
        let mut ratio = 1.0;
        if spec.layerwise_trust_ratio {
            let wn = e.value.norm_f64();
            let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
            if wn > 0.0 && un > 0.0 {
                ratio = wn / un;
            }
        }
        for (w, u) in e.value.data_mut().iter_mut().zip(&update) {
            *w = T::of(w.f64() - lr * ratio * u);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_bank(w: f64) -> (ParamBank<f64>, crate::tensor::ParamId) {
        let mut bank = ParamBank::new();
        let id = bank.add("w", Tensor::full(&[1], w));
        (bank, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut bank = ParamBank::<f32>::new();
        bank.add("a", Tensor::from_fn(&[3, 2], |i| i as f32 - 2.5));
        let before = bank.entries()[0].value.clone();
        for step in 1..=5 {
            optimizer_step(&mut bank, &OptimizerSpec::with_lr(0.1), step, 0).unwrap();
        }
        assert_eq!(bank.entries()[0].value, before);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        for &(g, trust) in &[(3.0, true), (-0.5, true), (2.0, false), (-7.0, false)] {
            let (mut bank, id) = scalar_bank(1.0);
            bank.accumulate(id, &[g]);
            let spec = OptimizerSpec {
                layerwise_trust_ratio: trust,
                ..OptimizerSpec::with_lr(0.01)
            };
            optimizer_step(&mut bank, &spec, 1, 0).unwrap();
            let delta = bank.value(id).data()[0] - 1.0;
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_bowl_converges_monotonically() {
        let (mut bank, id) = scalar_bank(1.0);
        let spec = OptimizerSpec::with_lr(0.1);
        let mut prev = f64::INFINITY;
        for step in 1..=200 {
            let w = bank.value(id).data()[0];
            let loss = w * w;
            assert!(loss <= prev, "loss increased at step {step}");
            prev = loss;
            bank.zero_grad();
            bank.accumulate(id, &[2.0 * w]);
            optimizer_step(&mut bank, &spec, step, 0).unwrap();
        }
        assert!(bank.value(id).data()[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let (mut bank, id) = scalar_bank(1.0);
        bank.accumulate(id, &[f64::NAN]);
        assert!(optimizer_step(&mut bank, &OptimizerSpec::default(), 1, 0).is_err());
        assert_eq!(bank.value(id).data()[0], 1.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (mut bank, id) = scalar_bank(0.7);
        bank.accumulate(id, &[1.0]);
        optimizer_step(&mut bank, &OptimizerSpec::with_lr(0.0), 1, 0).unwrap();
        assert_eq!(bank.value(id).data()[0], 0.7);
    }
}
